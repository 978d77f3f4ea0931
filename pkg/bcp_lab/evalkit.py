"""
Segmentation metrics and labeled/unlabeled distribution diagnostics.

Distances are Euclidean between voxel centers, in voxel units unless a
``spacing`` vector is given. Surface distances are computed brute force over
all surface-voxel pairs.
"""

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import astuple, dataclass
import io
import logging
import math
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .segnet import ModelParams, forward
from .utils import DataError, UndefinedMetricError, atomic_write_text, format_details

__all__ = [
    "DIAGNOSE_HEADER",
    "EVAL_HEADER",
    "FEATURES",
    "KdeCurve",
    "MetricRow",
    "asd",
    "class_features",
    "diagnose",
    "dice",
    "dice_gap",
    "evaluate_volumes",
    "hd95",
    "jaccard",
    "kde",
    "kde_gap",
    "mean_foreground_dice",
    "metric_row",
    "read_eval_csv",
    "silverman_bandwidth",
    "surface_voxels",
    "write_diagnose_csv",
    "write_eval_csv",
]

default_logger = logging.getLogger(__name__)

EVAL_HEADER = ("volume_id", "class", "dice", "jaccard", "hd95", "asd")
DIAGNOSE_HEADER = ("class", "kde_gap", "dice_labeled", "dice_unlabeled")
FEATURES = ("intensity", "probability", "activation")

KDE_GRID_POINTS = 512
KDE_GRID_MARGIN = 4.0
"Grid extends this many bandwidths beyond the data."

KDE_CHUNK = 128
SILVERMAN_FACTOR = 1.06


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")


# Overlap


def _overlap_counts(a: np.ndarray, b: np.ndarray, c: int) -> Tuple[int, int, int]:
    a = np.asarray(a)
    b = np.asarray(b)
    _check_pair(a, b)
    A = a == c
    B = b == c
    return int(A.sum()), int(B.sum()), int(np.logical_and(A, B).sum())


def dice(a: np.ndarray, b: np.ndarray, c: int) -> float:
    """
    ``2|A∩B| / (|A| + |B|)`` for the voxels of class ``c``; 1.0 when both
    are empty.
    """
    na, nb, ni = _overlap_counts(a, b, c)
    if na + nb == 0:
        return 1.0
    return 2.0 * ni / (na + nb)


def jaccard(a: np.ndarray, b: np.ndarray, c: int) -> float:
    """
    ``|A∩B| / |A∪B|`` for the voxels of class ``c``; 1.0 when both are
    empty.
    """
    na, nb, ni = _overlap_counts(a, b, c)
    union = na + nb - ni
    if union == 0:
        return 1.0
    return ni / union


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    return float(np.mean([dice(pred, gt, c) for c in range(1, num_classes)]))


# Surfaces


def surface_voxels(a: np.ndarray, c: int) -> np.ndarray:
    """
    Boolean map of the voxels of class ``c`` with at least one face neighbor
    not of class ``c``. Out-of-bounds neighbors count as background.
    """
    region = np.asarray(a) == c
    if not region.any():
        return region

    structure = ndimage.generate_binary_structure(region.ndim, 1)
    interior = ndimage.binary_erosion(region, structure=structure, border_value=0)
    return region & ~interior


def _surface_points(a: np.ndarray, c: int, spacing: Optional[Sequence[float]], which: str) -> np.ndarray:
    pts = np.argwhere(surface_voxels(a, c)).astype(np.float64)
    if not len(pts):
        raise UndefinedMetricError(f"surface distance is undefined: class {c} is empty in the {which} map")
    if spacing is not None:
        spacing = np.asarray(spacing, dtype=np.float64)
        if spacing.shape != (pts.shape[1],):
            raise ValueError(f"spacing {tuple(spacing)} does not match a {pts.shape[1]}-D map")
        pts = pts * spacing
    return pts


def _directed_distances(
    a: np.ndarray,
    b: np.ndarray,
    c: int,
    spacing: Optional[Sequence[float]],
) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    _check_pair(a, b)

    pa = _surface_points(a, c, spacing, "first")
    pb = _surface_points(b, c, spacing, "second")
    d = cdist(pa, pb)
    return d.min(axis=1), d.min(axis=0)


def hd95(a: np.ndarray, b: np.ndarray, c: int, spacing: Optional[Sequence[float]] = None) -> float:
    """
    Symmetric 95th-percentile surface distance: the larger of the two
    directed 95th percentiles, interpolated linearly.
    """
    d_ab, d_ba = _directed_distances(a, b, c, spacing)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def asd(a: np.ndarray, b: np.ndarray, c: int, spacing: Optional[Sequence[float]] = None) -> float:
    """
    Average symmetric surface distance: the mean over the union of both
    directed distance multisets.
    """
    d_ab, d_ba = _directed_distances(a, b, c, spacing)
    return float(np.concatenate([d_ab, d_ba]).mean())


@dataclass
class MetricRow(object):
    volume_id: str
    cls: int
    dice: float
    jaccard: float
    hd95: float
    "``nan`` when either surface is empty."

    asd: float


def metric_row(
    pred: np.ndarray,
    gt: np.ndarray,
    c: int,
    spacing: Optional[Sequence[float]] = None,
    volume_id: str = "",
    logger: logging.Logger = default_logger,
) -> MetricRow:
    """
    All four metrics for one class. Undefined surface distances are reported
    as ``nan`` with a warning.
    """
    try:
        h = hd95(pred, gt, c, spacing)
        s = asd(pred, gt, c, spacing)
    except UndefinedMetricError as e:
        logger.warning("% undefined surface distance @w " + f"{volume_id} " + format_details(cls=c, reason=f'"{e}"'))
        h = s = math.nan

    return MetricRow(volume_id=volume_id, cls=c, dice=dice(pred, gt, c), jaccard=jaccard(pred, gt, c), hd95=h, asd=s)


def _nan_rows(volume_id: str, num_classes: int) -> List[MetricRow]:
    return [MetricRow(volume_id, c, math.nan, math.nan, math.nan, math.nan) for c in range(1, num_classes)]


def evaluate_volumes(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    ids: Sequence[str],
    load_fn: Callable[[int], Tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    threads: int = 1,
    spacing: Optional[Sequence[float]] = None,
    logger: logging.Logger = default_logger,
) -> List[MetricRow]:
    """
    Score every volume for every foreground class. ``load_fn(k)`` returns
    the image and ground truth of volume ``k``. Volumes are processed on up
    to ``threads`` workers and rows come back in input order. A volume whose
    files are missing or unreadable is logged and yields ``nan`` rows; any
    other failure propagates.
    """

    def one(k: int) -> List[MetricRow]:
        vid = ids[k]
        try:
            image, label = load_fn(k)
            pred = predict_fn(image)
            return [metric_row(pred, label, c, spacing, vid, logger) for c in range(1, num_classes)]
        except (DataError, OSError) as e:
            logger.warning("% volume evaluation failed @w " + f"{vid} " + format_details(error=f'"{e}"'))
            return _nan_rows(vid, num_classes)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_volume = list(pool.map(one, range(len(ids))))

    return [row for rows in per_volume for row in rows]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _write_csv(path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_eval_csv(path: Union[str, Path], rows: Sequence[MetricRow]):
    _write_csv(path, EVAL_HEADER, [astuple(r) for r in rows])


def read_eval_csv(path: Union[str, Path]) -> List[MetricRow]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"no such evaluation file `{path}`")

    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != EVAL_HEADER:
        raise DataError(f"evaluation file `{path}` has header {header}; expected {EVAL_HEADER}")

    rows = []
    for lineno, rec in enumerate(reader, 2):
        try:
            vid, cls, *values = rec
            rows.append(MetricRow(vid, int(cls), *(float(v) for v in values)))
        except (TypeError, ValueError):
            raise DataError(f"evaluation file `{path}` line {lineno} is malformed: {rec}")
    return rows


# Distribution diagnostics


def dice_gap(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    labeled: Tuple[np.ndarray, np.ndarray],
    unlabeled: Tuple[np.ndarray, np.ndarray],
    num_classes: int,
) -> Tuple[float, float, float]:
    """
    Mean foreground Dice on a labeled and an unlabeled subset, each given as
    ``(images, labels)``, and their difference ``dice_l − dice_u``.
    """
    scores = []

    for (images, labels), what in ((labeled, "labeled"), (unlabeled, "unlabeled")):
        if not len(images):
            raise ValueError(f"dice_gap needs a nonempty {what} subset")
        preds = predict_fn(images)
        scores.append(float(np.mean([mean_foreground_dice(p, g, num_classes) for p, g in zip(preds, labels)])))

    return scores[0], scores[1], scores[0] - scores[1]


@dataclass
class KdeCurve(object):
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))


def silverman_bandwidth(samples: np.ndarray, logger: logging.Logger = default_logger) -> float:
    """
    ``1.06 · σ̂ · n^(−1/5)``. A zero spread falls back to σ̂ = 1.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if len(samples) < 2:
        raise ValueError(f"automatic bandwidth needs at least 2 samples; got {len(samples)}")

    sigma = float(np.std(samples))
    if sigma == 0:
        logger.warning("% degenerate KDE spread @w samples " + format_details(n=len(samples), fallback_sigma=1.0))
        sigma = 1.0
    return SILVERMAN_FACTOR * sigma * len(samples) ** (-0.2)


def _default_grid(samples: np.ndarray, h: float) -> np.ndarray:
    lo = samples.min() - KDE_GRID_MARGIN * h
    hi = samples.max() + KDE_GRID_MARGIN * h
    return np.linspace(lo, hi, KDE_GRID_POINTS)


def kde(
    samples: Sequence[float],
    grid: Optional[np.ndarray] = None,
    bandwidth: Optional[float] = None,
    logger: logging.Logger = default_logger,
) -> KdeCurve:
    """
    Gaussian kernel density estimate. ``bandwidth`` defaults to Silverman's
    rule; ``grid`` defaults to 512 points spanning the data ±4 bandwidths.
    """
    samples = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if not len(samples):
        raise ValueError("kde needs at least one sample")

    h = silverman_bandwidth(samples, logger) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError(f"kde bandwidth must be > 0; got {h}")

    grid = _default_grid(samples, h) if grid is None else np.asarray(grid, dtype=np.float64)
    density = np.empty(len(grid))
    norm = 1.0 / (len(samples) * h * math.sqrt(2.0 * math.pi))

    for start in range(0, len(grid), KDE_CHUNK):
        g = grid[start : start + KDE_CHUNK, None]
        z = (g - samples[None, :]) / h
        density[start : start + KDE_CHUNK] = np.exp(-0.5 * z * z).sum(axis=1) * norm

    return KdeCurve(grid=grid, density=density, bandwidth=h)


def kde_gap(
    feats_labeled: Sequence[float],
    feats_unlabeled: Sequence[float],
    logger: logging.Logger = default_logger,
) -> float:
    """
    L1 distance between the labeled and unlabeled feature densities on a
    shared grid, trapezoid-integrated. Lies in [0, 2].
    """
    fl = np.asarray(feats_labeled, dtype=np.float64).ravel()
    fu = np.asarray(feats_unlabeled, dtype=np.float64).ravel()
    if not len(fl) or not len(fu):
        raise ValueError("kde_gap needs nonempty feature sets on both sides")

    hl = silverman_bandwidth(fl, logger)
    hu = silverman_bandwidth(fu, logger)
    h = max(hl, hu)
    both = np.concatenate([fl, fu])
    grid = _default_grid(both, h)

    dl = kde(fl, grid, hl, logger).density
    du = kde(fu, grid, hu, logger).density
    return float(trapezoid(np.abs(dl - du), grid))


def class_features(
    images: np.ndarray,
    labels: np.ndarray,
    c: int,
    kind: str = "intensity",
    params: Optional[ModelParams] = None,
) -> np.ndarray:
    """
    Per-voxel scalar features over the ground-truth region of class ``c``.

    ``intensity``: the image values. ``probability``: the model's softmax
    probability of class ``c``. ``activation``: the channel mean of the
    model's penultimate feature map.
    """
    if kind not in FEATURES:
        raise ValueError(f"unknown feature `{kind}`; expected one of {FEATURES}")

    images = np.asarray(images, dtype=np.float64)
    region = np.asarray(labels) == c

    if kind == "intensity":
        return images.mean(axis=1)[region]

    if params is None:
        raise ValueError(f"`{kind}` features need model parameters")

    probe = []
    with ad.no_grad():
        logits = forward(params, images, probe=probe)

    if kind == "probability":
        return ad.softmax_channels(logits).values[:, c][region]

    penultimate = [arr for name, arr in probe if name == "penultimate"][-1]
    return penultimate.mean(axis=1)[region]


def diagnose(
    params: ModelParams,
    predict_fn: Callable[[np.ndarray], np.ndarray],
    labeled: Tuple[np.ndarray, np.ndarray],
    unlabeled: Tuple[np.ndarray, np.ndarray],
    num_classes: int,
    feature: str = "intensity",
    logger: logging.Logger = default_logger,
) -> List[Tuple[int, float, float, float]]:
    """
    Per foreground class: the labeled/unlabeled ``kde_gap`` of the chosen
    feature, and per-class Dice on both subsets. Rows follow
    ``DIAGNOSE_HEADER``.
    """
    preds_l = predict_fn(labeled[0])
    preds_u = predict_fn(unlabeled[0])
    rows = []

    for c in range(1, num_classes):
        fl = class_features(labeled[0], labeled[1], c, feature, params)
        fu = class_features(unlabeled[0], unlabeled[1], c, feature, params)
        gap = kde_gap(fl, fu, logger) if len(fl) > 1 and len(fu) > 1 else math.nan
        d_l = float(np.mean([dice(p, g, c) for p, g in zip(preds_l, labeled[1])]))
        d_u = float(np.mean([dice(p, g, c) for p, g in zip(preds_u, unlabeled[1])]))
        rows.append((c, gap, d_l, d_u))

    return rows


def write_diagnose_csv(path: Union[str, Path], rows: Sequence[Tuple[int, float, float, float]]):
    _write_csv(path, DIAGNOSE_HEADER, rows)
