"""
Synthetic segmentation datasets with a controllable labeled/unlabeled
mismatch, the volume file format, and dataset manifests.

Volume format: a JSON header ``<name>.json`` holding ``{"version": 1,
"shape": [...], "dtype": "f32" | "u8"}`` next to a raw little-endian,
row-major payload ``<name>.raw``.

Manifest format: ``{"version": 1, "spec": {...}, "records": [{"id": ...,
"image": ..., "label": ..., "split": ...}, ...]}`` with paths relative to the
manifest's directory.
"""

from dataclasses import asdict, dataclass, field, fields
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import (
    DataError,
    VolumeFormatError,
    atomic_write_bytes,
    atomic_write_text,
    check_field_types,
    format_details,
)

__all__ = [
    "DatasetManifest",
    "DatasetSpec",
    "SPLITS",
    "VolumeRecord",
    "load_volume",
    "save_volume",
    "synth_generate",
]

default_logger = logging.getLogger(__name__)

VOLUME_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("labeled", "unlabeled", "val", "test")

_VOLUME_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

# Generator constants. Intensities are in arbitrary units around [0, 1].
BACKGROUND_INTENSITY = 0.2
FOREGROUND_SPAN = 0.6
SAMPLE_JITTER = 0.05
INTENSITY_SHIFT = 0.25
SCALE_SHIFT = 0.5
RADIUS_RANGE = (0.08, 0.18)
FOREGROUND_BOUNDS = (0.01, 0.40)
PLACEMENT_RETRIES = 50
SAMPLE_RETRIES = 20


@dataclass(frozen=True)
class DatasetSpec(object):
    n_labeled: int = 4
    n_unlabeled: int = 76
    n_val: int = 10
    n_test: int = 20
    shape: Tuple[int, int] = (64, 64)
    num_classes: int = 3
    "K, including background."

    shift: float = 0.3
    """
    Drift of the unlabeled, val and test pools relative to the labeled pool:
    an additive foreground intensity offset of ``shift·0.25`` and a blob-scale
    multiplier of ``1 + shift·0.5``.
    """

    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

        if self.n_labeled < 2 or self.n_unlabeled < 2:
            raise ValueError(
                f"need at least 2 labeled and 2 unlabeled samples; got {self.n_labeled} and {self.n_unlabeled}"
            )
        if self.n_val < 0 or self.n_test < 0:
            raise ValueError("n_val and n_test must be >= 0")
        if len(self.shape) != 2 or min(self.shape) < 8:
            raise ValueError(f"shape must be 2D with extents >= 8; got {self.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2; got {self.num_classes}")
        if not 0 <= self.shift <= 1:
            raise ValueError(f"shift must lie in [0, 1]; got {self.shift}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0; got {self.noise_sigma}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown dataset spec keys: {', '.join(unknown)}")
        check_field_types(cls, d, "dataset spec")

        try:
            return cls(**d)
        except ValueError as e:
            raise DataError(f"invalid dataset spec: {e}")

    @classmethod
    def labeled_ratio_preset(cls, name: str, **overrides) -> "DatasetSpec":
        """
        The 80-scan training splits at 5% (4 labeled / 76 unlabeled) and 10%
        (8 / 72) labeled ratios.
        """
        presets = {"5%": (4, 76), "10%": (8, 72)}
        if name not in presets:
            raise ValueError(f"unknown labeled-ratio preset `{name}`; expected one of {sorted(presets)}")
        n_l, n_u = presets[name]
        return cls(n_labeled=n_l, n_unlabeled=n_u, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    def class_intensity(self, c: int, shifted: bool) -> float:
        if c == 0:
            return BACKGROUND_INTENSITY
        base = BACKGROUND_INTENSITY + FOREGROUND_SPAN * c / (self.num_classes - 1)
        return base + (self.shift * INTENSITY_SHIFT if shifted else 0.0)

    def blob_scale(self, shifted: bool) -> float:
        return 1.0 + self.shift * SCALE_SHIFT if shifted else 1.0


@dataclass
class VolumeRecord(object):
    id: str
    image: str
    "Header path of the image volume, relative to the manifest directory."

    label: Optional[str]
    "Header path of the label volume; None in training views of the unlabeled pool."

    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"record `{self.id}` has unknown split `{self.split}`")
        if self.split != "unlabeled" and self.label is None:
            raise DataError(f"{self.split} record `{self.id}` must carry a label")

    def to_dict(self) -> dict:
        d = {"id": self.id, "image": self.image, "split": self.split}
        if self.label is not None:
            d["label"] = self.label
        return d


# Volume files


def _payload_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def save_volume(path: Union[str, Path], values: np.ndarray, dtype: str):
    """
    Write ``values`` as a volume: ``path`` is the JSON header and the payload
    goes next to it with a ``.raw`` suffix.
    """
    if dtype not in _VOLUME_DTYPES:
        raise ValueError(f"volume dtype must be one of {sorted(_VOLUME_DTYPES)}; got `{dtype}`")

    path = Path(path)
    values = np.asarray(values)

    if dtype == "u8" and values.size and (values.min() < 0 or values.max() > 255):
        raise ValueError("u8 volumes need values in [0, 255]")

    payload = np.ascontiguousarray(values, dtype=_VOLUME_DTYPES[dtype]).tobytes()
    header = {"version": VOLUME_VERSION, "shape": list(values.shape), "dtype": dtype}
    atomic_write_bytes(_payload_path(path), payload)
    atomic_write_text(path, json.dumps(header, sort_keys=True))


def load_volume(
    path: Union[str, Path],
    expect_shape: Optional[Sequence[int]] = None,
    expect_dtype: Optional[str] = None,
) -> np.ndarray:
    """
    Read a volume. ``f32`` volumes come back as float32 arrays and ``u8``
    volumes as uint8 arrays, bit-exact to what was saved.
    """
    path = Path(path)

    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataError(f"no such volume header `{path}`")

    try:
        header = json.loads(text)
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"malformed header in `{path}`: {e}")

    if not isinstance(header, dict):
        raise VolumeFormatError(f"malformed header in `{path}`: expected a JSON object")

    for key in ("version", "shape", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"header `{path}` is missing field `{key}`")

    if header["version"] != VOLUME_VERSION:
        raise VolumeFormatError(f"header `{path}` field `version` is {header['version']!r}, expected {VOLUME_VERSION}")

    dtype = header["dtype"]
    if dtype not in _VOLUME_DTYPES:
        raise VolumeFormatError(f"header `{path}` field `dtype` is {dtype!r}, expected one of {sorted(_VOLUME_DTYPES)}")

    shape = header["shape"]
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise VolumeFormatError(f"header `{path}` field `shape` is {shape!r}, expected a list of extents")

    if expect_dtype is not None and dtype != expect_dtype:
        raise VolumeFormatError(f"header `{path}` field `dtype` is `{dtype}`, expected `{expect_dtype}`")
    if expect_shape is not None and tuple(shape) != tuple(expect_shape):
        raise VolumeFormatError(f"header `{path}` field `shape` is {tuple(shape)}, expected {tuple(expect_shape)}")

    np_dtype = _VOLUME_DTYPES[dtype]
    expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize

    try:
        payload = _payload_path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"no such volume payload `{_payload_path(path)}`")

    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload `{_payload_path(path)}` has the wrong length: expected {expected} bytes, found {len(payload)}"
        )

    return np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()


# Manifests


class DatasetManifest(object):
    """
    The records of a generated dataset, grouped by split.
    """

    root: Path = None
    "Directory that record paths are relative to."

    spec: dict = None
    records: List[VolumeRecord] = None

    def __init__(self, root: Union[str, Path], spec: dict, records: List[VolumeRecord]):
        self.root = Path(root)
        self.spec = dict(spec)
        self.records = list(records)

    @property
    def num_classes(self) -> int:
        return int(self.spec["num_classes"])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.spec["shape"])

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"

        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"no such manifest `{path}`")
        except json.JSONDecodeError as e:
            raise DataError(f"malformed manifest `{path}`: {e}")

        for key in ("version", "spec", "records"):
            if key not in doc:
                raise DataError(f"manifest `{path}` is missing `{key}`")
        if doc["version"] != MANIFEST_VERSION:
            raise DataError(f"manifest `{path}` has unsupported version {doc['version']!r}")

        records = []
        for r in doc["records"]:
            try:
                records.append(VolumeRecord(id=r["id"], image=r["image"], label=r.get("label"), split=r["split"]))
            except KeyError as e:
                raise DataError(f"manifest `{path}` has a record missing {e}")

        return cls(path.parent, doc["spec"], records)

    def save(self, path: Optional[Union[str, Path]] = None):
        path = Path(path) if path is not None else self.root / "manifest.json"
        doc = {
            "version": MANIFEST_VERSION,
            "spec": self.spec,
            "records": [r.to_dict() for r in self.records],
        }
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True))

    def split(self, name: str) -> List[VolumeRecord]:
        if name not in SPLITS:
            raise DataError(f"unknown split `{name}`; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def training_view(self) -> Tuple[List[VolumeRecord], List[VolumeRecord]]:
        """
        The labeled records, and the unlabeled records stripped of their label
        paths so that training code cannot read them.
        """
        unlabeled = [VolumeRecord(id=r.id, image=r.image, label=None, split=r.split) for r in self.split("unlabeled")]
        return self.split("labeled"), unlabeled

    def load_images(self, records: Sequence[VolumeRecord]) -> np.ndarray:
        "Images as a float64 ``[N, 1, H, W]`` array."
        if not records:
            return np.zeros((0, 1) + self.shape)
        arrs = [load_volume(self.root / r.image, expect_dtype="f32") for r in records]
        return np.stack([a.astype(np.float64)[None] if a.ndim == 2 else a.astype(np.float64) for a in arrs])

    def load_labels(self, records: Sequence[VolumeRecord]) -> np.ndarray:
        "Label maps as an int64 ``[N, H, W]`` array."
        for r in records:
            if r.label is None:
                raise DataError(f"record `{r.id}` carries no label path")
        if not records:
            return np.zeros((0,) + self.shape, dtype=np.int64)
        return np.stack([load_volume(self.root / r.label, expect_dtype="u8").astype(np.int64) for r in records])


# Generation


def _ellipse(shape: Tuple[int, int], rng: np.random.Generator, radius: Tuple[float, float], scale: float) -> np.ndarray:
    H, W = shape
    lo, hi = radius
    a = rng.uniform(lo, hi) * min(H, W) * scale
    b = rng.uniform(lo, hi) * min(H, W) * scale
    theta = rng.uniform(0.0, math.pi)
    reach = max(a, b)
    cy = rng.uniform(min(reach, H / 2), max(H - reach, H / 2))
    cx = rng.uniform(min(reach, W / 2), max(W - reach, W / 2))

    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
    return u * u + v * v <= 1.0


def _try_sample(
    spec: DatasetSpec,
    rng: np.random.Generator,
    shifted: bool,
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    label = np.zeros(spec.shape, dtype=np.uint8)
    occupied = np.zeros(spec.shape, dtype=bool)

    for c in range(1, spec.num_classes):
        for _ in range(PLACEMENT_RETRIES):
            blob = _ellipse(spec.shape, rng, RADIUS_RANGE, spec.blob_scale(shifted))
            # Keep a one-voxel gap so classes never touch.
            grown = blob.copy()
            grown[1:] |= blob[:-1]
            grown[:-1] |= blob[1:]
            grown[:, 1:] |= blob[:, :-1]
            grown[:, :-1] |= blob[:, 1:]

            if blob.any() and not (grown & occupied).any():
                label[blob] = c
                occupied |= blob
                break
        else:
            return None

    frac = occupied.mean()
    if not FOREGROUND_BOUNDS[0] <= frac <= FOREGROUND_BOUNDS[1]:
        return None

    jitter = rng.normal(0.0, SAMPLE_JITTER, size=spec.num_classes)
    means = np.array([spec.class_intensity(c, shifted) for c in range(spec.num_classes)]) + jitter
    image = means[label] + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    return image.astype(np.float32), label


def _generate_sample(spec: DatasetSpec, split_index: int, index: int, logger: logging.Logger):
    shifted = SPLITS[split_index] != "labeled"

    for attempt in range(SAMPLE_RETRIES):
        rng = np.random.default_rng([spec.seed, split_index, index, attempt])
        result = _try_sample(spec, rng, shifted)
        if result is not None:
            return result

        logger.info(
            "% regenerating sample with perturbed seed @i "
            + f"{SPLITS[split_index]}-{index:04d} "
            + format_details(attempt=attempt + 1)
        )

    raise DataError(
        f"could not place blobs for sample {SPLITS[split_index]}-{index:04d} after {SAMPLE_RETRIES} attempts; "
        f"try a larger shape or fewer classes"
    )


def synth_generate(
    spec: DatasetSpec,
    out_dir: Union[str, Path],
    logger: logging.Logger = default_logger,
    ads_logger: logging.Logger = default_logger,
) -> DatasetManifest:
    """
    Generate a dataset into ``out_dir`` and write its manifest.

    Each sample holds ``K − 1`` non-overlapping elliptical blobs, one per
    foreground class, with class-specific intensities plus Gaussian noise.
    The unlabeled, val and test pools are drawn with intensities and blob
    sizes shifted by ``spec.shift``. Ground truth is stored for every sample,
    unlabeled ones included. Output is a pure function of ``spec``. The
    completion event goes to ``ads_logger``.
    """
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    counts = dict(zip(SPLITS, (spec.n_labeled, spec.n_unlabeled, spec.n_val, spec.n_test)))
    records = []

    for split_index, split in enumerate(SPLITS):
        for index in range(counts[split]):
            rid = f"{split}-{index:04d}"
            image, label = _generate_sample(spec, split_index, index, logger)

            image_rel = f"volumes/{rid}_image.json"
            label_rel = f"volumes/{rid}_label.json"
            save_volume(out_dir / image_rel, image, "f32")
            save_volume(out_dir / label_rel, label, "u8")
            records.append(VolumeRecord(id=rid, image=image_rel, label=label_rel, split=split))

    vol_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(out_dir, spec.to_dict(), records)
    manifest.save()

    ads_logger.info(
        "% generated dataset @i "
        + f"{out_dir} "
        + format_details(n_records=len(records), seed=spec.seed, shift=spec.shift)
    )
    return manifest
