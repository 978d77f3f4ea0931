"""
The training pipeline: supervised pretraining on labeled data, then Mean
Teacher self-training with bidirectional copy-paste, then prediction.

A self-training step runs, in order: teacher pseudo-labels (no gradients), a
fresh mask, mixing, the student forward pass, the loss, backward plus a
momentum SGD step, the EMA teacher update, and the iteration increment. The
teacher is only ever written by the EMA update.
"""

import csv
from dataclasses import asdict, dataclass, field, fields, replace
import io
import json
import logging
import math
from pathlib import Path
import time
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datakit import DatasetManifest
from .evalkit import mean_foreground_dice
from .loss import LossConfig, LossReport, bcp_loss, seg_loss, soft_seg_loss
from .maskgen import Mask, MaskSpec, generate_mask
from .mixer import (
    bcp_mix_images,
    bcp_mix_labels,
    fg_cutmix_mix,
    mixup_mix,
    one_hot,
    within_set_mix,
)
from .pseudolabel import make_pseudo_labels, mode_for_classes
from .segnet import (
    EmaConfig,
    ModelParams,
    NetConfig,
    OptimConfig,
    ema_update,
    forward,
    init_params,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
)
from .utils import DataError, NumericError, atomic_write_text, check_field_types, format_details

__all__ = [
    "MIXER_MODES",
    "PRETRAIN_MODES",
    "Pools",
    "StepBatch",
    "TrainConfig",
    "TrainerState",
    "check_net_fits",
    "draw_step_batch",
    "load_pools",
    "load_state",
    "predict",
    "pretrain",
    "save_state",
    "selftrain_step",
    "train",
    "validation_dice",
]

default_logger = logging.getLogger(__name__)

MIXER_MODES = ("bcp", "in_only", "out_only", "within_set", "mixup", "fg_cutmix", "plain")
PRETRAIN_MODES = ("cp", "plain", "none")
FG_CUTMIX_GRID = 4
METRICS_HEADER = ("iter", "lr", "l_in", "l_out", "l_all", "val_dice")
THROUGHPUT_INTERVAL = 120.0
"Seconds between throughput log lines."

_NESTED = {
    "net": NetConfig,
    "mask_spec": MaskSpec,
    "loss_cfg": LossConfig,
    "optim_cfg": OptimConfig,
    "ema_cfg": EmaConfig,
}


@dataclass(frozen=True)
class TrainConfig(object):
    net: NetConfig = field(default_factory=NetConfig)
    pretrain_iters: int = 300
    selftrain_iters: int = 400
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    mask_spec: MaskSpec = field(default_factory=MaskSpec)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    optim_cfg: OptimConfig = field(default_factory=OptimConfig)
    ema_cfg: EmaConfig = field(default_factory=EmaConfig)

    mixer_mode: str = "bcp"
    """
    ``bcp``, ``in_only``, ``out_only``, ``within_set``, ``mixup``,
    ``fg_cutmix``, or ``plain`` (self-training without mixing).
    """

    pretrain_mode: str = "cp"
    "``cp`` (within-set copy-paste), ``plain`` (no mixing) or ``none`` (random init)."

    use_lcc: bool = True
    seed: int = 0

    checkpoint_every: int = 0
    "Write a state checkpoint every this many self-training iterations; 0 disables."

    log_every: int = 50
    "Emit a metrics row every this many self-training iterations."

    per_pair_masks: bool = False
    "Draw one mask per mixed pair instead of one per step."

    val_limit: int = 10
    "Maximum number of validation volumes scored per metrics row."

    def __post_init__(self):
        if self.mixer_mode not in MIXER_MODES:
            raise ValueError(f"unknown mixer mode `{self.mixer_mode}`; expected one of {MIXER_MODES}")
        if self.pretrain_mode not in PRETRAIN_MODES:
            raise ValueError(f"unknown pretrain mode `{self.pretrain_mode}`; expected one of {PRETRAIN_MODES}")
        if self.pretrain_iters < 0 or self.selftrain_iters < 0:
            raise ValueError(
                f"iteration counts must be >= 0; got pretrain={self.pretrain_iters} selftrain={self.selftrain_iters}"
            )
        if self.batch_labeled < 2 or self.batch_labeled % 2:
            raise ValueError(f"batch_labeled must be an even number >= 2; got {self.batch_labeled}")
        if self.batch_unlabeled != self.batch_labeled:
            raise ValueError(
                f"batch_unlabeled must equal batch_labeled; got {self.batch_unlabeled} and {self.batch_labeled}"
            )
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0; got {self.checkpoint_every}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1; got {self.log_every}")
        if self.val_limit < 0:
            raise ValueError(f"val_limit must be >= 0; got {self.val_limit}")

    @property
    def pairs_per_step(self) -> int:
        return self.batch_labeled // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """
        Build a config from its JSON form. Missing keys take their defaults;
        unknown keys and values of the wrong type, at any level, are
        rejected with a DataError naming the field.
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown run config keys: {', '.join(unknown)}")
        check_field_types(cls, d, "run config")

        kwargs = {}

        try:
            for key, value in d.items():
                sub = _NESTED.get(key)
                if sub is None:
                    kwargs[key] = value
                    continue

                if not isinstance(value, dict):
                    raise DataError(f"run config key `{key}` must be an object")
                sub_known = {f.name for f in fields(sub)}
                sub_unknown = sorted(set(value) - sub_known)
                if sub_unknown:
                    raise DataError(f"unknown run config keys in `{key}`: {', '.join(sub_unknown)}")
                check_field_types(sub, value, f"run config `{key}`")
                kwargs[key] = sub(**value)

            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise DataError(f"invalid run config: {e}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise DataError(f"no such run config `{path}`")
        except json.JSONDecodeError as e:
            raise DataError(f"malformed run config `{path}`: {e}")

        if not isinstance(doc, dict):
            raise DataError(f"run config `{path}` must hold a JSON object")
        return cls.from_dict(doc)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class TrainerState(object):
    student: ModelParams
    teacher: ModelParams
    velocity: Optional[Dict[str, np.ndarray]]
    "Momentum buffers; None before the first step."

    iteration: int
    rng: np.random.Generator
    metrics: List[dict] = field(default_factory=list)


@dataclass
class Pools(object):
    """
    Training and validation arrays. Unlabeled images come without labels.
    """

    xl: np.ndarray
    "``[N, C, H, W]``"

    yl: np.ndarray
    "``[N, H, W]``"

    xu: np.ndarray
    "``[M, C, H, W]``"

    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.xl.shape[2:])


def load_pools(manifest: DatasetManifest, val_limit: Optional[int] = None) -> Pools:
    labeled, unlabeled = manifest.training_view()
    val = manifest.split("val")
    if val_limit is not None:
        val = val[:val_limit]

    return Pools(
        xl=manifest.load_images(labeled),
        yl=manifest.load_labels(labeled),
        xu=manifest.load_images(unlabeled),
        val_x=manifest.load_images(val),
        val_y=manifest.load_labels(val),
        num_classes=manifest.num_classes,
    )


def _check_pools(pools: Pools, cfg: TrainConfig, need_unlabeled: bool):
    if len(pools.xl) < 1:
        raise DataError("the labeled pool is empty")
    if need_unlabeled and (len(pools.xl) < 2 or len(pools.xu) < 2):
        raise DataError(
            f"self-training needs at least 2 labeled and 2 unlabeled samples; got {len(pools.xl)} and {len(pools.xu)}"
        )
    check_net_fits(cfg.net, pools.xl.shape[1], pools.shape, pools.num_classes)


def check_net_fits(
    net: NetConfig,
    channels: int,
    extents: Sequence[int],
    num_classes: Optional[int] = None,
    source: str = "dataset",
):
    """
    Raise DataError unless ``channels``-channel images with spatial
    ``extents``, labeled with ``num_classes`` classes when given, fit ``net``.
    """
    if num_classes is not None and num_classes != net.num_classes:
        raise DataError(f"{source} has {num_classes} classes but the network is configured for {net.num_classes}")
    if channels != net.in_channels:
        raise DataError(f"{source} images have {channels} channels but the network expects {net.in_channels}")

    div = net.divisor
    if any(d % div for d in extents):
        raise DataError(
            f"{source} image shape {tuple(extents)} is not divisible by {div} for a depth-{net.depth} network"
        )


# Sampling


def _draw_pairs(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """
    ``count`` index pairs with distinct members, ``[count, 2]``. Indices are
    distinct across the whole step when the pool is large enough.
    """
    if n < 2:
        raise ValueError(f"cannot draw distinct pairs from a pool of {n}")
    if 2 * count <= n:
        return rng.choice(n, size=2 * count, replace=False).reshape(count, 2)
    return np.stack([rng.choice(n, size=2, replace=False) for _ in range(count)])


@dataclass
class StepBatch(object):
    """
    The samples of one step: labeled pairs ``(i, j)`` and unlabeled pairs
    ``(p, q)``, each ``[P, ...]``.
    """

    xl_i: np.ndarray
    xl_j: np.ndarray
    yl_i: np.ndarray
    yl_j: np.ndarray
    xu_p: np.ndarray
    xu_q: np.ndarray


def draw_step_batch(state: TrainerState, pools: Pools, cfg: TrainConfig) -> StepBatch:
    P = cfg.pairs_per_step
    lp = _draw_pairs(state.rng, len(pools.xl), P)
    up = _draw_pairs(state.rng, len(pools.xu), P)
    return StepBatch(
        xl_i=pools.xl[lp[:, 0]],
        xl_j=pools.xl[lp[:, 1]],
        yl_i=pools.yl[lp[:, 0]],
        yl_j=pools.yl[lp[:, 1]],
        xu_p=pools.xu[up[:, 0]],
        xu_q=pools.xu[up[:, 1]],
    )


def _mask_groups(
    cfg: TrainConfig,
    shape: Tuple[int, int],
    n_pairs: int,
    rng: np.random.Generator,
) -> List[Tuple[np.ndarray, Mask]]:
    if cfg.per_pair_masks:
        return [(np.array([k]), generate_mask(cfg.mask_spec, shape, rng=rng)) for k in range(n_pairs)]
    return [(np.arange(n_pairs), generate_mask(cfg.mask_spec, shape, rng=rng))]


# Losses per mixer mode


def _probs(params: ModelParams, x: np.ndarray) -> Tensor:
    return ad.softmax_channels(forward(params, x))


def _report(l_in: Tensor, l_out: Tensor, terms: Dict[str, float]) -> LossReport:
    total = ad.add(l_in, l_out)
    return LossReport(total=total, l_in=l_in.item(), l_out=l_out.item(), l_all=total.item(), breakdown=terms)


def _average_reports(reports: List[LossReport]) -> LossReport:
    if len(reports) == 1:
        return reports[0]

    n = len(reports)
    total = reports[0].total
    for r in reports[1:]:
        total = ad.add(total, r.total)
    total = ad.scale(total, 1.0 / n)

    keys = sorted(set().union(*(r.breakdown for r in reports)))
    breakdown = {k: float(np.mean([r.breakdown[k] for r in reports if k in r.breakdown])) for k in keys}
    flags = {}
    for r in reports:
        for k, v in r.flags.items():
            flags[k] = flags.get(k, False) or v

    return LossReport(
        total=total,
        l_in=float(np.mean([r.l_in for r in reports])),
        l_out=float(np.mean([r.l_out for r in reports])),
        l_all=total.item(),
        breakdown=breakdown,
        flags=flags,
    )


def _bcp_mode_loss(student, batch, yu_p, yu_q, groups, cfg, K) -> LossReport:
    reports = []
    mode = cfg.mixer_mode

    for idx, mask in groups:
        x_in, x_out = bcp_mix_images(batch.xl_j[idx], batch.xu_p[idx], batch.xl_i[idx], batch.xu_q[idx], mask)
        y_in, y_out = bcp_mix_labels(batch.yl_j[idx], yu_p[idx], batch.yl_i[idx], yu_q[idx], mask, num_classes=K)

        q_in = _probs(student, x_in) if mode != "out_only" else None
        q_out = _probs(student, x_out) if mode != "in_only" else None
        reports.append(bcp_loss(q_in, q_out, y_in, y_out, mask, cfg.loss_cfg))

    return _average_reports(reports)


def _within_set_loss(student, batch, yu_p, yu_q, groups, cfg) -> LossReport:
    reports = []

    for idx, mask in groups:
        a = within_set_mix((batch.xl_j[idx], batch.yl_j[idx]), (batch.xl_i[idx], batch.yl_i[idx]), mask)
        b = within_set_mix((batch.xu_q[idx], yu_q[idx]), (batch.xu_p[idx], yu_p[idx]), mask)

        terms = {}
        l_in = seg_loss(_probs(student, a.image), a.target, None, cfg.loss_cfg, terms, "_in")
        l_out = seg_loss(_probs(student, b.image), b.target, None, cfg.loss_cfg, terms, "_out")
        reports.append(_report(l_in, ad.scale(l_out, cfg.loss_cfg.alpha), terms))

    return _average_reports(reports)


def _plain_loss(student, batch, yu_p, yu_q, cfg) -> LossReport:
    xl = np.concatenate([batch.xl_i, batch.xl_j])
    yl = np.concatenate([batch.yl_i, batch.yl_j])
    xu = np.concatenate([batch.xu_p, batch.xu_q])
    yu = np.concatenate([yu_p, yu_q])

    terms = {}
    l_in = seg_loss(_probs(student, xl), yl, None, cfg.loss_cfg, terms, "_in")
    l_out = seg_loss(_probs(student, xu), yu, None, cfg.loss_cfg, terms, "_out")
    return _report(l_in, ad.scale(l_out, cfg.loss_cfg.alpha), terms)


def _mixup_loss(student, batch, yu_p, yu_q, cfg, K, rng) -> LossReport:
    alpha = cfg.loss_cfg.alpha
    parts = []

    # (first image, second image, first labels, second labels, first weight, second weight)
    directions = (
        (batch.xl_j, batch.xu_p, batch.yl_j, yu_p, 1.0, alpha),
        (batch.xu_q, batch.xl_i, yu_q, batch.yl_i, alpha, 1.0),
    )

    for xa, xb, ya, yb, wa, wb in directions:
        images, targets, weights = [], [], []

        for k in range(len(xa)):
            gamma = float(rng.beta(1.0, 1.0))
            x, t = mixup_mix(xa[k], xb[k], one_hot(ya[k], K), one_hot(yb[k], K), gamma)
            images.append(x)
            targets.append(t)
            weights.append(np.full((1,) + ya[k].shape, gamma * wa + (1.0 - gamma) * wb))

        q = _probs(student, np.stack(images))
        parts.append(soft_seg_loss(q, np.stack(targets), np.stack(weights), cfg.loss_cfg))

    return _report(parts[0], parts[1], {})


def _fg_cutmix_loss(student, batch, yu_p, yu_q, cfg, rng) -> LossReport:
    alpha = cfg.loss_cfg.alpha
    labeled = list(zip(batch.xl_i, batch.yl_i)) + list(zip(batch.xl_j, batch.yl_j))
    unlabeled = list(zip(batch.xu_p, yu_p)) + list(zip(batch.xu_q, yu_q))
    members = labeled + unlabeled
    n_l = len(labeled)

    remixed, sources = fg_cutmix_mix(members, grid=FG_CUTMIX_GRID, rng=rng)

    H, W = members[0][1].shape
    tile = np.ones((H // FG_CUTMIX_GRID, W // FG_CUTMIX_GRID))
    provenance = np.where(np.arange(len(members)) < n_l, 1.0, alpha)
    weights = np.stack([np.kron(provenance[s], tile)[None] for s in sources])

    images = np.stack([m[0] for m in remixed])
    targets = np.stack([m[1] for m in remixed])

    terms = {}
    l_in = seg_loss(_probs(student, images[:n_l]), targets[:n_l], weights[:n_l], cfg.loss_cfg, terms, "_in")
    l_out = seg_loss(_probs(student, images[n_l:]), targets[n_l:], weights[n_l:], cfg.loss_cfg, terms, "_out")
    return _report(l_in, l_out, terms)


# Steps


def _gradients(params: ModelParams, loss: Tensor) -> Dict[str, np.ndarray]:
    if not loss.grad_enabled:
        return {n: np.zeros(s) for n, s in params.shapes().items()}

    ad.backward(loss)
    grads = params.grads()
    for n, s in params.shapes().items():
        if n not in grads:
            grads[n] = np.zeros(s)
    return grads


def _halt_on_nonfinite(
    what: str,
    state: TrainerState,
    cfg: TrainConfig,
    dump_path: Optional[Path],
    logger: logging.Logger,
    ads_logger: logging.Logger,
):
    if dump_path is not None:
        save_state(dump_path, state, cfg)
    msg = f"% non-finite {what} halts training @w iteration-{state.iteration} " + format_details(dump=dump_path)
    logger.error(msg)
    if ads_logger is not logger:
        ads_logger.error(msg)
    raise NumericError(f"non-finite {what} at iteration {state.iteration}", dump_path=dump_path)


def selftrain_step(
    state: TrainerState,
    batch: StepBatch,
    cfg: TrainConfig,
    num_classes: int,
    dump_path: Optional[Path] = None,
    logger: logging.Logger = default_logger,
    ads_logger: logging.Logger = default_logger,
) -> Tuple[TrainerState, LossReport]:
    """
    One Mean Teacher step. ``state`` is updated in place and returned along
    with the loss report. A non-finite loss or gradient writes the state to
    ``dump_path`` (when given) and raises NumericError.
    """
    K = num_classes
    pl_mode = mode_for_classes(K)
    shape = tuple(batch.xl_i.shape[2:])

    yu_p = make_pseudo_labels(state.teacher, batch.xu_p, pl_mode, use_lcc=cfg.use_lcc)
    yu_q = make_pseudo_labels(state.teacher, batch.xu_q, pl_mode, use_lcc=cfg.use_lcc)

    mode = cfg.mixer_mode
    groups = None
    if mode in ("bcp", "in_only", "out_only", "within_set"):
        groups = _mask_groups(cfg, shape, len(batch.xl_i), state.rng)

    student = state.student.with_grad()

    with ad.Tape():
        if mode in ("bcp", "in_only", "out_only"):
            report = _bcp_mode_loss(student, batch, yu_p, yu_q, groups, cfg, K)
        elif mode == "within_set":
            report = _within_set_loss(student, batch, yu_p, yu_q, groups, cfg)
        elif mode == "plain":
            report = _plain_loss(student, batch, yu_p, yu_q, cfg)
        elif mode == "mixup":
            report = _mixup_loss(student, batch, yu_p, yu_q, cfg, K, state.rng)
        else:
            report = _fg_cutmix_loss(student, batch, yu_p, yu_q, cfg, state.rng)

        if not report.is_finite():
            _halt_on_nonfinite("loss", state, cfg, dump_path, logger, ads_logger)

        grads = _gradients(student, report.total)

    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        _halt_on_nonfinite("gradient", state, cfg, dump_path, logger, ads_logger)

    lr = lr_at(state.iteration, cfg.optim_cfg)
    state.student, state.velocity = sgd_step(state.student, grads, state.velocity, lr, cfg.optim_cfg.momentum)
    state.teacher = ema_update(state.teacher, state.student, cfg.ema_cfg)
    state.iteration += 1
    return state, report


def _supervised_step(
    params: ModelParams,
    velocity: Optional[Dict[str, np.ndarray]],
    x: np.ndarray,
    y: np.ndarray,
    iteration: int,
    cfg: TrainConfig,
) -> Tuple[ModelParams, Dict[str, np.ndarray], float]:
    student = params.with_grad()

    with ad.Tape():
        loss = seg_loss(_probs(student, x), y, None, cfg.loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite pretraining loss at iteration {iteration}")
        grads = _gradients(student, loss)

    lr = lr_at(iteration, cfg.optim_cfg)
    new_params, velocity = sgd_step(params, grads, velocity, lr, cfg.optim_cfg.momentum)
    return new_params, velocity, value


class _Throughput(object):
    def __init__(self, what: str, logger: logging.Logger):
        self.what = what
        self.logger = logger
        self.t0 = self.last = time.time()
        self.n = 0

    def tick(self):
        self.n += 1
        now = time.time()
        if now - self.last > THROUGHPUT_INTERVAL:
            self.logger.info(f"finished {self.n} {self.what} iterations, throughput {self.n / (now - self.t0):.2f} it/s")
            self.last = now


def pretrain(
    pools: Pools,
    cfg: TrainConfig,
    history: Optional[List[float]] = None,
    logger: logging.Logger = default_logger,
    ads_logger: logging.Logger = default_logger,
) -> ModelParams:
    """
    Supervised training on the labeled pool. With ``pretrain_mode="cp"``
    every step trains on within-set copy-paste mixes of labeled pairs under
    a fresh mask; ``plain`` trains on the labeled samples directly; ``none``
    returns the random initialization. Per-iteration losses are appended to
    ``history`` if given. The completion event also goes to
    ``ads_logger``, the project logger when run from the command line.
    """
    _check_pools(pools, cfg, need_unlabeled=False)
    params = init_params(cfg.net)

    if cfg.pretrain_mode == "none" or cfg.pretrain_iters == 0:
        return params

    if len(pools.xl) < 2:
        raise DataError("pretraining needs at least 2 labeled samples")

    rng = np.random.default_rng([cfg.seed, 1])
    velocity = None
    P = cfg.pairs_per_step
    meter = _Throughput("pretraining", logger)

    for k in range(cfg.pretrain_iters):
        pairs = _draw_pairs(rng, len(pools.xl), P)

        if cfg.pretrain_mode == "cp":
            images, targets = [], []
            for i, j in pairs:
                mask = generate_mask(cfg.mask_spec, pools.shape, rng=rng)
                mixed = within_set_mix((pools.xl[j], pools.yl[j]), (pools.xl[i], pools.yl[i]), mask)
                images.append(mixed.image)
                targets.append(mixed.target)
            x, y = np.stack(images), np.stack(targets)
        else:
            idx = pairs.ravel()
            x, y = pools.xl[idx], pools.yl[idx]

        params, velocity, value = _supervised_step(params, velocity, x, y, k, cfg)
        if history is not None:
            history.append(value)

        if (k + 1) % cfg.log_every == 0:
            logger.info(
                "% pretraining progress @i "
                + f"iteration-{k + 1} "
                + format_details(loss=f"{value:.5f}", lr=lr_at(k, cfg.optim_cfg))
            )
        meter.tick()

    ads_logger.info(
        "% pretraining done @i " + format_details(iters=cfg.pretrain_iters, mode=cfg.pretrain_mode, seed=cfg.seed)
    )
    return params


# Prediction and validation


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """
    Label maps for images ``[B, C, H, W]`` (or a single ``[C, H, W]``):
    forward, softmax, argmax with ties going to the lowest class index.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]

    with ad.no_grad():
        prob = ad.softmax_channels(forward(params, x)).values

    labels = np.argmax(prob, axis=1).astype(np.int64)
    return labels[0] if single else labels


def validation_dice(params: ModelParams, images: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    if not len(images):
        return math.nan
    preds = predict(params, images)
    return float(np.mean([mean_foreground_dice(p, g, num_classes) for p, g in zip(preds, labels)]))


# State persistence


def save_state(path: Union[str, Path], state: TrainerState, cfg: TrainConfig):
    """
    Write the full trainer state in float64 so that resumption is bit-exact.
    """
    groups = {"student": state.student, "teacher": state.teacher}
    if state.velocity is not None:
        groups["velocity"] = state.velocity

    extra = {
        "rng": state.rng.bit_generator.state,
        "train_config": cfg.to_dict(),
        "metrics": state.metrics,
    }
    save_checkpoint(path, groups, cfg.net, iteration=state.iteration, extra=extra, dtype="f8")


def load_state(path: Union[str, Path]) -> Tuple[TrainerState, TrainConfig]:
    ckpt = load_checkpoint(path)

    for key in ("rng", "train_config"):
        if key not in ckpt.extra:
            raise DataError(f"`{path}` is a model checkpoint, not a trainer state (no `{key}`)")

    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.extra["rng"]
    velocity = ckpt.groups["velocity"].arrays() if "velocity" in ckpt.groups else None

    state = TrainerState(
        student=ckpt.params("student"),
        teacher=ckpt.params("teacher"),
        velocity=velocity,
        iteration=ckpt.iteration,
        rng=rng,
        metrics=list(ckpt.extra.get("metrics", [])),
    )
    return state, TrainConfig.from_dict(ckpt.extra["train_config"])


def _format_metric(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics_csv(path: Union[str, Path], rows: Sequence[dict]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in rows:
        w.writerow([_format_metric(row[k]) for k in METRICS_HEADER])
    atomic_write_text(path, buf.getvalue())


# The full pipeline


def _metrics_row(state: TrainerState, report: LossReport, pools: Pools, cfg: TrainConfig) -> dict:
    return {
        "iter": state.iteration,
        "lr": lr_at(max(state.iteration - 1, 0), cfg.optim_cfg),
        "l_in": report.l_in,
        "l_out": report.l_out,
        "l_all": report.l_all,
        "val_dice": validation_dice(state.student, pools.val_x, pools.val_y, pools.num_classes),
    }


def train(
    pools: Pools,
    cfg: TrainConfig,
    run_dir: Union[str, Path],
    init: Optional[ModelParams] = None,
    resume: Optional[Union[str, Path]] = None,
    logger: logging.Logger = default_logger,
    ads_logger: logging.Logger = default_logger,
) -> TrainerState:
    """
    Pretrain (unless ``init`` is given), copy the student into the teacher,
    then self-train for ``cfg.selftrain_iters`` iterations. Writes
    ``metrics.csv``, ``final.ckpt`` (student and teacher, float32) and
    ``state.ckpt`` (full state, float64) into ``run_dir``. With ``resume``,
    continues from a saved trainer state instead.
    """
    run_dir = Path(run_dir)
    _check_pools(pools, cfg, need_unlabeled=True)

    if resume is not None:
        state, saved_cfg = load_state(resume)
        if saved_cfg.net != cfg.net:
            raise DataError(f"cannot resume `{resume}`: its network configuration differs from this run's")
        ads_logger.info("% resuming run @i " + f"{run_dir} " + format_details(iteration=state.iteration))
    else:
        student = init if init is not None else pretrain(pools, cfg, logger=logger, ads_logger=ads_logger)
        student.check_compatible(init_params(cfg.net), "train init")
        state = TrainerState(
            student=student.copy(),
            teacher=student.copy(),
            velocity=None,
            iteration=0,
            rng=np.random.default_rng([cfg.seed, 2]),
        )
        save_checkpoint(run_dir / "pretrained.ckpt", {"student": student}, cfg.net)

    dump_path = run_dir / "nan_state.ckpt"
    meter = _Throughput("self-training", logger)
    report = None

    while state.iteration < cfg.selftrain_iters:
        batch = draw_step_batch(state, pools, cfg)
        state, report = selftrain_step(
            state, batch, cfg, pools.num_classes, dump_path=dump_path, logger=logger, ads_logger=ads_logger
        )
        meter.tick()

        if state.iteration % cfg.log_every == 0 or state.iteration == cfg.selftrain_iters:
            row = _metrics_row(state, report, pools, cfg)
            state.metrics.append(row)
            logger.info(
                "% metrics row @i "
                + f"{run_dir.name} "
                + format_details(**{k: _format_metric(v) for k, v in row.items()})
            )
            write_metrics_csv(run_dir / "metrics.csv", state.metrics)

        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_state(run_dir / f"state-{state.iteration:06d}.ckpt", state, cfg)

    write_metrics_csv(run_dir / "metrics.csv", state.metrics)
    save_checkpoint(
        run_dir / "final.ckpt",
        {"student": state.student, "teacher": state.teacher},
        cfg.net,
        iteration=state.iteration,
    )
    save_state(run_dir / "state.ckpt", state, cfg)

    last = state.metrics[-1]["val_dice"] if state.metrics else math.nan
    ads_logger.info(
        "% self-training done @i "
        + f"{run_dir} "
        + format_details(iteration=state.iteration, mixer=cfg.mixer_mode, val_dice=_format_metric(last))
    )
    return state
