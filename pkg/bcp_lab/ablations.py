"""
Named ablation arms. Each arm is a set of overrides applied to a base run
configuration, so one training harness serves every comparison.

Mask-strategy arms keep the zero-region area of the default zero-centered
mask (β = 2/3, i.e. 4/9 of a 2D image): 27 random squares of side 1/8, or a
contact slab 4/9 deep.

The summaries at the end of the module back the scripts in `diagnostics/`.
"""

from dataclasses import dataclass, field, replace
import math
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from .evalkit import MetricRow, read_eval_csv
from .plots import read_metrics_csv
from .segnet import load_checkpoint
from .trainer import TrainConfig
from .utils import DataError

__all__ = [
    "ARMS",
    "Arm",
    "ArmSummary",
    "CheckpointInfo",
    "RunSummary",
    "apply_arm",
    "arm_names",
    "compare_evals",
    "compare_sweeps",
    "get_arm",
    "summarize_run",
    "summarize_sweep",
]

RANDOM_CUBE_BETA = 1.0 / 8
CONTACT_BETA = 4.0 / 9


@dataclass(frozen=True)
class Arm(object):
    name: str
    group: str
    "Which comparison this arm belongs to."

    description: str
    overrides: Dict[str, object] = field(default_factory=dict)
    "Top-level TrainConfig fields, or ``section.field`` for nested ones."

    supervised: bool = False
    "Labeled-only baseline: pretraining alone, no self-training."


def _arm(name, group, description, supervised=False, **overrides) -> Arm:
    return Arm(name=name, group=group, description=description, overrides=overrides, supervised=supervised)


_ARMS: List[Arm] = [
    _arm("bcp", "directions", "bidirectional copy-paste (default)"),
    _arm("cp-in", "directions", "inward only: unlabeled crop on labeled background", mixer_mode="in_only"),
    _arm("cp-out", "directions", "outward only: labeled crop on unlabeled background", mixer_mode="out_only"),
    _arm("cp-within", "directions", "copy-paste within the labeled and within the unlabeled pool", mixer_mode="within_set"),
    _arm("mixup", "interpolation", "whole-image mixup of labeled and unlabeled images", mixer_mode="mixup"),
    _arm("fg-cutmix", "interpolation", "4×4 tile reassembly across the batch", mixer_mode="fg_cutmix"),
    _arm(
        "mask-random",
        "masking",
        "27 randomly placed zero squares",
        **{"mask_spec.strategy": "random_cubes", "mask_spec.beta": RANDOM_CUBE_BETA, "mask_spec.n_cubes": 27},
    ),
    _arm(
        "mask-contact",
        "masking",
        "zero slab against one image edge",
        **{"mask_spec.strategy": "contact", "mask_spec.beta": CONTACT_BETA},
    ),
    _arm("mask-zero-centered", "masking", "central zero block (default)", **{"mask_spec.strategy": "zero_centered"}),
    _arm("init-random", "initialization", "teacher and student start from random weights", pretrain_mode="none"),
    _arm("init-plain", "initialization", "pretrained on labeled data without copy-paste", pretrain_mode="plain"),
    _arm("init-cp", "initialization", "pretrained on labeled data with copy-paste (default)", pretrain_mode="cp"),
    _arm("combo-none", "components", "mean teacher self-training with no component", mixer_mode="plain", use_lcc=False, pretrain_mode="none"),
    _arm("combo-bcp", "components", "BCP only", mixer_mode="bcp", use_lcc=False, pretrain_mode="none"),
    _arm("combo-bcp-nms", "components", "BCP with pseudo-label post-processing", mixer_mode="bcp", use_lcc=True, pretrain_mode="none"),
    _arm("combo-full", "components", "BCP, post-processing and copy-paste pretraining", mixer_mode="bcp", use_lcc=True, pretrain_mode="cp"),
    _arm("alpha-0.5", "alpha", "pseudo-label weight 0.5 (default)", **{"loss_cfg.alpha": 0.5}),
    _arm("alpha-1.5", "alpha", "pseudo-label weight 1.5", **{"loss_cfg.alpha": 1.5}),
    _arm("alpha-2.5", "alpha", "pseudo-label weight 2.5", **{"loss_cfg.alpha": 2.5}),
    _arm("beta-0.33", "beta", "zero region 1/3 of each extent", **{"mask_spec.beta": 1.0 / 3}),
    _arm("beta-0.5", "beta", "zero region 1/2 of each extent", **{"mask_spec.beta": 1.0 / 2}),
    _arm("beta-0.67", "beta", "zero region 2/3 of each extent (default)", **{"mask_spec.beta": 2.0 / 3}),
    _arm("beta-0.83", "beta", "zero region 5/6 of each extent", **{"mask_spec.beta": 5.0 / 6}),
    _arm("supervised", "baseline", "labeled data only", supervised=True, selftrain_iters=0),
]

ARMS: Dict[str, Arm] = {a.name: a for a in _ARMS}


def arm_names() -> List[str]:
    return [a.name for a in _ARMS]


def get_arm(name: str) -> Arm:
    try:
        return ARMS[name]
    except KeyError:
        raise ValueError(f"unknown ablation arm `{name}`; see `ablate --list`")


def apply_arm(arm: Arm, base: TrainConfig) -> TrainConfig:
    top = {}
    nested: Dict[str, Dict[str, object]] = {}

    for key, value in arm.overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = value
        else:
            top[key] = value

    for section, values in nested.items():
        top[section] = replace(getattr(base, section), **values)

    return replace(base, **top)


# Sweep summaries


@dataclass
class ArmSummary(object):
    arm: str
    n_runs: int
    dice: float
    jaccard: float
    hd95: float
    asd: float
    "Means over every (volume, class) row of every run; ``nan`` rows are skipped."


def _nanmean(values: List[float]) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def summarize_sweep(root: Union[str, Path]) -> Dict[str, ArmSummary]:
    """
    Aggregate every ``eval.csv`` below ``root``. A run's arm is the name of
    the directory holding its ``eval.csv``, so both ``root/ARM/eval.csv``
    and ``root/seed-N/ARM/eval.csv`` layouts work.
    """
    root = Path(root)
    by_arm: Dict[str, list] = {}

    for path in sorted(root.glob("**/eval.csv")):
        by_arm.setdefault(path.parent.name, []).append(read_eval_csv(path))

    if not by_arm:
        raise DataError(f"no eval.csv files below `{root}`")

    result = {}
    for arm, runs in sorted(by_arm.items()):
        rows = [r for run in runs for r in run]
        result[arm] = ArmSummary(
            arm=arm,
            n_runs=len(runs),
            dice=_nanmean([r.dice for r in rows]),
            jaccard=_nanmean([r.jaccard for r in rows]),
            hd95=_nanmean([r.hd95 for r in rows]),
            asd=_nanmean([r.asd for r in rows]),
        )
    return result


def compare_sweeps(a: Dict[str, ArmSummary], b: Dict[str, ArmSummary]) -> List[str]:
    """
    One line per arm present in both sweeps: mean Dice in each and the
    change from ``a`` to ``b``. Arms present in only one sweep are listed
    last.
    """
    lines = []
    for arm in sorted(set(a) & set(b)):
        da, db = a[arm].dice, b[arm].dice
        lines.append(f"{arm:20} {da:.4f} -> {db:.4f}  ({db - da:+.4f})")

    for arm in sorted(set(a) ^ set(b)):
        side = "A" if arm in a else "B"
        lines.append(f"{arm:20} only in {side}")
    return lines


# Run summaries and evaluation comparisons


@dataclass
class CheckpointInfo(object):
    name: str
    iteration: int
    dtype: str
    groups: List[str]


@dataclass
class RunSummary(object):
    run_dir: Path
    n_rows: int
    "Number of metrics rows."

    final_iter: int
    final_losses: Dict[str, float]
    "``l_in``, ``l_out`` and ``l_all`` of the last metrics row."

    best_val_dice: float
    best_iter: int
    "Iteration of the best validation Dice; -1 if every row is ``nan``."

    checkpoints: List[CheckpointInfo]

    def lines(self) -> List[str]:
        losses = " ".join(f"{k}={v:.5f}" for k, v in self.final_losses.items())
        out = [
            f"run:            {self.run_dir}",
            f"metrics rows:   {self.n_rows}",
            f"final losses:   iter={self.final_iter} {losses}",
            f"best val dice:  {self.best_val_dice:.4f} at iter {self.best_iter}",
            f"checkpoints:    {len(self.checkpoints)}",
        ]
        for c in self.checkpoints:
            out.append(f"  {c.name:24} iter={c.iteration:<7d} dtype={c.dtype} groups={','.join(c.groups)}")
        return out


def summarize_run(run_dir: Union[str, Path]) -> RunSummary:
    """
    Final losses and best validation Dice from a run's ``metrics.csv``, plus
    an inventory of the checkpoints in the run directory.
    """
    run_dir = Path(run_dir)
    cols = read_metrics_csv(run_dir / "metrics.csv")

    dice = np.array(cols["val_dice"])
    if np.isnan(dice).all():
        best, best_iter = math.nan, -1
    else:
        k = int(np.nanargmax(dice))
        best, best_iter = float(dice[k]), int(cols["iter"][k])

    checkpoints = []
    for path in sorted(run_dir.glob("*.ckpt")):
        ckpt = load_checkpoint(path)
        checkpoints.append(CheckpointInfo(path.name, ckpt.iteration, ckpt.dtype, sorted(ckpt.groups)))

    return RunSummary(
        run_dir=run_dir,
        n_rows=len(dice),
        final_iter=int(cols["iter"][-1]),
        final_losses={k: cols[k][-1] for k in ("l_in", "l_out", "l_all")},
        best_val_dice=best,
        best_iter=best_iter,
        checkpoints=checkpoints,
    )


def compare_evals(a: List[MetricRow], b: List[MetricRow], tol: float = 1e-4) -> List[str]:
    """
    Compare two evaluations of the same split: per-class mean metrics in
    ``a`` and ``b``, then every (volume, class) whose Dice moved by more than
    ``tol``, regressions first and largest change first within each kind.
    Rows present in only one evaluation are listed last.
    """
    lines = []
    classes = sorted({r.cls for r in a} | {r.cls for r in b})

    for c in classes:
        ra = [r for r in a if r.cls == c]
        rb = [r for r in b if r.cls == c]
        parts = []
        for name, fmt in (("dice", ".4f"), ("jaccard", ".4f"), ("hd95", ".2f"), ("asd", ".2f")):
            va = _nanmean([getattr(r, name) for r in ra])
            vb = _nanmean([getattr(r, name) for r in rb])
            parts.append(f"{name} {va:{fmt}} -> {vb:{fmt}}")
        lines.append(f"class {c}: " + "  ".join(parts))

    by_key_a = {(r.volume_id, r.cls): r for r in a}
    by_key_b = {(r.volume_id, r.cls): r for r in b}
    moved = []

    for key in sorted(set(by_key_a) & set(by_key_b)):
        da, db = by_key_a[key].dice, by_key_b[key].dice
        if math.isnan(da) or math.isnan(db) or abs(db - da) <= tol:
            continue
        moved.append((db - da, key, da, db))

    regressions = sorted((m for m in moved if m[0] < 0), key=lambda m: m[0])
    fixes = sorted((m for m in moved if m[0] > 0), key=lambda m: -m[0])

    for kind, group in (("regressed", regressions), ("improved", fixes)):
        for delta, (vid, c), da, db in group:
            lines.append(f"  {kind:9} {vid} class {c}: {da:.4f} -> {db:.4f} ({delta:+.4f})")

    for key in sorted(set(by_key_a) ^ set(by_key_b)):
        side = "A" if key in by_key_a else "B"
        lines.append(f"  {key[0]} class {key[1]}: only in {side}")

    return lines
