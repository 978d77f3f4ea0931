"""
Standalone SVG charts: training curves from a metrics CSV, and labeled vs.
unlabeled feature densities.
"""

import csv
import io
import math
from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

from .evalkit import KdeCurve  # noqa: E402
from .utils import DataError, atomic_write_text  # noqa: E402

__all__ = ["plot_kde", "plot_metrics", "read_metrics_csv"]

LOSS_COLUMNS = ("l_in", "l_out", "l_all")


def read_metrics_csv(path: Union[str, Path]) -> Dict[str, List[float]]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"no such metrics file `{path}`")

    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise DataError(f"metrics file `{path}` has no rows")

    missing = [c for c in ("iter", "val_dice") + LOSS_COLUMNS if c not in rows[0]]
    if missing:
        raise DataError(f"metrics file `{path}` is missing columns: {', '.join(missing)}")

    cols = {k: [] for k in rows[0]}
    for row in rows:
        for k, v in row.items():
            try:
                cols[k].append(float(v))
            except ValueError:
                raise DataError(f"metrics file `{path}` has a non-numeric `{k}` value `{v}`")
    return cols


def _save_svg(fig: Figure, out: Union[str, Path]):
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    atomic_write_text(out, buf.getvalue())


def plot_metrics(metrics_csv: Union[str, Path], out: Union[str, Path], title: str = ""):
    """
    Loss terms on the left axis and validation Dice on the right, against
    iteration.
    """
    cols = read_metrics_csv(metrics_csv)
    it = cols["iter"]

    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot(1, 1, 1)

    for name in LOSS_COLUMNS:
        ax.plot(it, cols[name], label=name)

    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")

    if not all(math.isnan(v) for v in cols["val_dice"]):
        ax2 = ax.twinx()
        ax2.plot(it, cols["val_dice"], color="black", linestyle="--", label="val_dice")
        ax2.set_ylabel("validation Dice")
        ax2.set_ylim(0, 1)
        ax2.legend(loc="lower right")

    ax.legend(loc="upper right")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, out)


def plot_kde(curves: Dict[str, KdeCurve], out: Union[str, Path], title: str = ""):
    """
    One density curve per named sample set, e.g. ``{"labeled": ...,
    "unlabeled": ...}``.
    """
    if not curves:
        raise ValueError("plot_kde needs at least one curve")

    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(1, 1, 1)

    for name, curve in curves.items():
        ax.plot(curve.grid, curve.density, label=f"{name} (h={curve.bandwidth:.3g})")
        ax.fill_between(curve.grid, curve.density, alpha=0.2)

    ax.set_xlabel("feature value")
    ax.set_ylabel("density")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, out)
