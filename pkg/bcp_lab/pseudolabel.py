"""
Teacher-side pseudo-labels: probabilities → initial label map (threshold or
argmax) → largest-connected-component filtering.
"""

import logging
from typing import Union

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .segnet import ModelParams, forward

__all__ = [
    "MODES",
    "largest_connected_component",
    "make_pseudo_labels",
    "mode_for_classes",
    "prob_to_label",
]

default_logger = logging.getLogger(__name__)

MODES = ("binary", "multiclass")

NORMALIZATION_TOLERANCE = 1e-6
FOREGROUND_THRESHOLD = 0.5
CONNECTIVITY = 1
"Face connectivity: 4-neighborhood in 2D, 6-neighborhood in 3D."


def mode_for_classes(num_classes: int) -> str:
    return "binary" if num_classes == 2 else "multiclass"


def prob_to_label(prob: np.ndarray, mode: str) -> np.ndarray:
    """
    Turn a ``[K, ...]`` probability map into an integer label map.

    ``binary`` (K = 2): foreground iff p(fg) > 0.5, strictly.
    ``multiclass``: argmax over classes, ties going to the lowest class index.
    """
    prob = np.asarray(prob, dtype=np.float64)

    if mode not in MODES:
        raise ValueError(f"unknown pseudo-label mode `{mode}`; expected one of {MODES}")

    deviation = np.abs(prob.sum(axis=0) - 1.0)
    if deviation.size and deviation.max() > NORMALIZATION_TOLERANCE:
        raise ValueError(
            f"probabilities are not normalized: per-voxel sums deviate from 1 by up to {deviation.max():.3g}"
        )

    if mode == "binary":
        if prob.shape[0] != 2:
            raise ValueError(f"binary mode needs exactly 2 classes; got {prob.shape[0]}")
        return (prob[1] > FOREGROUND_THRESHOLD).astype(np.int64)

    return np.argmax(prob, axis=0).astype(np.int64)


def largest_connected_component(label: np.ndarray) -> np.ndarray:
    """
    For each non-background class independently, keep only its largest
    face-connected component; everything else of that class becomes
    background.

    Ties between equal-size components go to the one whose first voxel in
    row-major scan order comes first.
    """
    label = np.asarray(label)
    out = np.zeros_like(label)
    structure = ndimage.generate_binary_structure(label.ndim, CONNECTIVITY)

    for c in np.unique(label):
        if c == 0:
            continue

        components, n = ndimage.label(label == c, structure=structure)
        if n == 0:
            continue

        # scipy numbers components in scan order of their first voxel, and
        # argmax returns the first maximum.
        sizes = np.bincount(components.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        out[components == keep] = c

    return out


def make_pseudo_labels(
    teacher: ModelParams,
    x_u: Union[np.ndarray, ad.Tensor],
    mode: str,
    use_lcc: bool = True,
) -> np.ndarray:
    """
    Pseudo-labels ``[B, H, W]`` for unlabeled images ``[B, C, H, W]``: teacher
    forward pass (never recorded), softmax, thresholding or argmax, then
    optionally largest-connected-component filtering.
    """
    with ad.no_grad():
        prob = ad.softmax_channels(forward(teacher, x_u)).values

    labels = []

    for b in range(prob.shape[0]):
        y = prob_to_label(prob[b], mode)
        if use_lcc:
            y = largest_connected_component(y)
        labels.append(y)

    return np.stack(labels)
