"""
Copy-paste mixing of images and supervisory signals.

Images are float arrays whose trailing dimensions match the mask's spatial
shape (leading batch/channel axes are allowed); label maps are integer arrays
of exactly the mask's shape, or batched with one leading axis. Selection is
done with ``np.where`` so every output voxel is a bit-exact copy of one source
voxel. Mixup is the one exception, producing blended images and soft targets.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .maskgen import Mask

__all__ = [
    "MixedSample",
    "bcp_mix_images",
    "bcp_mix_labels",
    "fg_cutmix_mix",
    "mixup_mix",
    "one_hot",
    "select",
    "within_set_mix",
]


@dataclass
class MixedSample(object):
    image: np.ndarray
    target: np.ndarray
    mask: Mask
    direction: str
    """
    ``in``: the zero (crop) region came from unlabeled data; ``out``: it came
    from labeled data; ``within``: both sources are from the same pool.
    """


def _check_trailing(arr: np.ndarray, mask: Mask, what: str):
    nd = len(mask.shape)
    if arr.ndim < nd or tuple(arr.shape[-nd:]) != mask.shape:
        raise ValueError(f"{what} shape {arr.shape} does not end with mask shape {mask.shape}")


def select(background: np.ndarray, foreground: np.ndarray, mask: Mask) -> np.ndarray:
    """
    ``background ⊙ M + foreground ⊙ (1 − M)`` by voxelwise selection.
    """
    background = np.asarray(background)
    foreground = np.asarray(foreground)

    if background.shape != foreground.shape:
        raise ValueError(f"cannot mix arrays of shapes {background.shape} and {foreground.shape}")
    _check_trailing(background, mask, "mixed array")

    return np.where(mask.bits.astype(bool), background, foreground)


def bcp_mix_images(
    xl_j: np.ndarray,
    xu_p: np.ndarray,
    xl_i: np.ndarray,
    xu_q: np.ndarray,
    mask: Mask,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bidirectional copy-paste of images::

        x_in  = xl_j ⊙ M + xu_p ⊙ (1 − M)
        x_out = xu_q ⊙ M + xl_i ⊙ (1 − M)
    """
    return select(xl_j, xu_p, mask), select(xu_q, xl_i, mask)


def _check_classes(y: np.ndarray, num_classes: Optional[int], what: str):
    if num_classes is None or not y.size:
        return
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"{what} holds class ids outside [0, {num_classes}); max is {int(y.max())}")


def bcp_mix_labels(
    yl_j: np.ndarray,
    yu_p: np.ndarray,
    yl_i: np.ndarray,
    yu_q: np.ndarray,
    mask: Mask,
    num_classes: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bidirectional copy-paste of supervisory signals, with ``yu_p``/``yu_q`` the
    post-processed pseudo-labels::

        y_in  = yl_j ⊙ M + ỹu_p ⊙ (1 − M)
        y_out = ỹu_q ⊙ M + yl_i ⊙ (1 − M)
    """
    for y, what in ((yl_j, "yl_j"), (yu_p, "yu_p"), (yl_i, "yl_i"), (yu_q, "yu_q")):
        _check_classes(np.asarray(y), num_classes, what)
    return select(yl_j, yu_p, mask), select(yu_q, yl_i, mask)


def within_set_mix(
    a1: Tuple[np.ndarray, np.ndarray],
    a2: Tuple[np.ndarray, np.ndarray],
    mask: Mask,
) -> MixedSample:
    """
    Copy-paste between two samples of the same pool:
    ``a1 ⊙ M + a2 ⊙ (1 − M)`` on both image and target.
    """
    image = select(a1[0], a2[0], mask)
    target = select(a1[1], a2[1], mask)
    return MixedSample(image=image, target=target, mask=mask, direction="within")


def one_hot(y: np.ndarray, num_classes: int, axis: int = 0) -> np.ndarray:
    """
    Float one-hot encoding of an integer map, with the class axis inserted at
    ``axis``.
    """
    y = np.asarray(y)
    _check_classes(y, num_classes, "label map")
    oh = (np.arange(num_classes).reshape((num_classes,) + (1,) * y.ndim) == y[None]).astype(np.float64)
    return np.moveaxis(oh, 0, axis)


def mixup_mix(
    x1: np.ndarray,
    x2: np.ndarray,
    y1: np.ndarray,
    y2: np.ndarray,
    gamma: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Blend two images and their per-class (one-hot or soft) target maps:
    ``γ·a + (1 − γ)·b``. Endpoints return the inputs exactly.
    """
    if not 0 <= gamma <= 1:
        raise ValueError(f"mixup gamma must lie in [0, 1]; got {gamma}")

    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)

    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError(f"mixup inputs disagree in shape: {x1.shape}/{x2.shape}, {y1.shape}/{y2.shape}")

    if gamma == 1:
        return x1.copy(), y1.copy()
    if gamma == 0:
        return x2.copy(), y2.copy()

    return gamma * x1 + (1 - gamma) * x2, gamma * y1 + (1 - gamma) * y2


def fg_cutmix_mix(
    batch: Sequence[Tuple[np.ndarray, np.ndarray]],
    grid: int = 4,
    seed: Optional[int] = 0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """
    Fine-grained CutMix: cut every image of the batch into a ``grid × grid``
    tiling and reassemble each output tile from the same tile position of a
    uniformly chosen batch member. Image and target tiles move together.

    Returns the remixed batch and the tile source map, an integer array of
    shape ``[len(batch), grid, grid]`` naming the batch member each output
    tile was taken from.
    """
    if not batch:
        raise ValueError("fg_cutmix_mix needs a non-empty batch")

    H, W = batch[0][1].shape[-2:]
    if H % grid or W % grid:
        raise ValueError(f"spatial extents {(H, W)} are not divisible by the {grid}×{grid} grid")

    for image, target in batch:
        if image.shape[-2:] != (H, W) or target.shape[-2:] != (H, W):
            raise ValueError(
                f"batch members disagree in spatial shape: {image.shape}, {target.shape} vs {(H, W)}"
            )

    n = len(batch)
    th, tw = H // grid, W // grid

    if n == 1:
        sources = np.zeros((1, grid, grid), dtype=np.int64)
    else:
        if rng is None:
            rng = np.random.default_rng(seed)
        sources = rng.integers(0, n, size=(n, grid, grid))

    out = []

    for k in range(n):
        image = np.array(batch[k][0], copy=True)
        target = np.array(batch[k][1], copy=True)

        for r in range(grid):
            for c in range(grid):
                src = sources[k, r, c]
                rows = slice(r * th, (r + 1) * th)
                cols = slice(c * tw, (c + 1) * tw)
                image[..., rows, cols] = batch[src][0][..., rows, cols]
                target[..., rows, cols] = batch[src][1][..., rows, cols]

        out.append((image, target))

    return out, sources
