"""
Binary mix masks. A voxel is 0 where the pasted crop (foreground) goes and 1
where the background image is kept.

Three placement strategies are supported: a single zero block in the center
(the default), many small randomly placed zero blocks, and a zero slab flush
against one face of the volume.
"""

from dataclasses import dataclass
import math
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Mask",
    "MaskSpec",
    "STRATEGIES",
    "gen_contact",
    "gen_random_cubes",
    "gen_zero_centered",
    "generate_mask",
    "zero_fraction",
]

STRATEGIES = ("zero_centered", "random_cubes", "contact")


def _scaled_extent(beta: float, d: int) -> int:
    # ⌊β·d⌋, robust to β values like 1/3 that aren't exact in binary.
    return int(math.floor(beta * d + 1e-9))


def _check_beta(beta: float):
    if not 0 < beta < 1:
        raise ValueError(f"beta must lie in (0, 1); got {beta}")


@dataclass(frozen=True)
class MaskSpec(object):
    strategy: str = "zero_centered"
    beta: float = 2.0 / 3.0
    "Zero-region extent as a fraction of each dimension (per cube for random_cubes)."

    n_cubes: int = 27
    axis: int = 0
    "Slab axis for the contact strategy."

    side: str = "low"
    "Which face of ``axis`` the contact slab touches: ``low`` or ``high``."

    random_offset: bool = False
    "Place the zero_centered block uniformly at random instead of centered."

    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown mask strategy `{self.strategy}`; expected one of {STRATEGIES}")
        _check_beta(self.beta)
        if self.n_cubes < 1:
            raise ValueError(f"n_cubes must be >= 1; got {self.n_cubes}")
        if self.side not in ("low", "high"):
            raise ValueError(f"contact side must be `low` or `high`; got `{self.side}`")


class Mask(object):
    """
    An immutable {0,1} volume, 2D or 3D.
    """

    def __init__(self, bits: np.ndarray):
        bits = np.array(bits, dtype=np.uint8)
        if bits.size and bits.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        bits.flags.writeable = False
        self._bits = bits

    @classmethod
    def ones(cls, shape: Sequence[int]) -> "Mask":
        return cls(np.ones(tuple(shape), dtype=np.uint8))

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Mask":
        return cls(np.zeros(tuple(shape), dtype=np.uint8))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._bits.shape

    @property
    def zero_count(self) -> int:
        return int(self._bits.size - np.count_nonzero(self._bits))

    def zero_bbox(self) -> Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """
        The (inclusive min corner, exclusive max corner) of the zero region, or
        None if the mask has no zeros.
        """
        coords = np.argwhere(self._bits == 0)
        if not len(coords):
            return None
        return tuple(int(v) for v in coords.min(axis=0)), tuple(int(v) + 1 for v in coords.max(axis=0))

    def complement(self) -> np.ndarray:
        "1 − M, as float64."
        return 1.0 - self._bits.astype(np.float64)

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self._bits, other._bits)

    def __repr__(self):
        return f"Mask(shape={self.shape}, zeros={self.zero_count})"


def gen_zero_centered(
    shape: Sequence[int],
    beta: float,
    rng: Optional[np.random.Generator] = None,
) -> Mask:
    """
    One zero block of extent ⌊β·d⌋ along every dimension d, at offset
    ⌊(d − ⌊β·d⌋)/2⌋. If ``rng`` is given the offset is drawn uniformly instead.
    """
    _check_beta(beta)
    shape = tuple(int(d) for d in shape)
    bits = np.ones(shape, dtype=np.uint8)
    region = []

    for d in shape:
        ext = _scaled_extent(beta, d)
        if ext < 1:
            raise ValueError(f"beta={beta} gives an empty zero block along a dimension of extent {d}")

        if rng is None:
            start = (d - ext) // 2
        else:
            start = int(rng.integers(0, d - ext + 1))
        region.append(slice(start, start + ext))

    bits[tuple(region)] = 0
    return Mask(bits)


def gen_random_cubes(
    shape: Sequence[int],
    beta: float,
    n_cubes: int = 27,
    seed: Optional[int] = 0,
    rng: Optional[np.random.Generator] = None,
) -> Mask:
    """
    ``n_cubes`` zero blocks of extent ⌊β·d⌋, each placed uniformly at random;
    overlaps are allowed. ``rng`` takes precedence over ``seed``.
    """
    _check_beta(beta)
    if n_cubes < 1:
        raise ValueError(f"n_cubes must be >= 1; got {n_cubes}")

    shape = tuple(int(d) for d in shape)
    extents = [_scaled_extent(beta, d) for d in shape]

    if any(e < 1 for e in extents):
        raise ValueError(f"beta={beta} gives empty cubes for volume shape {shape}")
    if any(e > d for e, d in zip(extents, shape)):
        raise ValueError(f"cube extents {tuple(extents)} do not fit in volume shape {shape}")

    if rng is None:
        rng = np.random.default_rng(seed)

    bits = np.ones(shape, dtype=np.uint8)

    for _ in range(n_cubes):
        region = []
        for d, ext in zip(shape, extents):
            start = int(rng.integers(0, d - ext + 1))
            region.append(slice(start, start + ext))
        bits[tuple(region)] = 0

    return Mask(bits)


def gen_contact(shape: Sequence[int], beta: float, axis: int = 0, side: str = "low") -> Mask:
    """
    A zero slab of extent ⌊β·d_axis⌋ along ``axis`` and full extent elsewhere,
    flush against the ``side`` face.
    """
    _check_beta(beta)
    shape = tuple(int(d) for d in shape)

    if not 0 <= axis < len(shape):
        raise ValueError(f"contact axis {axis} is invalid for a {len(shape)}-D shape {shape}")
    if side not in ("low", "high"):
        raise ValueError(f"contact side must be `low` or `high`; got `{side}`")

    d = shape[axis]
    ext = _scaled_extent(beta, d)
    if ext < 1:
        raise ValueError(f"beta={beta} gives an empty slab along an axis of extent {d}")

    bits = np.ones(shape, dtype=np.uint8)
    region = [slice(None)] * len(shape)
    region[axis] = slice(0, ext) if side == "low" else slice(d - ext, d)
    bits[tuple(region)] = 0
    return Mask(bits)


def generate_mask(spec: MaskSpec, shape: Sequence[int], rng: Optional[np.random.Generator] = None) -> Mask:
    """
    Build a mask per ``spec``. Random strategies draw from ``rng`` when given,
    otherwise from a generator seeded with ``spec.seed``.
    """
    if spec.strategy == "zero_centered":
        if spec.random_offset:
            return gen_zero_centered(shape, spec.beta, rng=rng or np.random.default_rng(spec.seed))
        return gen_zero_centered(shape, spec.beta)

    if spec.strategy == "random_cubes":
        return gen_random_cubes(shape, spec.beta, spec.n_cubes, seed=spec.seed, rng=rng)

    return gen_contact(shape, spec.beta, axis=spec.axis, side=spec.side)


def zero_fraction(mask: Mask) -> float:
    return mask.zero_count / mask.bits.size
