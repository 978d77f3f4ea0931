from fractions import Fraction
import math

import numpy as np
import pytest

from bcp_lab.maskgen import (
    Mask,
    MaskSpec,
    gen_contact,
    gen_random_cubes,
    gen_zero_centered,
    generate_mask,
    zero_fraction,
)

SWEEP = [Fraction(1, 3), Fraction(1, 2), Fraction(2, 3), Fraction(5, 6)]


def _floor(beta: Fraction, d: int) -> int:
    return math.floor(beta * d)


def _extents(mask):
    lo, hi = mask.zero_bbox()
    return tuple(h - l for l, h in zip(lo, hi))


def test_zero_centered_3d_block():
    mask = gen_zero_centered((112, 112, 80), 2 / 3)
    assert _extents(mask) == (74, 74, 53)
    assert mask.zero_count == 74 * 74 * 53


def test_zero_centered_2d_block():
    mask = gen_zero_centered((256, 256), 2 / 3)
    assert _extents(mask) == (170, 170)
    assert mask.zero_bbox()[0] == (43, 43)


@pytest.mark.parametrize("beta", SWEEP)
@pytest.mark.parametrize("shape", [(64, 64), (112, 112, 80), (17, 9), (5, 6, 7)])
def test_zero_centered_fraction_is_exact(shape, beta):
    mask = gen_zero_centered(shape, float(beta))
    extents = [_floor(beta, d) for d in shape]

    assert zero_fraction(mask) == np.prod(extents) / np.prod(shape)
    assert _extents(mask) == tuple(extents)
    assert mask.zero_bbox()[0] == tuple((d - e) // 2 for d, e in zip(shape, extents))


def test_zero_centered_single_voxel():
    mask = gen_zero_centered((3, 3), 0.4)
    assert mask.zero_count == 1
    assert mask.bits[1, 1] == 0


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.1, 1.5])
def test_beta_out_of_range(beta):
    with pytest.raises(ValueError):
        gen_zero_centered((16, 16), beta)


def test_zero_centered_empty_block_rejected():
    with pytest.raises(ValueError):
        gen_zero_centered((2, 16), 0.3)


def test_zero_centered_random_offset():
    rng = np.random.default_rng(0)
    mask = gen_zero_centered((32, 32), 0.5, rng=rng)
    assert _extents(mask) == (16, 16)
    assert mask.zero_count == 256


def test_random_cubes_single_cube_count():
    mask = gen_random_cubes((40, 30), 0.25, n_cubes=1, seed=3)
    assert mask.zero_count == 10 * 7


def test_random_cubes_deterministic():
    a = gen_random_cubes((64, 64), 1 / 8, n_cubes=27, seed=11)
    b = gen_random_cubes((64, 64), 1 / 8, n_cubes=27, seed=11)
    c = gen_random_cubes((64, 64), 1 / 8, n_cubes=27, seed=12)
    assert a == b
    assert a != c


def test_random_cubes_overlap_bound():
    mask = gen_random_cubes((112, 112, 80), 2 / 9, n_cubes=27, seed=0)
    nominal = 27 * (24 * 24 * 17)
    assert 0 < mask.zero_count <= nominal


def test_random_cubes_rejects_empty_cubes():
    with pytest.raises(ValueError):
        gen_random_cubes((4, 4), 0.1, n_cubes=3)


def test_contact_slab_3d():
    mask = gen_contact((27, 10, 10), 8 / 27, axis=0)
    assert mask.zero_count == 800
    assert mask.zero_bbox() == ((0, 0, 0), (8, 10, 10))


def test_contact_slab_high_side():
    mask = gen_contact((10, 20), 0.3, axis=1, side="high")
    assert mask.zero_bbox() == ((0, 14), (10, 20))


def test_contact_2d():
    mask = gen_contact((64, 48), 4 / 9, axis=0)
    assert _extents(mask) == (28, 48)


def test_contact_matches_random_cubes_nominal_fraction():
    nominal_cubes = 27 * (2 / 9) ** 3
    assert 8 / 27 == pytest.approx(nominal_cubes, abs=1e-12)


def test_contact_invalid_axis():
    with pytest.raises(ValueError, match="axis"):
        gen_contact((10, 10), 0.5, axis=2)


def test_zero_fraction_endpoints():
    assert zero_fraction(Mask.ones((4, 4))) == 0.0
    assert zero_fraction(Mask.zeros((4, 4))) == 1.0


def test_mask_rejects_other_values():
    with pytest.raises(ValueError):
        Mask(np.array([[0, 2]]))


def test_mask_is_read_only():
    mask = Mask.ones((2, 2))
    with pytest.raises(ValueError):
        mask.bits[0, 0] = 0


@pytest.mark.parametrize("strategy", ["zero_centered", "random_cubes", "contact"])
def test_generate_mask_is_pure(strategy):
    spec = MaskSpec(strategy=strategy, beta=0.25, n_cubes=5, seed=9)
    assert generate_mask(spec, (32, 32)) == generate_mask(spec, (32, 32))


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(strategy="stripes")
    with pytest.raises(ValueError):
        MaskSpec(n_cubes=0)
    with pytest.raises(ValueError):
        MaskSpec(side="middle")
