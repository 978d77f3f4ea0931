from collections import deque

import numpy as np
import pytest

from bcp_lab import autodiff as ad
from bcp_lab.pseudolabel import largest_connected_component, make_pseudo_labels, prob_to_label
from bcp_lab.segnet import ModelParams, NetConfig, init_params

NEIGHBORS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def flood_fill_lcc(label):
    "Brute-force per-class largest 4-connected component, first in scan order on ties."
    H, W = label.shape
    out = np.zeros_like(label)

    for c in np.unique(label):
        if c == 0:
            continue

        seen = np.zeros(label.shape, dtype=bool)
        best = []

        for r in range(H):
            for col in range(W):
                if label[r, col] != c or seen[r, col]:
                    continue

                comp = []
                queue = deque([(r, col)])
                seen[r, col] = True
                while queue:
                    y, x = queue.popleft()
                    comp.append((y, x))
                    for dy, dx in NEIGHBORS:
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < H and 0 <= nx < W and not seen[ny, nx] and label[ny, nx] == c:
                            seen[ny, nx] = True
                            queue.append((ny, nx))

                if len(comp) > len(best):
                    best = comp

        for y, x in best:
            out[y, x] = c

    return out


def test_binary_threshold_is_strict():
    prob = np.array([[0.4, 0.5, 0.49], [0.6, 0.5, 0.51]])
    np.testing.assert_array_equal(prob_to_label(prob, "binary"), [1, 0, 1])


def test_multiclass_argmax_and_ties():
    prob = np.array([[0.2, 0.4], [0.5, 0.4], [0.3, 0.2]])
    np.testing.assert_array_equal(prob_to_label(prob, "multiclass"), [1, 0])


def test_unnormalized_rejected():
    with pytest.raises(ValueError, match="normalized"):
        prob_to_label(np.array([[0.5], [0.6]]), "binary")


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        prob_to_label(np.array([[0.5], [0.5]]), "soft")


def test_lcc_single_component_unchanged():
    label = np.zeros((6, 6), dtype=np.int64)
    label[1:4, 2:5] = 2
    np.testing.assert_array_equal(largest_connected_component(label), label)


def test_lcc_removes_outlier():
    label = np.zeros((5, 5), dtype=np.int64)
    label[0, 0:3] = 1
    label[4, 4] = 1
    out = largest_connected_component(label)
    assert out[4, 4] == 0
    assert out[0, 0:3].tolist() == [1, 1, 1]


def test_lcc_diagonal_is_not_connected():
    label = np.array([[1, 0], [0, 1]])
    out = largest_connected_component(label)
    np.testing.assert_array_equal(out, [[1, 0], [0, 0]])


def test_lcc_per_class():
    label = np.zeros((6, 6), dtype=np.int64)
    label[0:2, 0:2] = 1
    label[5, 0] = 1
    label[3:6, 3:6] = 2
    label[0, 5] = 2
    out = largest_connected_component(label)
    assert (out == 1).sum() == 4
    assert (out == 2).sum() == 9
    assert out[5, 0] == 0 and out[0, 5] == 0


def test_lcc_matches_flood_fill_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        label = rng.integers(0, 3, size=(16, 16))
        out = largest_connected_component(label)
        np.testing.assert_array_equal(out, flood_fill_lcc(label))

        for c in (1, 2):
            kept = out == c
            assert kept.sum() <= (label == c).sum()
            assert np.all(label[kept] == c)


def test_lcc_3d_face_connectivity():
    label = np.zeros((3, 3, 3), dtype=np.int64)
    label[0, 0, 0] = 1
    label[1, 1, 1] = 1
    label[1, 1, 2] = 1
    out = largest_connected_component(label)
    assert out.sum() == 2
    assert out[0, 0, 0] == 0


def test_zero_teacher_gives_background():
    params = ModelParams({n: np.zeros(t.shape) for n, t in init_params(NetConfig(num_classes=2, base_width=2, depth=2)).items()})
    x = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
    y = make_pseudo_labels(params, x, "binary")
    assert y.shape == (2, 8, 8)
    assert not y.any()


def test_pseudo_labels_deterministic_and_lcc_toggle():
    params = init_params(NetConfig(num_classes=3, base_width=4, depth=2, seed=3))
    x = np.random.default_rng(1).normal(size=(2, 1, 16, 16))

    raw = make_pseudo_labels(params, x, "multiclass", use_lcc=False)
    filtered = make_pseudo_labels(params, x, "multiclass", use_lcc=True)

    np.testing.assert_array_equal(raw, make_pseudo_labels(params, x, "multiclass", use_lcc=False))
    for b in range(2):
        np.testing.assert_array_equal(filtered[b], largest_connected_component(raw[b]))


def test_pseudo_labels_record_nothing():
    params = init_params(NetConfig(num_classes=3, base_width=2, depth=2)).with_grad()
    x = np.random.default_rng(1).normal(size=(1, 1, 8, 8))

    with ad.Tape() as tape:
        make_pseudo_labels(params, x, "multiclass")
    assert len(tape) == 0
