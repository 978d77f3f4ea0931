"""
Desk-scale end-to-end runs. These take minutes, so they only run with
``--runslow``.
"""

import time

import numpy as np
import pytest

from bcp_lab.ablations import apply_arm, arm_names, get_arm
from bcp_lab.datakit import DatasetSpec, synth_generate
from bcp_lab.evalkit import class_features, dice_gap, kde_gap, mean_foreground_dice
from bcp_lab.segnet import NetConfig, load_checkpoint
from bcp_lab.trainer import TrainConfig, load_pools, predict, pretrain, train

pytestmark = pytest.mark.slow

SEEDS = (1, 2, 3)
DESK_BUDGET = 15 * 60
"Seconds for all desk runs, training and diagnostics included."


def _subset(manifest, split):
    recs = manifest.split(split)
    return manifest.load_images(recs), manifest.load_labels(recs)


def _test_dice(params, manifest):
    images, labels = _subset(manifest, "test")
    preds = predict(params, images)
    return float(np.mean([mean_foreground_dice(p, g, manifest.num_classes) for p, g in zip(preds, labels)]))


def _mean_kde_gap(params, manifest):
    labeled = _subset(manifest, "labeled")
    unlabeled = _subset(manifest, "unlabeled")
    gaps = []
    for c in range(1, manifest.num_classes):
        fl = class_features(*labeled, c, "probability", params)
        fu = class_features(*unlabeled, c, "probability", params)
        gaps.append(kde_gap(fl, fu))
    return float(np.mean(gaps))


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    results = []
    t0 = time.time()

    for seed in SEEDS:
        root = tmp_path_factory.mktemp(f"desk-{seed}")
        manifest = synth_generate(DatasetSpec.labeled_ratio_preset("5%", seed=seed), root / "data")
        cfg = TrainConfig(net=NetConfig(num_classes=manifest.num_classes, seed=seed), seed=seed)
        pools = load_pools(manifest, cfg.val_limit)

        supervised = pretrain(pools, cfg)
        bcp = train(pools, cfg, root / "bcp", init=supervised).student
        within = train(pools, apply_arm(get_arm("cp-within"), cfg), root / "within", init=supervised).student

        gaps = {}
        for name, params in (("supervised", supervised), ("bcp", bcp)):
            _, _, gap = dice_gap(lambda x: predict(params, x), _subset(manifest, "labeled"), _subset(manifest, "unlabeled"), 3)
            gaps[name] = (abs(gap), _mean_kde_gap(params, manifest))

        results.append(
            dict(
                supervised=_test_dice(supervised, manifest),
                bcp=_test_dice(bcp, manifest),
                within=_test_dice(within, manifest),
                gaps=gaps,
            )
        )

    return results, time.time() - t0


def test_desk_runs_fit_the_time_budget(desk_runs):
    _, elapsed = desk_runs
    assert elapsed < DESK_BUDGET


def test_bcp_beats_labeled_only(desk_runs):
    runs, _ = desk_runs
    bcp = np.mean([r["bcp"] for r in runs])
    supervised = np.mean([r["supervised"] for r in runs])
    assert bcp - supervised >= 0.03


def test_bcp_beats_within_set_copy_paste(desk_runs):
    runs, _ = desk_runs
    assert sum(r["bcp"] > r["within"] for r in runs) >= 2


def test_bcp_narrows_the_labeled_unlabeled_gap(desk_runs):
    runs, _ = desk_runs
    assert sum(r["gaps"]["bcp"][0] < r["gaps"]["supervised"][0] for r in runs) >= 2
    bcp_kde = np.mean([r["gaps"]["bcp"][1] for r in runs])
    supervised_kde = np.mean([r["gaps"]["supervised"][1] for r in runs])
    assert bcp_kde <= supervised_kde


def test_full_runs_are_bit_identical(tmp_path):
    manifest = synth_generate(DatasetSpec(n_labeled=4, n_unlabeled=12, n_val=2, n_test=2, seed=1), tmp_path / "data")
    cfg = TrainConfig(net=NetConfig(num_classes=3, base_width=4), pretrain_iters=50, selftrain_iters=100, log_every=25)
    pools = load_pools(manifest, cfg.val_limit)

    train(pools, cfg, tmp_path / "a")
    train(pools, cfg, tmp_path / "b")

    for name in ("final.ckpt", "pretrained.ckpt", "state.ckpt", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("name", arm_names())
def test_every_arm_completes_a_smoke_run(name, tiny_dataset, tmp_path):
    base = TrainConfig(
        net=NetConfig(num_classes=3, base_width=4, depth=2),
        pretrain_iters=50,
        selftrain_iters=500,
        batch_labeled=2,
        batch_unlabeled=2,
        log_every=100,
        val_limit=1,
    )
    arm = get_arm(name)
    cfg = apply_arm(arm, base)
    pools = load_pools(tiny_dataset, cfg.val_limit)

    if arm.supervised:
        assert pretrain(pools, cfg).all_finite()
        return

    state = train(pools, cfg, tmp_path)
    assert state.iteration == 500
    assert state.student.all_finite()
    assert load_checkpoint(tmp_path / "final.ckpt").iteration == 500
