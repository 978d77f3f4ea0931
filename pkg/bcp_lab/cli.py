"""
The `bcp-lab` command-line program: data generation, pretraining,
self-training, evaluation, diagnostics, prediction, plotting, mask dumps and
ablation runs.

Every command exits 0 on success. Failures print a single line on stderr of
the form::

    bcp-lab: error code=<n> kind=<kind> message="<text>"

with code 2 for invalid arguments, 3 for data problems and 4 for numeric
failures (a non-finite training loss).
"""

import argparse
from dataclasses import replace
import json
import logging
from pathlib import Path
import sys
import time
from typing import List, Optional

import numpy as np

from . import ablations, evalkit, plots
from .datakit import DatasetManifest, DatasetSpec, load_volume, save_volume, synth_generate
from .lab_paths import LabPaths
from .maskgen import STRATEGIES, MaskSpec, generate_mask
from .segnet import NetConfig, load_checkpoint, save_checkpoint
from .trainer import (
    MIXER_MODES,
    PRETRAIN_MODES,
    TrainConfig,
    check_net_fits,
    load_pools,
    predict,
    pretrain,
    train,
)
from .utils import (
    DataError,
    NumericError,
    atomic_write_text,
    format_details,
    get_ads_logger,
    get_lab_config,
)

__all__ = ["LabSession", "entrypoint", "main"]

default_logger = logging.getLogger("bcp_lab")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_stderr_handler = None
_ads_logger = None


def _install_stderr_handler(level: int):
    global _stderr_handler

    if _stderr_handler is not None:
        default_logger.removeHandler(_stderr_handler)

    _stderr_handler = logging.StreamHandler(sys.stderr)
    _stderr_handler.setFormatter(
        logging.Formatter(
            "%(asctime)s %(levelname)s\t%(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    )
    default_logger.addHandler(_stderr_handler)
    default_logger.setLevel(level)


def _project_logger() -> logging.Logger:
    global _ads_logger
    if _ads_logger is None:
        _ads_logger = get_ads_logger("bcp_lab.session")
    return _ads_logger


def _parse_shape(text: str) -> tuple:
    try:
        shape = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"shape must look like `64x64` or `112x112x80`; got `{text}`")
    if not shape or any(d < 1 for d in shape):
        raise ValueError(f"shape extents must be positive; got `{text}`")
    return shape


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="JSON", help="Run configuration file")
    p.add_argument("--data", metavar="DIR", required=True, help="Dataset directory (or its manifest.json)")
    p.add_argument("--out", metavar="DIR", help="Run directory; defaults to one under the results root")
    p.add_argument("--no-bcp", action="store_true", help="Self-train without any mixing")
    p.add_argument("--no-lcc", action="store_true", help="Skip largest-connected-component filtering of pseudo-labels")
    p.add_argument("--pretrain", choices=PRETRAIN_MODES, help="Pretraining mode")
    p.add_argument("--mixer", choices=MIXER_MODES, help="Mixing mode for self-training")
    p.add_argument("--mask", choices=STRATEGIES, help="Mask placement strategy")
    p.add_argument("--alpha", type=float, help="Loss weight of pseudo-labeled voxels")
    p.add_argument("--beta", type=float, help="Zero-region size ratio of the mask")
    p.add_argument("--seed", type=int, help="Seed for all randomness of the run")
    p.add_argument("--selftrain-iters", type=int, metavar="N", help="Self-training iterations")
    p.add_argument("--pretrain-iters", type=int, metavar="N", help="Pretraining iterations")


def make_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="bcp-lab", formatter_class=fmt)
    parser.add_argument("--debug", action="store_true", help="Print debugging (trace level 1) information")
    parser.add_argument("--trace", type=int, metavar="NUMBER", help="Activate more detailed tracing (if NUMBER > 1)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="Generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--spec", metavar="JSON", help="Dataset spec file; defaults to the built-in spec")
    p.add_argument("--preset", choices=("5%", "10%"), help="Labeled-ratio preset")
    p.add_argument("--seed", type=int, help="Override the dataset spec's seed")
    p.add_argument("--shift", type=float, help="Override the dataset spec's labeled/unlabeled shift")
    p.add_argument("--out", metavar="DIR", help="Output directory; defaults to `synth` under the data root")

    p = sub.add_parser("pretrain", help="Supervised pretraining on the labeled pool", formatter_class=fmt)
    _add_train_flags(p)

    p = sub.add_parser("train", help="Pretrain (or load --init) then self-train", formatter_class=fmt)
    _add_train_flags(p)
    p.add_argument("--init", metavar="CKPT", help="Start from this checkpoint instead of pretraining")
    p.add_argument("--resume", metavar="CKPT", help="Continue from a saved trainer state")

    p = sub.add_parser("eval", help="Score a checkpoint on a split", formatter_class=fmt)
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--split", default="test", choices=("labeled", "unlabeled", "val", "test"))
    p.add_argument("--group", default="student", help="Parameter group of the checkpoint to use")
    p.add_argument("--out", metavar="CSV", required=True)

    p = sub.add_parser("diagnose", help="Labeled/unlabeled distribution diagnostics", formatter_class=fmt)
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--feature", default="intensity", choices=evalkit.FEATURES)
    p.add_argument("--group", default="student")
    p.add_argument("--out", metavar="CSV", required=True)

    p = sub.add_parser("predict", help="Segment one image volume", formatter_class=fmt)
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--input", metavar="VOLUME", required=True, help="Image volume header (.json)")
    p.add_argument("--group", default="student")
    p.add_argument("--out", metavar="VOLUME", required=True, help="Label volume header to write (.json)")

    p = sub.add_parser("plot", help="Draw training curves or feature densities", formatter_class=fmt)
    p.add_argument("--metrics", metavar="CSV", help="Metrics CSV to chart")
    p.add_argument("--data", metavar="DIR", help="Dataset for a labeled/unlabeled density chart")
    p.add_argument("--checkpoint", metavar="CKPT", help="Model for non-intensity features")
    p.add_argument("--class", dest="cls", type=int, default=1, help="Class whose densities are drawn")
    p.add_argument("--feature", default="intensity", choices=evalkit.FEATURES)
    p.add_argument("--out", metavar="SVG", required=True)

    p = sub.add_parser("mask", help="Dump a mix mask as a u8 volume", formatter_class=fmt)
    p.add_argument("--strategy", default="zero_centered", choices=STRATEGIES)
    p.add_argument("--shape", default="64x64", help="Extents joined by `x`")
    p.add_argument("--beta", type=float, default=2.0 / 3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="VOLUME", required=True)

    p = sub.add_parser("ablate", help="Run one named ablation arm", formatter_class=fmt)
    p.add_argument("--arm", metavar="NAME", help="Arm to run")
    p.add_argument("--list", action="store_true", help="List the available arms and exit")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--out", metavar="DIR", help="Parent directory; the arm runs in OUT/NAME")
    p.add_argument("--config", metavar="JSON", help="Base run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--selftrain-iters", type=int, metavar="N")
    p.add_argument("--pretrain-iters", type=int, metavar="N")

    return parser


class LabSession(object):
    paths: LabPaths = None
    "Data and results locations, and the thread cap."

    logger: logging.Logger = None

    ads_logger: logging.Logger = None
    "Project logger configured through adsputils."

    settings: argparse.Namespace = None

    _current_item = "???"

    @classmethod
    def new_from_commandline(cls, argv: List[str]) -> "LabSession":
        settings = make_parser().parse_args(argv[1:])

        if settings.trace:
            settings.debug = True
        elif settings.debug:
            settings.trace = 1
        else:
            settings.trace = 0

        if settings.debug:
            _install_stderr_handler(logging.DEBUG + 1 - settings.trace)
        else:
            _install_stderr_handler(logging.INFO)

        inst = cls()
        inst.settings = settings
        inst.logger = default_logger
        inst.ads_logger = _project_logger()
        return inst

    # Structured logging, in the `% summary @kind subject key=val` form.

    def event_info(self, summary: str, **kwargs):
        msg = f"% {summary} @i {self._current_item} {format_details(**kwargs)}"
        self.logger.info(msg)
        self.ads_logger.info(msg)

    def event_warn(self, summary: str, **kwargs):
        msg = f"% {summary} @w {self._current_item} {format_details(**kwargs)}"
        self.logger.warning(msg)
        self.ads_logger.warning(msg)

    # Dispatch

    def run(self) -> int:
        command = self.settings.command
        impl = getattr(self, "cmd_" + command.replace("-", "_"))
        self._current_item = command
        t0 = time.time()

        try:
            self.paths = LabPaths.new_defaults(get_lab_config())
            impl()
        except NumericError as e:
            return self._fail(EXIT_NUMERIC, "numeric", e)
        except (DataError, FileNotFoundError) as e:
            return self._fail(EXIT_DATA, "data", e)
        except ValueError as e:
            return self._fail(EXIT_USAGE, "usage", e)

        self.event_info("command finished", elapsed=f"{time.time() - t0:.1f}s")
        return EXIT_OK

    def _fail(self, code: int, kind: str, e: Exception) -> int:
        message = str(e).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
        self.logger.debug("detailed traceback:", exc_info=sys.exc_info())
        if isinstance(e, NumericError) and e.dump_path is not None:
            self.event_warn("state dumped before halting", dump=e.dump_path)
        print(f'bcp-lab: error code={code} kind={kind} message="{message}"', file=sys.stderr)
        return code

    # Helpers

    def _manifest(self, path: Optional[str]) -> DatasetManifest:
        if path is None:
            raise ValueError("this command needs --data")
        return DatasetManifest.load(path)

    def _train_config(self, manifest: DatasetManifest) -> TrainConfig:
        s = self.settings

        if s.config is not None:
            cfg = TrainConfig.load(s.config)
        else:
            channels = manifest.load_images(manifest.split("labeled")[:1]).shape[1]
            cfg = TrainConfig(net=NetConfig(in_channels=channels, num_classes=manifest.num_classes))

        top = {}
        if getattr(s, "no_bcp", False):
            if s.mixer is not None and s.mixer != "plain":
                raise ValueError(f"--no-bcp conflicts with --mixer {s.mixer}")
            top["mixer_mode"] = "plain"
        elif getattr(s, "mixer", None) is not None:
            top["mixer_mode"] = s.mixer
        if getattr(s, "no_lcc", False):
            top["use_lcc"] = False
        if getattr(s, "pretrain", None) is not None:
            top["pretrain_mode"] = s.pretrain
        if s.seed is not None:
            top["seed"] = s.seed
            top["net"] = replace(cfg.net, seed=s.seed)
        if s.selftrain_iters is not None:
            top["selftrain_iters"] = s.selftrain_iters
        if s.pretrain_iters is not None:
            top["pretrain_iters"] = s.pretrain_iters

        mask = {}
        if getattr(s, "mask", None) is not None:
            mask["strategy"] = s.mask
        if getattr(s, "beta", None) is not None:
            mask["beta"] = s.beta
        if mask:
            top["mask_spec"] = replace(cfg.mask_spec, **mask)
        if getattr(s, "alpha", None) is not None:
            top["loss_cfg"] = replace(cfg.loss_cfg, alpha=s.alpha)

        return cfg.with_overrides(**top)

    def _run_dir(self, out: Optional[str], tag: str) -> Path:
        return Path(out) if out is not None else self.paths.run_dir(tag)

    def _write_snapshot(self, run_dir: Path, cfg: TrainConfig, **extra):
        doc = {"train_config": cfg.to_dict(), **extra}
        atomic_write_text(run_dir / "config.json", json.dumps(doc, indent=2, sort_keys=True))

    def _load_params(self, path: str, group: str):
        ckpt = load_checkpoint(path)
        return ckpt, ckpt.params(group)

    def _load_params_for(self, path: str, group: str, manifest: DatasetManifest):
        """
        Load a checkpoint group and check that its network fits the dataset.
        """
        ckpt, params = self._load_params(path, group)
        channels = manifest.load_images(manifest.records[:1]).shape[1]
        check_net_fits(
            ckpt.net_config, channels, manifest.shape, manifest.num_classes, source=f"dataset `{manifest.root}`"
        )
        return params

    def _evaluate(self, params, manifest: DatasetManifest, split: str, out: Path) -> List[evalkit.MetricRow]:
        records = manifest.split(split)
        if not records:
            raise DataError(f"split `{split}` of `{manifest.root}` is empty")

        def load(k):
            r = records[k]
            return manifest.load_images([r])[0], manifest.load_labels([r])[0]

        rows = evalkit.evaluate_volumes(
            lambda image: predict(params, image),
            [r.id for r in records],
            load,
            manifest.num_classes,
            threads=self.paths.threads,
            logger=self.logger,
        )
        evalkit.write_eval_csv(out, rows)

        dices = [r.dice for r in rows if not np.isnan(r.dice)]
        self.event_info(
            "evaluation summary",
            split=split,
            n_volumes=len(records),
            mean_dice=f"{np.mean(dices):.4f}" if dices else "nan",
            out=out,
        )
        return rows

    # Commands

    def cmd_gen_data(self):
        s = self.settings

        if s.spec is not None:
            try:
                doc = json.loads(Path(s.spec).read_text())
            except json.JSONDecodeError as e:
                raise DataError(f"malformed dataset spec `{s.spec}`: {e}")
            spec = DatasetSpec.from_dict(doc)
        else:
            spec = DatasetSpec()

        overrides = {}
        if s.preset is not None:
            preset = DatasetSpec.labeled_ratio_preset(s.preset)
            overrides.update(n_labeled=preset.n_labeled, n_unlabeled=preset.n_unlabeled)
        if s.seed is not None:
            overrides["seed"] = s.seed
        if s.shift is not None:
            overrides["shift"] = s.shift
        if overrides:
            spec = replace(spec, **overrides)

        out = Path(s.out) if s.out is not None else self.paths.data_base / "synth"
        self._current_item = str(out)
        synth_generate(spec, out, logger=self.logger, ads_logger=self.ads_logger)
        self.event_info("dataset written", n_labeled=spec.n_labeled, n_unlabeled=spec.n_unlabeled, seed=spec.seed)

    def cmd_pretrain(self):
        s = self.settings
        manifest = self._manifest(s.data)
        cfg = self._train_config(manifest)
        run_dir = self._run_dir(s.out, f"pretrain-{cfg.pretrain_mode}-s{cfg.seed}")
        self._current_item = run_dir.name
        self._write_snapshot(run_dir, cfg, data=str(s.data), command="pretrain")

        pools = load_pools(manifest, cfg.val_limit)
        params = pretrain(pools, cfg, logger=self.logger, ads_logger=self.ads_logger)
        save_checkpoint(run_dir / "pretrained.ckpt", {"student": params}, cfg.net, iteration=cfg.pretrain_iters)
        self.event_info("pretraining done", mode=cfg.pretrain_mode, iters=cfg.pretrain_iters, out=run_dir / "pretrained.ckpt")

    def cmd_train(self):
        s = self.settings
        manifest = self._manifest(s.data)
        cfg = self._train_config(manifest)
        run_dir = self._run_dir(s.out, f"train-{cfg.mixer_mode}-s{cfg.seed}")
        self._current_item = run_dir.name
        self._write_snapshot(run_dir, cfg, data=str(s.data), command="train", init=s.init, resume=s.resume)

        init = None
        if s.init is not None:
            _, init = self._load_params(s.init, "student")

        pools = load_pools(manifest, cfg.val_limit)
        state = train(pools, cfg, run_dir, init=init, resume=s.resume, logger=self.logger, ads_logger=self.ads_logger)
        self.event_info("training done", iteration=state.iteration, out=run_dir / "final.ckpt")

    def cmd_eval(self):
        s = self.settings
        manifest = self._manifest(s.data)
        params = self._load_params_for(s.checkpoint, s.group, manifest)
        self._evaluate(params, manifest, s.split, Path(s.out))

    def cmd_diagnose(self):
        s = self.settings
        manifest = self._manifest(s.data)
        params = self._load_params_for(s.checkpoint, s.group, manifest)

        lab = manifest.split("labeled")
        unl = manifest.split("unlabeled")
        labeled = (manifest.load_images(lab), manifest.load_labels(lab))
        unlabeled = (manifest.load_images(unl), manifest.load_labels(unl))
        predict_fn = lambda x: predict(params, x)  # noqa: E731

        d_l, d_u, gap = evalkit.dice_gap(predict_fn, labeled, unlabeled, manifest.num_classes)
        self.event_info("dice gap", dice_labeled=f"{d_l:.4f}", dice_unlabeled=f"{d_u:.4f}", gap=f"{gap:.4f}")

        rows = evalkit.diagnose(params, predict_fn, labeled, unlabeled, manifest.num_classes, s.feature, self.logger)
        evalkit.write_diagnose_csv(s.out, rows)

        for c, kg, _, _ in rows:
            self.event_info("class kde gap", cls=c, feature=s.feature, kde_gap=f"{kg:.4f}")

    def cmd_predict(self):
        s = self.settings
        ckpt, params = self._load_params(s.checkpoint, s.group)
        image = load_volume(s.input, expect_dtype="f32").astype(np.float64)

        if image.ndim == 2:
            image = image[None]
        if image.ndim != 3:
            raise DataError(f"input volume `{s.input}` must be 2D or channel-first 3D; got shape {image.shape}")
        check_net_fits(ckpt.net_config, image.shape[0], image.shape[1:], source=f"volume `{s.input}`")

        labels = predict(params, image)
        save_volume(s.out, labels.astype(np.uint8), "u8")
        self.event_info("prediction written", out=s.out, shape=labels.shape)

    def cmd_plot(self):
        s = self.settings

        if s.metrics is not None:
            plots.plot_metrics(s.metrics, s.out, title=Path(s.metrics).parent.name)
        elif s.data is not None:
            manifest = self._manifest(s.data)
            params = None
            if s.checkpoint is not None:
                params = self._load_params_for(s.checkpoint, "student", manifest)

            curves = {}
            for split in ("labeled", "unlabeled"):
                recs = manifest.split(split)
                feats = evalkit.class_features(
                    manifest.load_images(recs), manifest.load_labels(recs), s.cls, s.feature, params
                )
                if not len(feats):
                    raise DataError(f"class {s.cls} never occurs in the {split} pool")
                curves[split] = evalkit.kde(feats, logger=self.logger)

            plots.plot_kde(curves, s.out, title=f"class {s.cls} {s.feature}")
        else:
            raise ValueError("plot needs --metrics or --data")

        self.event_info("plot written", out=s.out)

    def cmd_mask(self):
        s = self.settings
        shape = _parse_shape(s.shape)
        spec = MaskSpec(strategy=s.strategy, beta=s.beta, seed=s.seed)
        mask = generate_mask(spec, shape)
        save_volume(s.out, mask.bits, "u8")
        self.event_info("mask written", out=s.out, zeros=mask.zero_count, bbox=mask.zero_bbox())

    def cmd_ablate(self):
        s = self.settings

        if s.list:
            for name in ablations.arm_names():
                arm = ablations.get_arm(name)
                print(f"{arm.name:20} {arm.group:16} {arm.description}")
            return

        if s.arm is None:
            raise ValueError("ablate needs --arm NAME or --list")

        arm = ablations.get_arm(s.arm)
        manifest = self._manifest(s.data)
        base = self._train_config(manifest)
        cfg = ablations.apply_arm(arm, base)

        root = Path(s.out) if s.out is not None else self.paths.results_base / "ablations"
        run_dir = root / arm.name
        self._current_item = arm.name
        self._write_snapshot(run_dir, cfg, data=str(s.data), command="ablate", arm=arm.name)

        pools = load_pools(manifest, cfg.val_limit)

        if arm.supervised:
            params = pretrain(pools, cfg, logger=self.logger, ads_logger=self.ads_logger)
            save_checkpoint(run_dir / "final.ckpt", {"student": params, "teacher": params}, cfg.net)
        else:
            params = train(pools, cfg, run_dir, logger=self.logger, ads_logger=self.ads_logger).student

        if manifest.split("test"):
            self._evaluate(params, manifest, "test", run_dir / "eval.csv")
        self.event_info("arm finished", group=arm.group, out=run_dir)


def main(argv: List[str] = sys.argv) -> int:
    return LabSession.new_from_commandline(argv).run()


def entrypoint(argv=sys.argv):
    sys.exit(main(argv))


if __name__ == "__main__":
    entrypoint()
