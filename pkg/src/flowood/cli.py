"""``flowood`` command line: synth, train, score, roc, psd, sample.

Exit codes: 0 success, 1 internal or numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from flowood import checkpoint as ckpt_io
from flowood import data, ood, training
from flowood.config import PRESETS, ConfigError, load_config_file, resolve_config
from flowood.waveletflow import WaveletFlowModel

log = logging.getLogger("flowood")


class UsageError(Exception):
    """Bad user input; maps to exit code 2."""


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("FLOWOOD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FLOWOOD_SEED must be an integer, got {env!r}") from None


def _load_images(root, extent: int, channels: int) -> data.Dataset:
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    ds = data.load_dataset(data.DatasetSpec(root, extent, channels))
    if ds.failures:
        print(f"warning: skipped {len(ds.failures)} undecodable file(s)", file=sys.stderr)
        for path, reason in ds.failures:
            print(f"  {path}: {reason}", file=sys.stderr)
    if len(ds.ids) == 0:
        raise UsageError(f"no usable images under {root}")
    return ds


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return training.load_checkpoint(path)
    except (ckpt_io.CheckpointError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


# -- commands ---------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    make = data.SYNTHETIC_KINDS[args.kind]
    images = make(args.n, args.size, args.channels, seed=resolve_seed(args.seed))
    data.save_dataset(args.out, images, prefix=args.kind, fmt=args.format)
    print(f"wrote {len(images)} images to {args.out}")
    return 0


_OVERRIDES = ("epochs", "batch_size", "learning_rate", "weight_decay", "hidden_channels",
              "mask_scheme", "cycle_iterations", "levels", "flows_per_level", "image_size",
              "channels", "holdout_fraction", "checkpoint_interval")


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in _OVERRIDES}
    if args.resume:
        model, cfg, state = _load_checkpoint(args.resume)
        if cfg.model_kind != args.model:
            raise UsageError(f"checkpoint holds a {cfg.model_kind} model, not {args.model}")
        if args.epochs is not None:
            cfg = cfg.replace(epochs=args.epochs)
    else:
        file_values = load_config_file(args.config) if args.config else {}
        overrides["model_kind"] = args.model
        overrides["seed"] = resolve_seed(args.seed)
        cfg = resolve_config(file_values, args.preset, overrides)
        model, state = training.build_model(cfg), None
    levels = None
    if args.level is not None:
        if not isinstance(model, WaveletFlowModel):
            raise UsageError("--level applies to waveletflow models only")
        try:
            model._check_level(args.level)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        levels = [args.level]
    ds = _load_images(args.data, cfg.image_size, cfg.channels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model, state = training.train(model, ds.images, cfg, state=state, levels=levels, checkpoint_path=out)
    training.save_checkpoint(out, model, cfg, state)
    history = Path(args.history) if args.history else out.with_name(out.name + ".history.csv")
    training.write_history(history, state.history)
    print(f"trained {cfg.model_kind} for {state.epoch} epochs; checkpoint {out}; history {history}")
    return 0


def cmd_score(args) -> int:
    model, cfg, _ = _load_checkpoint(args.ckpt)
    if args.per_level and not isinstance(model, WaveletFlowModel):
        raise UsageError("--per-level needs a waveletflow checkpoint")
    if args.split_label not in ood.SPLITS:
        raise UsageError(f"--split-label must be one of {ood.SPLITS}")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    seed = resolve_seed(args.seed)
    ds = _load_images(args.data, cfg.image_size, cfg.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = ood.perturb_images(ds.images, ds.ids, args.sigma, seed, args.additive)
    records = ood.score_dataset(model, images, ds.ids, args.split_label, seed, threads=args.threads)
    ood.write_scores_csv(out / "scores.csv", records)
    if args.per_level:
        sigmas = [float(s) for s in args.sigmas.split(",")] if args.sigmas else [args.sigma]
        sweep = ood.per_level_sweep(model, ds.images, ds.ids, sigmas, seed, bins=args.bins,
                                    additive=args.additive, threads=args.threads)
        ood.write_levels_csv(out / "levels.csv", sweep)
    mean_bpd = float(np.mean([r.bpd for r in records]))
    print(f"scored {len(records)} images; mean bpd {mean_bpd:.4f}; warnings {len(ds.failures)}")
    return 0


def cmd_roc(args) -> int:
    try:
        rec_in = ood.read_scores_csv(args.in_csv)
        rec_out = ood.read_scores_csv(args.out_csv)
    except FileNotFoundError as exc:
        raise UsageError(f"scores file not found: {exc.filename}") from None
    points, auc = ood.roc_auc([-r.nll_nats for r in rec_in], [-r.nll_nats for r in rec_out])
    ood.write_roc_csv(args.dest, points, auc)
    print(f"auc={auc:.4f}")
    return 0


def cmd_psd(args) -> int:
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    if args.size:
        ds = _load_images(root, args.size, 3)
        images = list(ds.images)
    else:
        images = []
        for path in data.DatasetSpec(root, 1).files():
            try:
                images.append(data.read_image(path).transpose(2, 0, 1))
            except data.ImageDecodeError as exc:
                print(f"warning: skipping {path}: {exc}", file=sys.stderr)
        if not images:
            raise UsageError(f"no usable images under {root}")
        if len({im.shape for im in images}) > 1:
            raise UsageError("images differ in size; pass --size to resample")
    x = np.stack(images) / 255.0
    if args.sigma:
        rng = np.random.default_rng([resolve_seed(args.seed), 1])
        x = ood.perturb_multiplicative(x, args.sigma, additive=args.additive, rng=rng)
    curve = ood.average_psd(x)
    ood.write_psd_csv(args.out, curve)
    print(f"wrote {len(curve.radii)} radial bins to {args.out}")
    return 0


def cmd_sample(args) -> int:
    model, _, _ = _load_checkpoint(args.ckpt)
    if args.n < 1:
        raise UsageError("-n must be >= 1")
    if args.temperature <= 0:
        raise UsageError("--temperature must be > 0")
    imgs = model.sample(args.n, args.temperature, seed=resolve_seed(args.seed))
    paths = data.save_dataset(args.out, data.to_uint8(imgs), prefix="sample", fmt="png")
    print(f"wrote {len(paths)} samples to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowood", description="Flow-based likelihood OOD toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic texture dataset")
    s.add_argument("--kind", choices=sorted(data.SYNTHETIC_KINDS), required=True)
    s.add_argument("-n", type=int, default=64, help="number of images")
    s.add_argument("--size", type=int, default=8, help="image extent")
    s.add_argument("--channels", type=int, default=3, choices=(1, 3))
    s.add_argument("--format", choices=("png", "ppm"), default="png")
    s.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to FLOWOOD_SEED)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a GLOW or Wavelet Flow model")
    t.add_argument("--model", choices=("glow", "waveletflow"), required=True)
    t.add_argument("--data", required=True, help="directory of PNG/PPM images")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", choices=sorted(PRESETS), help="masking preset hyperparameters")
    t.add_argument("--level", type=int, help="train only this wavelet level")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    t.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to FLOWOOD_SEED)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--hidden-channels", dest="hidden_channels", type=int)
    t.add_argument("--mask-scheme", dest="mask_scheme", choices=("channel_wise", "checkerboard", "cycle"))
    t.add_argument("--cycle-iterations", dest="cycle_iterations", type=int)
    t.add_argument("--levels", type=int, help="GLOW multi-scale levels")
    t.add_argument("--flows-per-level", dest="flows_per_level", type=int)
    t.add_argument("--image-size", dest="image_size", type=int)
    t.add_argument("--channels", type=int, choices=(1, 3))
    t.add_argument("--holdout-fraction", dest="holdout_fraction", type=float)
    t.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("score", help="score images and write scores.csv")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split-label", dest="split_label", required=True, help="train, test or ood")
    c.add_argument("--sigma", type=float, default=0.0, help="noise std applied before scoring")
    c.add_argument("--additive", action="store_true", help="additive instead of multiplicative noise")
    c.add_argument("--per-level", dest="per_level", action="store_true", help="also write levels.csv")
    c.add_argument("--sigmas", help="comma-separated sigmas for the per-level sweep (default: --sigma)")
    c.add_argument("--bins", type=int, default=20, help="histogram bins per level")
    c.add_argument("--seed", type=int, default=None, help="dequantization/noise seed")
    c.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_score)

    r = sub.add_parser("roc", help="ROC curve and AUC from two scores.csv files")
    r.add_argument("--in", dest="in_csv", required=True, help="in-distribution scores.csv")
    r.add_argument("--out", dest="out_csv", required=True, help="out-of-distribution scores.csv")
    r.add_argument("--dest", default="roc.csv", help="output roc.csv path")
    r.set_defaults(func=cmd_roc)

    d = sub.add_parser("psd", help="average radial power spectrum of a dataset")
    d.add_argument("--data", required=True)
    d.add_argument("--out", default="psd.csv", help="output psd.csv path")
    d.add_argument("--size", type=int, help="resample images to this extent first")
    d.add_argument("--sigma", type=float, default=0.0, help="noise std applied before the transform")
    d.add_argument("--additive", action="store_true")
    d.add_argument("--seed", type=int, default=None)
    d.set_defaults(func=cmd_psd)

    m = sub.add_parser("sample", help="draw PNG samples from a checkpoint")
    m.add_argument("--ckpt", required=True)
    m.add_argument("-n", type=int, default=16)
    m.add_argument("--temperature", type=float, default=1.0)
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ood.CsvFormatError, ckpt_io.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except training.NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"error: internal failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
