"""Command-line interface: ``icdt <command> ...``.

Exit codes: 0 success, 1 internal error, 2 bad input or paths.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from icdt import __version__
from icdt import metrics
from icdt.checkpoint import CheckpointError
from icdt.codec import CodecShapeError, NotFittedError
from icdt.config import PROFILES, RunConfig
from icdt.data import DatasetError, list_images, make_synthetic, read_image, write_image
from icdt.diffusion import ScheduleError
from icdt.engine import LossLog, Trainer, from_uint8, sample_loop
from icdt.model import ConfigError

log = logging.getLogger("icdt")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (
    ConfigError, DatasetError, CheckpointError, CodecShapeError, NotFittedError,
    ScheduleError, metrics.ParameterError, FileNotFoundError, NotADirectoryError,
)


class UsageError(ValueError):
    pass


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else PROFILES[args.profile]()
    cfg = cfg.with_overrides(args.set or [])
    if getattr(args, "data", None):
        cfg = cfg.with_overrides([f"root={args.data}"])
    if getattr(args, "out", None):
        cfg = cfg.with_overrides([f"out_dir={args.out}"])
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="run config file (key=value with [section] headers)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="defaults when --config is absent")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")


def _require_dir(path: str, what: str) -> None:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} directory not found: {path}")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    if args.count < 1 or args.side < 1:
        raise UsageError("--count and --side must be positive")
    if args.ext not in (".png", ".ppm"):
        raise UsageError("--ext must be .png or .ppm")
    names = make_synthetic(args.out, args.count, args.side, args.seed, args.split, args.ext)
    print(f"wrote {len(names)} pairs to {args.out}/{args.split}A and {args.split}B")
    return EXIT_OK


def cmd_init_config(args) -> int:
    cfg = _resolve_config(args)
    if args.output == "-":
        sys.stdout.write(cfg.to_text())
    else:
        cfg.save(args.output)
        print(f"wrote {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    from icdt.pipeline import build_trainer, load_split

    cfg = _resolve_config(args)
    deg, ref, _ = load_split(cfg, cfg.train_split)
    if len(deg) < cfg.batch_size:
        raise ConfigError(f"{len(deg)} training pairs is fewer than batch_size {cfg.batch_size}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.out_dir, "config.txt"))
    sys.stdout.write(cfg.to_text())

    trainer = build_trainer(cfg, deg, ref)
    every = cfg.checkpoint_every

    def on_step(tr: Trainer, report) -> None:
        losses.write(report)
        if every and report.step % every == 0:
            tr.save(os.path.join(cfg.out_dir, f"step_{report.step:07d}.ckpt"))
            log.info("step %d l_simple %.5f l_vlb %.5f", report.step, report.l_simple, report.l_vlb)

    with LossLog(os.path.join(cfg.out_dir, "loss.csv")) as losses:
        trainer.fit(from_uint8(deg), from_uint8(ref), cfg.iterations, on_step)
    final = os.path.join(cfg.out_dir, "final.ckpt")
    trainer.save(final, {"iterations": cfg.iterations})
    print(f"trained {cfg.iterations} steps; checkpoint {final}; cumulative compute {trainer.compute:.4g} FLOPs")
    return EXIT_OK


def cmd_enhance(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    _require_dir(args.input, "input")
    trainer = Trainer.load(args.checkpoint)
    if args.steps < 1 or args.steps > trainer.schedule.T:
        raise UsageError(f"--steps must lie in 1..{trainer.schedule.T}, got {args.steps}")
    names = list_images(args.input)
    if not names:
        raise DatasetError(f"no images in {args.input}")
    side = trainer.model.cfg.latent_side * trainer.codec.factor
    images = []
    for n in names:
        img = read_image(os.path.join(args.input, n))
        if img.shape[:2] != (side, side):
            raise ConfigError(f"{n} is {img.shape[1]}x{img.shape[0]}, the checkpoint expects {side}x{side}")
        images.append(img)
    model = trainer.model if args.raw else trainer.ema_model()
    shared = None
    if args.shared_noise:
        shared = np.random.default_rng(args.seed).standard_normal(
            (1,) + trainer.codec.latent_shape(side), dtype=np.float32)
    os.makedirs(args.output, exist_ok=True)
    for i, (n, img) in enumerate(zip(names, images)):
        seed = args.seed if args.shared_noise else [args.seed, i]
        out = sample_loop(model, from_uint8(img)[None], trainer.codec, trainer.schedule, args.steps, seed, shared)[0]
        write_image(os.path.join(args.output, n), out)
    print(f"enhanced {len(names)} images with {args.steps} steps into {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require_dir(args.enhanced, "enhanced")
    _require_dir(args.reference, "reference")
    names = list_images(args.enhanced)
    if not names:
        raise DatasetError(f"no images in {args.enhanced}")
    missing = [n for n in names if not os.path.exists(os.path.join(args.reference, n))]
    if missing:
        raise DatasetError(f"no reference for {missing[:5]} in {args.reference}")
    pairs = [(read_image(os.path.join(args.enhanced, n)), read_image(os.path.join(args.reference, n))) for n in names]
    result = metrics.evaluate_set(pairs, names)
    result.write_csv(args.csv)
    m = result.mean
    print(f"mean over {len(names)} images: psnr={m.psnr:.4f} ssim={m.ssim:.4f} uiqm={m.uiqm:.4f}")
    return EXIT_OK


def cmd_scaling_report(args) -> int:
    from icdt.pipeline import load_split
    from icdt.scaling import parse_configs, run_scaling, write_report

    if args.eval_draws < 1 or args.eval_every < 1 or args.eval_steps < 1:
        raise UsageError("--eval-every, --eval-steps and --eval-draws must be positive")
    try:
        specs = parse_configs(args.configs)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    cfg = _resolve_config(args)
    for name, p in specs:   # reject any invalid spec before training starts
        cfg.with_overrides([f"name={name}", f"patch={p}"])
    train = load_split(cfg, cfg.train_split)[:2]
    held = load_split(cfg, cfg.eval_split)[:2]
    sys.stdout.write(cfg.to_text())
    runs = run_scaling(cfg, specs, train, held, args.eval_every, args.eval_steps, log=log.info,
                       eval_draws=args.eval_draws)
    paths = write_report(runs, cfg.out_dir)
    for r in runs:
        print(f"{r.label}: params={r.params} gflops={r.flops / 1e9:.4f} final_psnr={r.final_psnr:.3f}")
    print("wrote " + ", ".join(paths.values()))
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icdt", description="Image-conditional diffusion transformer toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic paired underwater dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--ext", default=".png")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("init-config", help="write a config file for a profile")
    _add_config_args(p)
    p.add_argument("--output", required=True, help="destination file, or - for stdout")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("train", help="train a model; writes loss.csv and checkpoints")
    _add_config_args(p)
    p.add_argument("--data", help="dataset root (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance every image in a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shared-noise", action="store_true", help="reuse one initial noise and noise stream for all images")
    p.add_argument("--raw", action="store_true", help="sample from raw weights instead of the EMA copy")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/UIQM of enhanced images against references")
    p.add_argument("--enhanced", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("scaling-report", help="train several configs and tabulate PSNR against compute")
    _add_config_args(p)
    p.add_argument("--configs", required=True, help="comma-separated NAME/PATCH list, e.g. tiny/2,tiny/1")
    p.add_argument("--data", help="dataset root holding the train and eval splits")
    p.add_argument("--out", help="directory for the CSV files")
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--eval-steps", type=int, default=50)
    p.add_argument("--eval-draws", type=int, default=1, help="sampling-noise draws averaged per evaluation")
    p.set_defaults(func=cmd_scaling_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"icdt {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except INPUT_ERRORS as e:
        print(f"icdt {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"icdt {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
