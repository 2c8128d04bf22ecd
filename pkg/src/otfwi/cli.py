"""Command-line front end.

Verbs:
    simulate     forward-model a velocity model into observed gathers
    train-prior  fit a score checkpoint on a model dataset
    invert       run one of the four inversion methods from a config file
    metrics      compare a reconstruction against a reference model
    render       rasterize a 2D NPY field to a PGM image

Exit codes: 0 success, 1 validation problem (bad flags, bad config, missing
files), 2 runtime failure (solver blow-up, diverged training, corrupt data).
Config values come from the file given by --config; repeated --set key=value
flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import arrayio
from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    run_experiment,
    simulate_observations,
    train_prior,
    _output_dir,
    _write_manifest,
)
from .metrics import psnr, rel_l2_error, ssim
from .scorenet import NetConfig

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; those are validation
    # problems under this tool's contract, so remap them.
    def error(self, message):
        raise ConfigError(message)


def _split_overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(args, need_method: bool) -> ExperimentConfig:
    overrides = _split_overrides(args.set)
    if args.jobs is not None:
        overrides["jobs"] = str(args.jobs)
    return ExperimentConfig.from_file(args.config, overrides, need_method=need_method)


def _cmd_simulate(args) -> int:
    config = _load_config(args, need_method=False)
    outdir = _output_dir(config)
    (outdir / "config.txt").write_text(config.snapshot_text())
    try:
        simulate_observations(config, outdir)
    except Exception as exc:
        _write_manifest(outdir, "error", None, f"{type(exc).__name__}: {exc}")
        raise ExperimentError(str(exc)) from exc
    _write_manifest(outdir, "ok", None, None)
    print(outdir)
    return 0


def _cmd_invert(args) -> int:
    config = _load_config(args, need_method=True)
    manifest = run_experiment(config)
    print(f"status={manifest['status']} artifacts={len(manifest['artifacts'])}")
    return 0


def _cmd_train_prior(args) -> int:
    net = NetConfig(width=args.width, emb_dim=args.emb_dim,
                    batch_size=args.batch_size, learning_rate=args.learning_rate)
    out = train_prior(
        args.dataset, args.output, epochs=args.epochs, seed=args.seed, net=net,
        n_steps=args.steps, beta_start=args.beta_start, beta_end=args.beta_end,
    )
    print(out)
    return 0


def _cmd_metrics(args) -> int:
    rec = arrayio.npy_read(args.rec)
    true = arrayio.npy_read(args.true)
    if rec.shape != true.shape:
        raise ConfigError(f"shape mismatch: {rec.shape} vs {true.shape}")
    row = [
        rel_l2_error(rec, true),
        psnr(rec, true),
        ssim(rec, true) if min(true.shape) >= 11 else float("nan"),
    ]
    print(f"e_l2={row[0]:.6f} psnr={row[1]:.3f} ssim={row[2]:.6f}")
    if args.out:
        arrayio.write_csv(args.out, ("e_l2", "psnr", "ssim"), [row])
    return 0


def _cmd_render(args) -> int:
    field = arrayio.npy_read(args.field)
    if field.ndim != 2:
        raise ConfigError("render expects a 2D field")
    lo = field.min() if args.lo is None else args.lo
    hi = field.max() if args.hi is None else args.hi
    if not lo < hi:
        raise ConfigError(f"empty color range [{lo}, {hi}]")
    arrayio.render_field(field, args.out, (float(lo), float(hi)))
    print(args.out)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="otfwi", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_config_flags(p):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--jobs", type=int, default=None, help="worker thread cap")

    p_sim = sub.add_parser("simulate", help="synthesize observations")
    add_config_flags(p_sim)
    p_sim.set_defaults(func=_cmd_simulate)

    p_inv = sub.add_parser("invert", help="run an inversion experiment")
    add_config_flags(p_inv)
    p_inv.set_defaults(func=_cmd_invert)

    p_train = sub.add_parser("train-prior", help="train a score checkpoint")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--output", required=True)
    p_train.add_argument("--epochs", type=int, default=200)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--width", type=int, default=32)
    p_train.add_argument("--emb-dim", type=int, default=32)
    p_train.add_argument("--batch-size", type=int, default=128)
    p_train.add_argument("--learning-rate", type=float, default=1e-3)
    p_train.add_argument("--steps", type=int, default=1000)
    p_train.add_argument("--beta-start", type=float, default=1e-4)
    p_train.add_argument("--beta-end", type=float, default=0.02)
    p_train.set_defaults(func=_cmd_train_prior)

    p_met = sub.add_parser("metrics", help="compare reconstruction to truth")
    p_met.add_argument("--rec", required=True)
    p_met.add_argument("--true", required=True)
    p_met.add_argument("--out", default=None, help="optional CSV destination")
    p_met.set_defaults(func=_cmd_metrics)

    p_ren = sub.add_parser("render", help="rasterize a field to PGM")
    p_ren.add_argument("--field", required=True)
    p_ren.add_argument("--out", required=True)
    p_ren.add_argument("--lo", type=float, default=None)
    p_ren.add_argument("--hi", type=float, default=None)
    p_ren.set_defaults(func=_cmd_render)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # solver, training, and I/O failures
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
