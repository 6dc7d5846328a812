"""Command-line entry point: ``fpn-oamp <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, WidebandConfig, desk_config, full_config, load_config, save_config
from .experiments import (EVAL_HEADER, FARFIELD_HEADER, OOD_HEADER, TRACE_HEADER, WIDEBAND_HEADER,
                          adapted_nmse, convergence_trace, default_shifts, eval_nmse, farfield_error_curve,
                          make_operator, make_splits, ood_suite, run_method, make_test_set, train_model, wideband_eval,
                          write_csv, write_manifest)
from .formats import load_checkpoint, load_dataset, load_operator, save_checkpoint, save_dataset, save_operator
from .geometry import REFERENCE_GEOMETRY
from .measurement import PilotConfig
from .nle import init_params
from .training import generate_dataset, nmse_db, train

log = logging.getLogger("fpn_oamp")


def _config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = desk_config()
    elif args.config in ("desk", "full"):
        cfg = desk_config() if args.config == "desk" else full_config()
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _checkpoint(args, cfg):
    path = Path(args.checkpoint or Path(args.out) / "model.ckpt")
    return load_checkpoint(path, cfg.geometry)


def cmd_gen_data(args, cfg, out: Path):
    op = make_operator(cfg)
    save_operator(out / "operator.npz", op)
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for split in args.splits:
        ds = generate_dataset(cfg.seed, cfg.geometry, cfg.channel, op, sizes[split], cfg.snr_range, split)
        save_dataset(out / f"{split}.fpnd", ds)
        log.info("wrote %d %s samples", len(ds), split)
    return {"operator_digest": op.digest()}


def cmd_train(args, cfg, out: Path):
    data = Path(args.data) if args.data else None
    if data is not None:
        op = load_operator(data / "operator.npz")
        tr, va = load_dataset(data / "train.fpnd"), load_dataset(data / "val.fpnd")
    else:
        op = make_operator(cfg)
        tr, va = make_splits(cfg, op)
    theta0 = init_params(np.random.default_rng([cfg.seed, 11]), cfg.geometry, cfg.C, cfg.B,
                         cfg.train.skip_init)
    with open(out / "train_log.jsonl", "w") as f:
        def log_fn(rec):
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.flush()
            log.info("epoch %d: val NMSE %.3f dB, L_hat %.4f", rec["epoch"], rec.get("val_nmse_db", math.nan),
                     rec.get("L_hat", math.nan))
        theta, records = train(cfg.train, tr, op, theta0, va, log_fn=log_fn)
    save_checkpoint(out / "model.ckpt", theta, cfg.geometry, {"config_digest": cfg.digest()})
    return {"best_val_nmse_db": min(r["val_nmse_db"] for r in records)}


def cmd_eval(args, cfg, out: Path):
    op = make_operator(cfg)
    theta = _checkpoint(args, cfg) if "fpn_oamp" in cfg.methods else None
    rows = eval_nmse(cfg, op, theta)
    write_csv(out / "eval.csv", EVAL_HEADER, rows, args.deterministic)


def cmd_trace(args, cfg, out: Path):
    op = make_operator(cfg)
    rows = convergence_trace(cfg, op, _checkpoint(args, cfg), args.snr, args.iters)
    write_csv(out / "trace.csv", TRACE_HEADER, rows)


def cmd_farfield_error(args, cfg, out: Path):
    multiples = np.logspace(-2, 2, args.points)
    rows = farfield_error_curve({"reference": REFERENCE_GEOMETRY, cfg.name: cfg.geometry}, multiples)
    write_csv(out / "farfield_error.csv", FARFIELD_HEADER, rows)


def cmd_ood(args, cfg, out: Path):
    source = _checkpoint(args, cfg)
    shifts = default_shifts(cfg)
    if args.shifts:
        wanted = set(args.shifts)
        unknown = wanted - {s.id for s in shifts}
        for name in sorted(unknown):
            log.warning("unknown shift %s skipped", name)
        shifts = [s for s in shifts if s.id in wanted]
    in_dist = (lambda tcfg, op: train_model(tcfg, op)[0]) if args.train_in_dist else None
    ood = cfg.ood
    rows = ood_suite(cfg, source, shifts, in_dist, test_snr_db=ood.get("test_snr_db", 15.0),
                     n_test=ood.get("n_test"), adapt_steps=ood.get("adapt_steps", 5),
                     adapt_lr=ood.get("adapt_lr", 1e-3), adapt_samples=ood.get("adapt_samples"))
    write_csv(out / "ood.csv", OOD_HEADER, rows)


def cmd_wideband(args, cfg, out: Path):
    op = make_operator(cfg)
    wb = WidebandConfig(args.K or cfg.wideband.K, args.bandwidth or cfg.wideband.bandwidth)
    rows = wideband_eval(cfg, op, _checkpoint(args, cfg), wb, args.snr)
    write_csv(out / "wideband.csv", WIDEBAND_HEADER, rows)


def cmd_adapt(args, cfg, out: Path):
    theta = _checkpoint(args, cfg)
    tcfg = cfg.replace(pilot=PilotConfig(args.Q or cfg.pilot.Q, cfg.pilot.resolution))
    op = make_operator(tcfg)
    ds = make_test_set(tcfg, op, args.snr, n=args.n)
    before = nmse_db(run_method("fpn_oamp", tcfg, op, ds, theta).h, ds.h)
    after = adapted_nmse(theta, op, ds, tcfg, args.steps, args.lr)
    write_csv(out / "adapt.csv", ("Q", "steps", "nmse_before_db", "nmse_after_db"),
              [(tcfg.pilot.Q, args.steps, before, after)])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpn-oamp", description="Fixed-point-network channel estimation experiments")
    p.add_argument("--config", help="JSON config file, or 'desk' / 'full' for the built-in presets")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="byte-reproducible outputs (timing columns and timestamps blanked)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write the operator and dataset files")
    s.add_argument("--splits", nargs="+", default=["train", "val", "test"], choices=["train", "val", "test"])
    s = sub.add_parser("train", help="train the denoiser; writes model.ckpt and train_log.jsonl")
    s.add_argument("--data", help="directory from gen-data (default: generate in memory)")
    for name, helptext in (("eval", "NMSE vs SNR table"), ("trace", "per-iteration NMSE and residual"),
                           ("ood", "OoD generalization suite"), ("wideband", "per-subcarrier NMSE"),
                           ("adapt", "self-adaptation on a pilot-length shift")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", help="model file (default: <out>/model.ckpt)")
        if name == "trace":
            s.add_argument("--snr", type=float, default=15.0)
            s.add_argument("--iters", type=int)
        if name == "ood":
            s.add_argument("--shifts", nargs="*", help="shift ids (default: all)")
            s.add_argument("--train-in-dist", action="store_true",
                           help="train a target-distribution model per shift for the in-distribution column")
        if name == "wideband":
            s.add_argument("--K", type=int)
            s.add_argument("--bandwidth", type=float, help="Hz")
            s.add_argument("--snr", type=float, default=15.0)
        if name == "adapt":
            s.add_argument("--Q", type=int, help="target pilot length")
            s.add_argument("--steps", type=int, default=5)
            s.add_argument("--lr", type=float, default=1e-3)
            s.add_argument("--snr", type=float, default=15.0)
            s.add_argument("--n", type=int, default=100)
    s = sub.add_parser("farfield-error", aliases=["fig2"], help="far-field approximation error vs distance")
    s.add_argument("--points", type=int, default=41)
    sub.add_parser("write-config", help="dump the resolved config as JSON")
    return p


ALIASES = {"fig2": "farfield-error"}
COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "trace": cmd_trace,
            "farfield-error": cmd_farfield_error, "ood": cmd_ood, "wideband": cmd_wideband, "adapt": cmd_adapt}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args.command = ALIASES.get(args.command, args.command)
        if args.command == "write-config":
            save_config(out / "config.json", cfg)
            return 0
        extra = COMMANDS[args.command](args, cfg, out) or {}
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_manifest(out / f"{args.command}_manifest.json", cfg, args.command, extra, args.deterministic)
    return 0


if __name__ == "__main__":
    sys.exit(main())
