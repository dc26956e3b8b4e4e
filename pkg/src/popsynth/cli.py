"""Command-line entry point: ``popsynth <stage> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .fixture import generate_fixture
from .pipeline import STAGES, Pipeline, PipelineConfig, StageError


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                        help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="popsynth", parents=[common],
                                description="Synthesise joint population and trip-chain data.")
    sub = p.add_subparsers(dest="command", required=True)
    fx = sub.add_parser("fixture", parents=[common], help="write a synthetic survey fixture")
    fx.add_argument("--n-persons", type=int, default=5356)
    fx.add_argument("--n-zones", type=int, default=49)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    opts = vars(args)
    logging.basicConfig(level=logging.INFO if opts.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    seed = opts.get("seed")
    out = opts.get("out")

    if args.command == "fixture":
        out = out or Path("fixture")
        fx = generate_fixture(seed or 0, args.n_persons, args.n_zones)
        fx.write(out)
        cfg = {"data": {"persons": "persons.csv", "trips": "trips.csv", "zones": "zones.csv"},
               "seed": seed or 0, "out": "run"}
        (Path(out) / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
        print(f"fixture written to {out}")
        return 0

    try:
        if "config" in opts:
            cfg = PipelineConfig.load(opts["config"])
        else:
            cfg = PipelineConfig()
        if seed is not None:
            cfg.seed = seed
        if out is not None:
            cfg.out = str(out)
        pipe = Pipeline(cfg)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2

    stages = STAGES if args.command == "run" else (args.command,)
    try:
        for s in stages:
            pipe.run_stage(s)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    pipe.write_manifest()
    if "evaluate" in stages:
        report = json.loads(pipe.path("eval_report.json").read_text())
        for part in ("unconditional", "conditional"):
            s = report[part]["scores"]
            print(f"{part:13s} pearson={s['pearson']:.4f} r2={s['r2_zero_intercept']:.4f} "
                  f"srmse={s['srmse']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
