"""Command line entry point: ``pipeline run|ablate|sweep|synth``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cache import CacheError
from .config import ABLATIONS, STAGES, PipelineConfig, load_config, parse_override
from .core import ConfigError, ValidationError
from .ingest import DatasetFormatError, save_dataset
from .nn import DivergenceError
from .pipeline import SWEEP_AXES, Pipeline, run_ablation, run_sweep
from .synthetic import generate_synthetic, load_synth_spec

log = logging.getLogger("metaobject")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig().validate()
    for item in args.set or ():
        cfg = parse_override(cfg, item)
    return cfg


def _add_common(p):
    p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. K=50, synth.seed=2, clusters.bottom=20")
    p.add_argument("--cache-dir", help="stage cache directory (default: <run dir>/cache)")


def cmd_run(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.run_dir)
    p = Pipeline(cfg, run_dir, args.cache_dir)
    if args.stage:
        p.run_stage(args.stage)
    else:
        p.run(args.until)
    for stage, status, secs in p.events:
        print(f"{stage:<10} {status:<8} {secs:7.2f}s")
    if p.is_cached("eval"):
        print(p.report().summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    full, abl = run_ablation(args.name, cfg, args.out, args.cache_dir)
    print(f"full       accuracy {full.accuracy:.4f}")
    print(f"{args.name:<10} accuracy {abl.accuracy:.4f}")
    return 0


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"--values must be a comma separated list of numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = run_sweep(args.axis, _parse_values(args.values), cfg, args.out, args.cache_dir)
    for v, acc in rows:
        print(f"{args.axis}={v:g} accuracy {acc:.4f}")
    print(f"wrote {Path(args.out) / f'sweep_{args.axis}.csv'}")
    return 0


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    ds, gt = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, binary = save_dataset(ds, out / args.name)
    gt_path = gt.save(out / f"{args.name}_ground_truth.npz")
    print(f"wrote {manifest}, {binary} and {gt_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipeline", description="Meta-object scene recognition pipeline.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for stage logs, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one stage or the stage chain")
    _add_common(p)
    p.add_argument("--stage", choices=STAGES, help="run only this stage (upstream stages must be cached)")
    p.add_argument("--until", choices=STAGES, default="eval", help="run the chain up to this stage (default eval)")
    p.add_argument("--run-dir", default="runs/default")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="full run and one ablated run side by side")
    _add_common(p)
    p.add_argument("--name", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one run per value along an axis, written to sweep_<axis>.csv")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma separated, e.g. 0,0.2,0.4,0.8")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic dataset and its ground-truth sidecar")
    p.add_argument("--spec", required=True, help="JSON file with SynthSpec fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="synthetic", help="file stem (default synthetic)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, DatasetFormatError, CacheError, DivergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
