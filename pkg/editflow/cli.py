"""Command-line entry: train, sample, coupling-heatmap, verify.

Exit codes: 0 success, 1 failed checks or runtime error, 2 usage or config error.
"""
import argparse
import logging
import sys
from typing import Dict, List, Optional

from editflow import EditFlowPipeline
from editflow.structures import ConfigError, EditFlowError
from editflow.utils.config_ops import load_config, load_environment, log_level
from editflow.variables import suite_mapping

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if args.preset:
        out["run.preset"] = args.preset
    if args.seed is not None:
        out["train.seed"] = str(args.seed)
        out["sampler.seed"] = str(args.seed)
    if getattr(args, "count", None) is not None:
        out["run.count"] = str(args.count)
    if getattr(args, "checkpoint", None):
        out["run.checkpoint"] = args.checkpoint
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="editflow", description="Edit Flows: train, sample and verify edit-based CTMC models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="Flat section.key=value config file")
        p.add_argument("--preset", help="Start from a named preset (e.g. coupling_toy)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override one config key")
        p.add_argument("--seed", type=int, help="Seed for training and sampling")
        p.add_argument("--out", help="Output file path")

    p = sub.add_parser("train", help="Train a rate model and write a checkpoint plus metrics")
    common(p)

    p = sub.add_parser("sample", help="Write generation traces from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="Checkpoint to sample from")
    p.add_argument("--count", type=int, help="Number of traces")

    p = sub.add_parser("coupling-heatmap", help="Estimate the learned coupling p1(x1|x0) as CSV")
    common(p)
    p.add_argument("--checkpoint", help="Checkpoint to sample from")
    p.add_argument("--count", type=int, help="Samples per source string")

    p = sub.add_parser("verify", help="Run verifier suites")
    common(p)
    p.add_argument("--suite", action="append", help=f"Suite to run, repeatable: {', '.join(suite_mapping)}")
    p.add_argument("--samples", type=int, help="Monte-Carlo sample count for the statistical suites")
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    pipeline = EditFlowPipeline(config)
    try:
        if args.command == "train":
            artifacts = pipeline.train(out=args.out)
            print(artifacts.checkpoint_path)
        elif args.command == "sample":
            print(pipeline.sample(out=args.out))
        elif args.command == "coupling-heatmap":
            path, reference, _ = pipeline.coupling_heatmap(out=args.out)
            print(path)
            print(reference)
        elif args.command == "verify":
            suites = args.suite or None
            if suites:
                unknown = [s for s in suites if s not in suite_mapping]
                if unknown:
                    raise ConfigError(f"Unknown suite(s) {unknown}; choose from {sorted(suite_mapping)}")
            seed = args.seed if args.seed is not None else 0
            report, path = pipeline.verify(suites, seed=seed, samples=args.samples, out=args.out)
            print(path)
            return EXIT_OK if report.passed else EXIT_FAILED
    finally:
        pipeline.close_cache()
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    logging.basicConfig(level=log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        print(f"editflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except EditFlowError as e:
        print(f"editflow: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED
