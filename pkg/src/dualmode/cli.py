"""Command-line entry point.

    dualmode all --config exp.yaml --seed 3 --out runs
    dualmode train --variant NoDualAdv --out runs
    dualmode compare runs/run_DualGRPO_seed0 runs/run_NoDualAdv_seed0 --out table.csv
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import plotting, runner
from .config import ExperimentConfig, load_config
from .core import ConfigError, ContractError

log = logging.getLogger("dualmode")

# stages each verb runs; earlier artifacts are reused when already present
VERB_STAGES = {
    "generate": ("generate",),
    "warmup": ("generate", "warmup"),
    "train": ("generate", "warmup", "train"),
    "eval": ("generate", "warmup", "train", "eval"),
    "sweep": ("generate", "warmup", "train", "sweep"),
    "all": runner.STAGES,
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the top-level seed and every derived sub-seed")
    p.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run directories")
    p.add_argument("--variant", help="override rl.variant")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmode", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "generate": "write the train, RL-pool and eval datasets",
        "warmup": "label demonstrations and fit the warm-up policy",
        "train": "run the RL stage from the warm-up checkpoint",
        "eval": "evaluate the trained policy (report, two-turn tables, mode regression)",
        "sweep": "mixed-ratio sweep against always-General and always-Personalized baselines",
        "all": "every stage in order",
    }
    for verb, text in helps.items():
        _add_run_flags(sub.add_parser(verb, help=text))
    cmp = sub.add_parser("compare", help="ablation table over finished run directories")
    cmp.add_argument("runs", nargs="+", type=Path)
    cmp.add_argument("--out", type=Path, default=Path("comparison.csv"), help="CSV path; a PNG is written beside it")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, variant=args.variant)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "compare":
            rows = runner.compare_runs(args.runs, args.out)
            plotting.plot_comparison(rows, args.out.with_suffix(".png"))
            print(args.out)
            return 0
        run_dir = runner.run_experiment(_config(args), args.out, VERB_STAGES[args.verb],
                                        figures=not args.no_figures)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
