"""Command-line entry point: ``recsim-profiles <command> --config cfg.yaml``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 backend
failure or retry exhaustion (including an aborted profile run).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import BackendError, ConfigError, DataError, DecisionError, RecsimError, StageError
from ..profiles.types import TASK_FAMILIES
from ..synthetic import write_synthetic_movielens
from .config import ExperimentConfig, load_config
from .report import write_report
from .runner import Experiment

logger = logging.getLogger("recsim_profiles")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
PROBE_CHOICES = ("position", "popularity", "attributes", "history-sweep")


def _common(p: argparse.ArgumentParser, *, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (YAML or JSON)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--backend-override", choices=("live", "scripted", "replay"), help="swap the backend kind")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recsim-profiles", description="Task-aligned user profiles for LLM recommender simulation.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("ingest", help="parse, split and persist the dataset"))

    prof = sub.add_parser("profiles", help="profile generation")
    prof_sub = prof.add_subparsers(dest="action", required=True)
    gen = prof_sub.add_parser("generate", help="generate profiles for every configured generator")
    _common(gen)

    ev = sub.add_parser("eval", help="run a simulation task and write reports")
    ev.add_argument("family", choices=TASK_FAMILIES)
    _common(ev)

    pr = sub.add_parser("probe", help="run a bias or sensitivity probe")
    pr.add_argument("kind", choices=PROBE_CHOICES)
    _common(pr)

    rep = sub.add_parser("report", help="merge report cells into summary tables")
    _common(rep, config_required=False)

    syn = sub.add_parser("synth", help="write the synthetic MovieLens-format dataset")
    syn.add_argument("directory")
    syn.add_argument("--users", type=int, default=20)
    syn.add_argument("--items", type=int, default=200)
    syn.add_argument("--seed", type=int, default=7)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(out=args.out, backend=args.backend_override, seed=args.seed)


def run(args, *, backend=None) -> int:
    """Dispatch a parsed command; ``backend`` replaces the configured one (tests)."""
    if args.command == "synth":
        rp, mp = write_synthetic_movielens(args.directory, n_users=args.users, n_items=args.items, seed=args.seed)
        print(f"wrote {rp} and {mp}")
        return EXIT_OK

    if args.command == "report":
        if args.out:
            out = Path(args.out)
        elif args.config:
            out = _config(args).out_path
        else:
            raise ConfigError("report needs --out or --config")
        txt, _ = write_report(out)
        print(txt.read_text(encoding="utf-8"), end="")
        return EXIT_OK

    cfg = _config(args)
    exp = Experiment(cfg, backend=backend)
    if args.command == "ingest":
        result = exp.ingest()
    elif args.command == "profiles":
        result = exp.generate_profiles()
    elif args.command == "eval":
        records = exp.evaluate(args.family)
        result = _summarise(records)
    else:
        result = _summarise(exp.probe(args.kind))
    print(json.dumps(result, sort_keys=True, indent=2))
    return EXIT_OK


def _summarise(records: list[dict]) -> list[dict]:
    return [
        {**{k: v for k, v in r["labels"].items() if v}, "metric": r["metric"], "mean": r["mean"], "std": r["std"],
         "errors": r["accounting"]["errors"]}
        for r in records
    ]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except BackendError as exc:
        logger.error("backend error: %s", exc)
        return EXIT_BACKEND
    except (StageError, DecisionError, RecsimError) as exc:
        logger.error("%s", exc)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
