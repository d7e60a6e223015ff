"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import write_curve
from .env import ConfigError
from .estimators import DiffCarl, RLBaseline
from .harness import (
    ALGORITHMS,
    BUDGETS,
    LEARNERS,
    ExperimentConfig,
    load_experiment,
    make_estimator,
    run_carbon_study,
    run_comparison,
    run_risk_sweep,
)
from .profiles import nominal_profile, split_train_test, synthesize, write_csv

logger = logging.getLogger("diffcarl")


def _common(suppress: bool) -> argparse.ArgumentParser:
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d, help="experiment TOML file")
    p.add_argument("--seed", metavar="INT", type=int, default=d, help="run this seed only")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")
    p.add_argument("--algo", metavar="TAG", default=d, help=f"algorithm, one of {', '.join(ALGORITHMS)}")
    p.add_argument("--budget", choices=sorted(BUDGETS), default=d, help="desk (E=200, C=240) or full (E=2000, C=1000)")
    p.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffcarl",
        description="Microgrid scheduling experiments with diffusion-policy RL and classical baselines.",
        parents=[_common(False)],
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    flags = [_common(True)]
    s = sub.add_parser("synth", parents=flags, help="write a synthetic profile and its train/test split")
    s.add_argument("--days", type=int, default=31, help="days to generate (default 31)")
    s.add_argument("--start", default="2024-01-01", help="first day (default 2024-01-01)")
    s.add_argument("--noise", type=float, default=0.2, help="multiplicative noise level (default 0.2)")
    sub.add_parser("train", parents=flags, help="train one learner and save its checkpoint and curve")
    e = sub.add_parser("evaluate", parents=flags, help="evaluate an algorithm on the test days")
    e.add_argument("--checkpoint", metavar="PATH", help="trained learner checkpoint (learners only)")
    sub.add_parser("compare", parents=flags, help="run the full comparison table")
    sub.add_parser("sweep-risk", parents=flags, help="DiffCarl over the risk weights")
    sub.add_parser("sweep-carbon", parents=flags, help="carbon-aware versus carbon-unaware DiffCarl")
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = load_experiment(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.out is not None:
        changes["out"] = args.out
    if args.budget is not None:
        changes["budget"] = args.budget
    if args.algo is not None and args.command == "compare":
        tags = [t.strip() for t in args.algo.split(",") if t.strip()]
        unknown = [t for t in tags if t not in ALGORITHMS]
        if unknown:
            raise ConfigError(f"unknown algorithm(s) {unknown}")
        changes["algorithms"] = {t: cfg.algorithms.get(t, {}) for t in tags}
    return cfg.with_(**changes) if changes else cfg


def _algo(args, default: str = "diffcarl") -> str:
    tag = args.algo or default
    if tag not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {tag!r}; expected one of {', '.join(ALGORITHMS)}")
    return tag


def cmd_synth(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    if args.days < 1:
        raise ConfigError("--days must be >= 1")
    profile = synthesize(nominal_profile(args.start, args.days), args.noise, seed)
    write_csv(profile, out / "profile.csv")
    try:
        train, test = split_train_test(profile)
    except ValueError as exc:
        logger.warning("no train/test split written: %s", exc)
    else:
        write_csv(train, out / "train.csv")
        write_csv(test, out / "test.csv")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    tag = _algo(args)
    if tag not in LEARNERS:
        raise ConfigError(f"{tag!r} is not a learner; nothing to train")
    out = Path(cfg.out)
    train, test = cfg.profile_split()
    for seed in cfg.seeds:
        est = make_estimator(tag, cfg.mgc_config(), seed, cfg.learner_params(tag))
        est.fit(train, eval_X=test)
        est.save(out / f"{tag}_seed{seed}.npz")
        write_curve(est.learning_curve_, out / f"{tag}_seed{seed}_curve.csv")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _experiment(args)
    tag = _algo(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _, test = cfg.profile_split()
    for seed in cfg.seeds:
        if tag in LEARNERS:
            if not args.checkpoint:
                raise ConfigError("evaluating a learner needs --checkpoint")
            cls = DiffCarl if tag == "diffcarl" else RLBaseline
            est = cls.load(args.checkpoint)
        else:
            est = make_estimator(tag, cfg.mgc_config(), seed, cfg.algorithms.get(tag, {})).fit()
        dist = est.evaluate(test, seed=seed)
        dist.per_day.to_csv(out / f"{tag}_seed{seed}_days.csv", index=False, float_format="%.10g", lineterminator="\n")
        dist.summary_frame().to_csv(out / f"{tag}_seed{seed}_summary.csv", index=False, float_format="%.10g",
                                    lineterminator="\n")
    return 0


def cmd_compare(args) -> int:
    cfg = _experiment(args)
    table = run_comparison(cfg)
    print(table.to_string(index=False))
    return 0


def cmd_sweep_risk(args) -> int:
    print(run_risk_sweep(_experiment(args)).to_string(index=False))
    return 0


def cmd_sweep_carbon(args) -> int:
    print(run_carbon_study(_experiment(args)).to_string(index=False))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "sweep-risk": cmd_sweep_risk,
    "sweep-carbon": cmd_sweep_carbon,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"diffcarl: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"diffcarl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
