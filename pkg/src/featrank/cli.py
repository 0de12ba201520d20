"""Command-line entry point.

    featrank experiment --config tables12.json --seed 7 --out runs/t12
    featrank rank --method sbs --config c.json --train.max_epochs=200

Any key of the flat config can be overridden with ``--dotted.key=value``
(values are parsed as JSON, falling back to a plain string). Precedence:
defaults < preset < config file < flags.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure
(including a diverged training cell).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from featrank import harness
from featrank.data import DataFormatError
from featrank.harness import ConfigError, ExperimentConfig
from featrank.nn import TrainingDivergedError
from featrank.selectors import METHODS, FeatureRanking, keep_count, top_bottom

log = logging.getLogger("featrank")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(extra: list[str]) -> dict:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise UsageError(f"unrecognized argument {arg!r} (overrides look like --key=value)")
        key, value = arg[2:].split("=", 1)
        if key not in harness.DEFAULTS:
            raise UsageError(f"unknown flag --{key}")
        out[key] = _parse_value(value)
    return out


def _load_config(args, extra) -> ExperimentConfig:
    file_layer = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_layer = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    flags = _overrides(extra)
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.out is not None:
        flags["out"] = args.out
    return ExperimentConfig.from_flat(harness.resolve_config(file_layer, flags))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def cmd_train(cfg: ExperimentConfig, args) -> int:
    result = harness.train_full(cfg)
    path = _write_json(Path(cfg.out) / "train.json", result)
    print(f"test accuracy {result['test_accuracy']:.4f} -> {path}")
    return 0


def cmd_rank(cfg: ExperimentConfig, args) -> int:
    ranking, info = harness.rank_features(cfg, args.method)
    path = _write_json(Path(cfg.out) / f"ranking_{args.method}.json",
                       {**ranking.to_dict(), "config": cfg.flat, **info})
    print(f"{args.method} ranking -> {path}")
    return 0


def cmd_experiment(cfg: ExperimentConfig, args) -> int:
    splits = harness.prepare_splits(cfg)
    grid = harness.grid_for(cfg, splits.feature_count)
    report = harness.run_experiment(cfg, splits)
    paths = harness.write_report(report, cfg.out, "report", grid)
    print(harness.render_markdown(report.data), end="")
    print(f"report -> {paths['json']}")
    return 2 if report.diverged else 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    if args.kind == "step-counter":
        report = harness.ablation_step_counter(cfg, steps=tuple(args.steps))
        name = "ablation_step_counter"
    else:
        report = harness.ablation_constraints(cfg, n=args.n)
        name = "ablation_constraints"
    paths = harness.write_report(report, cfg.out, name)
    print(harness.render_markdown(report.data), end="")
    print(f"report -> {paths['json']}")
    return 2 if report.diverged else 0


def _read_ranking(path) -> FeatureRanking:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"ranking file not found: {path}")
    try:
        return FeatureRanking.from_dict(json.loads(path.read_text()))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: not a ranking file ({exc})") from exc


def cmd_similarity(args) -> int:
    a, b = _read_ranking(args.ranking_a), _read_ranking(args.ranking_b)
    top_a, _ = top_bottom(a, args.fraction)
    top_b, _ = top_bottom(b, args.fraction)
    sim = harness.feature_similarity(top_a, top_b)
    result = {"a": str(args.ranking_a), "b": str(args.ranking_b), "fraction": args.fraction,
              "selected": keep_count(args.fraction, a.d), "similarity": sim}
    if args.out:
        _write_json(Path(args.out), result)
    print(f"{sim:.4f}")
    return 0


def cmd_export_mask(args) -> int:
    ranking = _read_ranking(args.ranking)
    try:
        h, w = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid must look like 28x28, got {args.grid!r}") from None
    if h * w != ranking.d:
        raise ConfigError(f"grid {h}x{w} does not cover {ranking.d} features")
    top, bottom = top_bottom(ranking, args.fraction)
    path = harness.export_mask(top if args.which == "top" else bottom, (h, w), args.out)
    print(f"mask -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featrank", description="Neural-network feature ranking and remove-and-retrain experiments.",
                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def configured(name, help_text):
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    configured("train", "train the full-feature network")
    p = configured("rank", "rank features with one method")
    p.add_argument("--method", required=True, choices=METHODS)
    configured("experiment", "rank, slice top/bottom, retrain and report")
    p = configured("ablate", "step-counter or penalty ablation of SWPA")
    p.add_argument("--kind", required=True, choices=("step-counter", "constraints"))
    p.add_argument("--steps", type=int, nargs=2, default=[1, 4], metavar=("N1", "N2"))
    p.add_argument("--n", type=int, default=1, help="step counter for the constraints ablation")

    p = sub.add_parser("similarity", help="overlap of the top fraction of two rankings", allow_abbrev=False)
    p.add_argument("ranking_a")
    p.add_argument("ranking_b")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--out", help="optional JSON output file")

    p = sub.add_parser("export-mask", help="write selected features of a ranking as a PGM", allow_abbrev=False)
    p.add_argument("--ranking", required=True)
    p.add_argument("--grid", default="28x28")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--which", choices=("top", "bottom"), default="top")
    p.add_argument("--out", required=True, help="PGM file to write")
    return parser


COMMANDS = {
    "train": cmd_train,
    "rank": cmd_rank,
    "experiment": cmd_experiment,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command == "similarity":
            if extra:
                raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_similarity(args)
        if args.command == "export-mask":
            if extra:
                raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_export_mask(args)
        cfg = _load_config(args, extra)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        message = str(exc)
        if "usage:" not in message:
            message = f"{parser.format_usage()}featrank: error: {message}"
        print(message, file=sys.stderr)
        return 1
    except (ConfigError, DataFormatError) as exc:
        print(f"featrank: config error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"featrank: invalid input: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"featrank: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("run failed")
        print(f"featrank: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
