"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 verification
failure (gradcheck above tolerance). Log verbosity comes from MCP_LOG_LEVEL
(error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .config import RunConfig, load_run_config, load_synth_spec
from .errors import ConfigError, DegenerateInputError, InvalidArgumentError, StreamFormatError
from .synth import SynthSpec, synth_stream

log = logging.getLogger("mcptta")


def _setup_logging() -> None:
    level = os.environ.get("MCP_LOG_LEVEL", "warn").lower()
    levels = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    if level not in levels:
        raise ConfigError(f"MCP_LOG_LEVEL must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _add_toggles(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=("mcp", "mcp++"), default=None)
    parser.add_argument("--seed", type=int, default=None)
    for flag in (
        "entropy-cache",
        "align-cache",
        "negative-cache",
        "text-term",
        "visual-term",
        "cache-term",
        "align-loss",
        "contrast-loss",
    ):
        parser.add_argument(f"--no-{flag}", action="store_true")
    parser.add_argument("--persist-residuals", action="store_true")
    parser.add_argument("--view-average", action="store_true")
    parser.add_argument("--emit-terms", action="store_true")


def _config_from_args(args) -> RunConfig:
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag, field in (
        ("no_entropy_cache", "use_entropy_cache"),
        ("no_align_cache", "use_align_cache"),
        ("no_negative_cache", "use_negative_cache"),
        ("no_text_term", "use_text_term"),
        ("no_visual_term", "use_visual_term"),
        ("no_cache_term", "use_cache_term"),
        ("no_align_loss", "use_align_loss"),
        ("no_contrast_loss", "use_contrast_loss"),
    ):
        if getattr(args, flag):
            overrides[field] = False
    for flag in ("persist_residuals", "view_average", "emit_terms"):
        if getattr(args, flag):
            overrides[flag] = True
    if args.config:
        return load_run_config(args.config, overrides)
    try:
        return dataclasses.replace(RunConfig(), **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_run(args) -> int:
    from .runner import run

    cfg = _config_from_args(args)
    summary_path = args.out + ".summary.json" if args.out else None
    result = run(cfg, args.stream, jsonl_path=args.out, summary_path=summary_path)
    _print_json(result)
    return 0


def cmd_synth(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = load_synth_spec(args.config, overrides) if args.config else SynthSpec(**overrides)
    count = synth_stream(args.out, spec)
    log.info("wrote %d records to %s", count, args.out)
    _print_json({"records": count, "out": args.out})
    return 0


def cmd_gradcheck(args) -> int:
    from .tuning import gradcheck_report

    report = gradcheck_report(n_instances=args.instances, seed=args.seed)
    _print_json(
        {
            "instances": report.instances,
            "max_rel_error": report.max_rel_error,
            "per_term": report.per_term,
            "seconds": report.seconds,
            "tolerance": args.tolerance,
        }
    )
    if report.max_rel_error >= args.tolerance:
        log.error("gradient check failed: %.3e >= %.1e", report.max_rel_error, args.tolerance)
        return 4
    return 0


def cmd_compactness(args) -> int:
    from .metrics import compactness
    from .stream_io import read_stream

    header, records = read_stream(args.stream)
    feats, labels = [], []
    for rec in records:
        if rec.label is not None:
            feats.append(rec.views[0])
            labels.append(rec.label)
    if not feats:
        raise InvalidArgumentError("stream has no labeled records")
    rep = compactness(np.stack(feats), np.array(labels))
    _print_json(
        {
            "per_class_mean_dist": {str(k): v for k, v in rep.per_class_mean_dist.items()},
            "mean_dist": rep.mean_dist,
            "compactness": rep.compactness if rep.compactness != float("inf") else "inf",
        }
    )
    return 0


def cmd_pearson(args) -> int:
    # correlates the last two columns of a CSV, skipping non-numeric rows
    from .metrics import pearson

    xs, ys = [], []
    with open(args.infile, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if len(row) < 2:
                continue
            try:
                x, y = float(row[-2]), float(row[-1])
            except ValueError:
                continue  # header or comment row
            xs.append(x)
            ys.append(y)
    r, p = pearson(xs, ys)
    _print_json({"n": len(xs), "r": r, "p_value": p})
    return 0


def cmd_fig2(args) -> int:
    from .metrics import compactness_gain_sweep

    cfg = _config_from_args(args)
    report = compactness_gain_sweep(seed=args.seed if args.seed is not None else 0, config=cfg)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", "compactness", "gain_points"])
            for i, pt in enumerate(report.points):
                writer.writerow([i, pt.compactness_test, pt.gain_points])
    _print_json(
        {
            "points": [
                {
                    "spread": pt.spread,
                    "compactness_test": pt.compactness_test,
                    "compactness_cached": pt.compactness_cached,
                    "zero_shot_acc": pt.zero_shot_acc,
                    "adapted_acc": pt.adapted_acc,
                    "gain_points": pt.gain_points,
                }
                for pt in report.points
            ],
            "pearson_test": {"r": report.correlation_test.r, "p": report.correlation_test.p_value},
            "pearson_cached": (
                {"r": report.correlation_cached.r, "p": report.correlation_cached.p_value}
                if report.correlation_cached
                else None
            ),
        }
    )
    return 0


def cmd_theory(args) -> int:
    from .theory import MixtureSpec, density_constants_sim, retention_ratio_sim

    seeds = range(args.seeds)
    retention = [
        retention_ratio_sim(args.n, 0.3, 0.5, seed=s) for s in seeds
    ]
    max_gap = max(r.gap for r in retention)
    mixture = MixtureSpec.standard()
    density = []
    for d0 in (0.7585, 1.1774, 1.6651):  # 25th/50th/75th percentile radii
        rep = density_constants_sim(mixture, d0=d0, seed=args.seeds)
        row = dataclasses.asdict(rep)
        row["dominates"] = rep.dominates
        density.append(row)
    _print_json(
        {
            "retention": {
                "n": args.n,
                "seeds": args.seeds,
                "max_gap": max_gap,
                "gaps": [r.gap for r in retention],
            },
            "density": density,
        }
    )
    return 0


def cmd_gridsearch(args) -> int:
    from .runner import grid_search

    cfg = _config_from_args(args)

    def grid(text: str | None) -> list[float] | None:
        if text is None:
            return None
        try:
            return [float(v) for v in text.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"bad grid {text!r}") from e

    best, table = grid_search(
        cfg,
        args.stream,
        alpha1_grid=grid(args.alpha1),
        alpha2_grid=grid(args.alpha2),
        alpha3_grid=grid(args.alpha3),
        w_grid=grid(args.w),
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha1", "alpha2", "alpha3", "w", "accuracy"])
            for row in table:
                writer.writerow([row["alpha1"], row["alpha2"], row["alpha3"], row["w"], row["accuracy"]])
    _print_json({"best": best, "rows": len(table)})
    return 0


def cmd_snapshot(args) -> int:
    from .stream_io import load_bank, save_bank

    if args.inspect:
        bank = load_bank(args.inspect)
        _print_json(
            {
                "classes": bank.num_classes,
                "dim": bank.dim,
                "enabled": bank.enabled,
                "occupancy": bank.occupancy(),
            }
        )
        return 0
    from .runner import run

    cfg = _config_from_args(args)
    summary, bank = run(cfg, args.stream, return_bank=True)
    save_bank(args.out, bank)
    _print_json({"snapshot": args.out, "occupancy": bank.occupancy()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcptta",
        description="Online multi-cache prototype adaptation over embedding streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="adapt over a stream and report accuracy")
    p.add_argument("--config", default=None)
    p.add_argument("--stream", required=True)
    p.add_argument("--out", default=None, help="JSONL output path")
    _add_toggles(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic labeled stream")
    p.add_argument("--config", default=None, help="synthesis spec key=value file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compactness", help="per-class compactness of a labeled stream")
    p.add_argument("--stream", required=True)
    p.set_defaults(func=cmd_compactness)

    p = sub.add_parser("pearson", help="correlation of a two-column CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.set_defaults(func=cmd_pearson)

    p = sub.add_parser("fig2", help="compactness-versus-gain spread sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="CSV output path")
    _add_toggles(p)
    p.set_defaults(func=cmd_fig2)

    p = sub.add_parser("theory", help="retention-ratio and density-constant simulations")
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("gridsearch", help="exhaustive fusion-weight search")
    p.add_argument("--config", default=None)
    p.add_argument("--stream", required=True)
    p.add_argument("--out", default=None, help="CSV table path")
    p.add_argument("--alpha1", default=None, help="comma-separated grid; config value if omitted")
    p.add_argument("--alpha2", default=None)
    p.add_argument("--alpha3", default=None)
    p.add_argument("--w", default=None)
    _add_toggles(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("snapshot", help="save or inspect a cache-bank snapshot")
    p.add_argument("--config", default=None)
    p.add_argument("--stream", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--inspect", default=None, help="snapshot file to summarize")
    _add_toggles(p)
    p.set_defaults(func=cmd_snapshot)

    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        if args.command == "snapshot" and not args.inspect:
            if not (args.stream and args.out):
                raise ConfigError("snapshot needs either --inspect or --stream and --out")
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (StreamFormatError, InvalidArgumentError, DegenerateInputError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
