"""The streaming run loop: drives per-sample prediction over a stream in
arrival order, emits one JSON line per sample, and aggregates a summary.

Output is deterministic: the same (config, stream, seed) produces identical
JSONL bytes. Wall time lives only in the summary.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from typing import Iterable, Iterator, TextIO

from .caches import CACHE_KINDS, CacheBank
from .config import RunConfig
from .inference import predict
from .prototypes import PrototypeState, text_prototypes
from .stream_io import SampleRecord, StreamHeader, read_stream
from .tuning import OptimizerState

log = logging.getLogger("mcptta")


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_records(
    cfg: RunConfig,
    header: StreamHeader,
    records: Iterator[SampleRecord],
    jsonl_out: TextIO | None = None,
    return_bank: bool = False,
):
    """Drive the engine over an already-open record iterator.

    Returns the summary dict, or (summary, bank) when return_bank is set.
    """
    hp = cfg.to_hyperparams()
    settings = cfg.to_settings()
    t_start = time.perf_counter()
    log.info(
        "starting %s run: %d classes, dimension %d",
        cfg.mode, header.num_classes, header.dim,
    )

    text = text_prototypes(header.prompts)
    state = PrototypeState.initial(text)
    bank = CacheBank(header.num_classes, header.dim, hp, enabled=cfg.cache_flags())
    opt = OptimizerState.zeros(header.num_classes, header.dim)

    seen = 0
    labeled = 0
    correct = 0
    for seq, rec in enumerate(records):
        breakdown = predict(rec.views, state, bank, hp, settings, opt)
        seen += 1
        if rec.label is not None:
            labeled += 1
            correct += int(breakdown.pred == rec.label)
        if jsonl_out is not None:
            line = {
                "seq": seq,
                "pred": breakdown.pred,
                "label": rec.label,
                "running_accuracy": (correct / labeled) if labeled else None,
                "cache_occupancy": bank.occupancy(),
            }
            if cfg.emit_terms:
                line["text_term"] = breakdown.text_term.tolist()
                line["visual_neg_term"] = breakdown.visual_neg_term.tolist()
                line["cache_term"] = breakdown.cache_term.tolist()
                line["fused"] = breakdown.fused.tolist()
            jsonl_out.write(_json_line(line) + "\n")

    summary = {
        "samples": seen,
        "labeled": labeled,
        "accuracy": (correct / labeled) if labeled else None,
        "mode": cfg.mode,
        "toggles": {
            "entropy_cache": cfg.use_entropy_cache,
            "align_cache": cfg.use_align_cache,
            "negative_cache": cfg.use_negative_cache,
            "text_term": cfg.use_text_term,
            "visual_term": cfg.use_visual_term,
            "cache_term": cfg.use_cache_term,
            "align_loss": cfg.use_align_loss,
            "contrast_loss": cfg.use_contrast_loss,
        },
        "cache_occupancy": bank.occupancy(),
        "cache_turnover": {
            kind: {
                "admissions": bank.counters[kind].admissions,
                "replacements": bank.counters[kind].replacements,
                "rejections": bank.counters[kind].rejections,
                "discards": bank.counters[kind].discards,
                "reconsiders": bank.counters[kind].reconsiders,
            }
            for kind in CACHE_KINDS
        },
        "warnings": {
            "skipped_nonfinite_grads": opt.skipped,
            "contrast_clamps": opt.clamps,
        },
        "wall_time_s": time.perf_counter() - t_start,
    }
    log.info(
        "finished %d samples, accuracy %s, occupancy %s",
        seen, summary["accuracy"], summary["cache_occupancy"],
    )
    if return_bank:
        return summary, bank
    return summary


def run(
    cfg: RunConfig,
    stream_path: str,
    jsonl_path: str | None = None,
    summary_path: str | None = None,
    return_bank: bool = False,
):
    """Run over a stream file, optionally writing JSONL and summary files."""
    header, records = read_stream(stream_path)
    out = None
    try:
        if jsonl_path:
            out = open(jsonl_path, "w", encoding="utf-8")
        result = run_records(cfg, header, records, out, return_bank=return_bank)
    finally:
        if out:
            out.close()
    summary = result[0] if return_bank else result
    if summary_path:
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def zero_shot_config(base: RunConfig | None = None) -> RunConfig:
    """The text-only baseline: no caches, no visual or retrieval terms."""
    base = base or RunConfig()
    return dataclasses.replace(
        base,
        mode="mcp",
        use_visual_term=False,
        use_cache_term=False,
        use_entropy_cache=False,
        use_align_cache=False,
        use_negative_cache=False,
    )


def grid_search(
    cfg: RunConfig,
    stream_path: str,
    alpha1_grid: Iterable[float] | None = None,
    alpha2_grid: Iterable[float] | None = None,
    alpha3_grid: Iterable[float] | None = None,
    w_grid: Iterable[float] | None = None,
) -> tuple[dict, list[dict]]:
    """Exhaustive accuracy search over fusion weights and the center blend.

    Axes left unspecified stay at the config's value. Ties break toward the
    earlier point in lexicographic grid order. Records are loaded once and
    replayed per combination.
    """
    alpha1_grid = (cfg.alpha1,) if alpha1_grid is None else alpha1_grid
    alpha2_grid = (cfg.alpha2,) if alpha2_grid is None else alpha2_grid
    alpha3_grid = (cfg.alpha3,) if alpha3_grid is None else alpha3_grid
    w_grid = (cfg.w,) if w_grid is None else w_grid
    header, records = read_stream(stream_path)
    materialized = list(records)
    table = []
    best = None
    for a1, a2, a3, w in itertools.product(
        list(alpha1_grid), list(alpha2_grid), list(alpha3_grid), list(w_grid)
    ):
        combo_cfg = dataclasses.replace(cfg, alpha1=a1, alpha2=a2, alpha3=a3, w=w)
        summary = run_records(combo_cfg, header, iter(materialized))
        row = {
            "alpha1": a1,
            "alpha2": a2,
            "alpha3": a3,
            "w": w,
            "accuracy": summary["accuracy"],
        }
        table.append(row)
        if best is None or (
            row["accuracy"] is not None and row["accuracy"] > best["accuracy"]
        ):
            best = row
    return best, table
