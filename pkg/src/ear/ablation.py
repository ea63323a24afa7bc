"""Scripted ablation matrix: grid cross-products over pipeline settings.

Each cell runs pretrain -> emit pseudo-labels -> train parser -> parse ->
evaluate on a synthetic corpus, over one or more seeds. Stage-1 artifacts
are cached across cells that share the same stage-1 configuration. Cell
failures are recorded and the matrix continues.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError
from .generator import GeneratorConfig, PseudoLabelThresholds, generate_for_corpus
from .io import load_corpus
from .losses import LossConfig
from .metrics import binarize, evaluate_corpus
from .parser import ParserConfig, parse_corpus
from .training import MigrationParams, TrainConfig, config_hash, pretrain_generator, train_parser

log = logging.getLogger(__name__)

AXIS_NAMES = (
    "lm", "fusion", "erm", "erm_wiring", "m_layers",
    "mu_audio", "mu_visual", "lambda_audio", "lambda_visual", "loss_terms",
)
LOSS_TERM_NAMES = ("mix", "soft_audio", "soft_visual", "video")


def _cells(grid: dict) -> list[dict]:
    axes = grid.get("axes", {})
    unknown = set(axes) - set(AXIS_NAMES)
    if unknown:
        raise ConfigError(f"unknown ablation axes: {sorted(unknown)} (known: {AXIS_NAMES})")
    names = sorted(axes)
    combos = itertools.product(*(axes[n] for n in names)) if names else [()]
    return [dict(zip(names, combo)) for combo in combos]


def _cell_name(cell: dict, seed: int) -> str:
    parts = []
    for key in sorted(cell):
        val = cell[key]
        if isinstance(val, (list, tuple)):
            val = "+".join(map(str, val)) or "none"
        parts.append(f"{key}={val}")
    parts.append(f"seed={seed}")
    return "__".join(parts)


def _stage1_settings(cell: dict, grid: dict, seed: int):
    mig = MigrationParams(
        mu_audio=cell.get("mu_audio", MigrationParams.mu_audio),
        mu_visual=cell.get("mu_visual", MigrationParams.mu_visual),
        lambda_audio=cell.get("lambda_audio", MigrationParams.lambda_audio),
        lambda_visual=cell.get("lambda_visual", MigrationParams.lambda_visual),
    )
    if cell.get("lm") is False:
        mig = replace(mig, lambda_audio=0.0, lambda_visual=0.0)
    train = TrainConfig(**{**{"epochs": 20, "warmup_epochs": 2}, **grid.get("stage1", {}), "seed": seed})
    return mig, train


def _stage3_settings(cell: dict, grid: dict, seed: int, corpus):
    parser_kwargs = dict(grid.get("parser", {}))
    parser_kwargs.update(
        dim_audio=corpus.dim_audio,
        dim_visual=corpus.dim_visual,
        num_classes=corpus.num_classes,
        seed=seed,
    )
    for key in ("fusion", "erm", "erm_wiring", "m_layers"):
        if key in cell:
            parser_kwargs[key] = cell[key]
    pcfg = ParserConfig(**parser_kwargs)
    tcfg = TrainConfig(**{**{"epochs": 20, "warmup_epochs": 2}, **grid.get("stage3", {}), "seed": seed})
    terms = cell.get("loss_terms", list(LOSS_TERM_NAMES))
    lcfg = LossConfig(
        use_mixup="mix" in terms,
        use_soft_audio="soft_audio" in terms,
        use_soft_visual="soft_visual" in terms,
        use_video="video" in terms,
    )
    return pcfg, tcfg, lcfg


def run_cell(cell: dict, seed: int, grid: dict, train_corpus, test_corpus, cache: dict) -> dict:
    mig, stage1_cfg = _stage1_settings(cell, grid, seed)
    gen_cfg = GeneratorConfig(
        dim_audio=train_corpus.dim_audio,
        dim_visual=train_corpus.dim_visual,
        seed=seed,
        **grid.get("generator", {}),
    )
    key = config_hash(mig.to_dict(), stage1_cfg.to_dict(), gen_cfg.to_dict())
    if key not in cache:
        model, _ = pretrain_generator(train_corpus, gen_cfg, stage1_cfg, mig)
        pseudo = generate_for_corpus(model, train_corpus, PseudoLabelThresholds())
        cache[key] = pseudo
    pseudo = cache[key]

    pcfg, tcfg, lcfg = _stage3_settings(cell, grid, seed, train_corpus)
    parser_model, _ = train_parser(train_corpus, pseudo, pcfg, tcfg, lcfg)
    preds = parse_corpus(parser_model, test_corpus, tau=0.5)
    gts = {v.video_id: (binarize(v.gt_audio), binarize(v.gt_visual)) for v in test_corpus.videos}
    report = evaluate_corpus(preds, gts)
    return report.to_dict()


def run_ablation_matrix(grid: dict, train_manifest: Path, test_manifest: Path, out_dir: Path) -> Path:
    """Run every grid cell over every seed; returns the roll-up CSV path."""
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    seeds = grid.get("seeds", [0, 1, 2])
    train_corpus = load_corpus(train_manifest)
    test_corpus = load_corpus(test_manifest)
    cache: dict = {}

    rows = []
    for cell in _cells(grid):
        for seed in seeds:
            name = _cell_name(cell, seed)
            cell_dir = out_dir / "cells" / name
            cell_dir.mkdir(parents=True, exist_ok=True)
            row = {k: json.dumps(v) if isinstance(v, list) else v for k, v in cell.items()}
            row["seed"] = seed
            try:
                report = run_cell(cell, seed, grid, train_corpus, test_corpus, cache)
                (cell_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
                for level in ("segment", "event"):
                    for metric, value in report[level].items():
                        row[f"{level}_{metric}"] = value
                row["average"] = report["average"]
                row["error"] = ""
            except Exception as exc:  # record and continue with the next cell
                log.error("cell %s failed: %s", name, exc)
                (cell_dir / "error.txt").write_text(traceback.format_exc())
                row["error"] = str(exc)
            rows.append(row)

    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return summary
