"""Command-line entry point wiring the pipeline stages.

Subcommands: synth, migrate, pretrain, genlabels, train, parse, eval,
ablate. A JSON config file (--config) supplies flag values; explicit flags
override the config file, which overrides built-in defaults. Exit codes:
0 success, 1 validation error, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    ConfigError,
    ContractError,
    FormatError,
    IngestionError,
    NumericalAbort,
    ShapeError,
)

log = logging.getLogger("ear")

VALIDATION_ERRORS = (
    ConfigError, ContractError, FormatError, IngestionError,
    AlignmentError, ShapeError, FileNotFoundError, KeyError,
)


def _merge_config(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Fill unset flags from --config, then from built-in defaults."""
    file_values = {}
    if getattr(args, "config", None):
        file_values = json.loads(Path(args.config).read_text())
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config file keys: {sorted(unknown)}")
    for key, builtin in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, file_values.get(key, builtin))
    return args


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_synth(args) -> int:
    from .synth import SyntheticSpec, synthesize_corpus

    if args.spec == "default":
        spec = SyntheticSpec()
    else:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
    if args.seed is not None:
        spec.seed = args.seed
    train, test = synthesize_corpus(spec, args.out)
    log.info("synthesized corpus: %s, %s", train, test)
    print(json.dumps({"train": str(train), "test": str(test)}))
    return 0


def cmd_migrate(args) -> int:
    from .io import load_corpus, write_tensor
    from .migration import migrate_batch

    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in corpus.videos:
        if v.gt_audio is None or v.gt_visual is None:
            raise IngestionError(f"video {v.video_id} has no segment ground truth; cannot migrate")
    av = np.concatenate([v.gt_av for v in corpus.videos])
    summary = {}
    for modality, mu in (("audio", args.mu_a), ("visual", args.mu_v)):
        feats = np.concatenate([getattr(v, modality) for v in corpus.videos])
        result = migrate_batch(feats, av, mu)
        write_tensor(out / f"{modality}_labels.eart", result.labels)
        if args.dump:
            write_tensor(out / f"{modality}_similarity.eart", result.similarity)
            write_tensor(out / f"{modality}_mask.eart", result.mask)
            write_tensor(out / f"{modality}_raw_labels.eart", result.raw_labels)
            write_tensor(out / f"{modality}_duplicate_counts.eart", result.duplicate_counts)
        summary[modality] = {
            "threshold": mu,
            "segments": int(feats.shape[0]),
            "migrated_cells": int(np.sum((result.labels > 0) & (av == 0))),
        }
    _write_json(out / "migration.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _train_cfg_from(args, preset) -> "TrainConfig":
    from .training import TrainConfig

    cfg = preset() if callable(preset) else TrainConfig()
    fields = {
        "batch_size": args.batch_size, "epochs": args.epochs, "seed": args.seed,
        "warmup_epochs": args.warmup, "lr_peak": args.lr_peak, "lr_min": args.lr_min,
    }
    updates = {k: v for k, v in fields.items() if v is not None}
    return TrainConfig(**{**cfg.to_dict(), **updates})


def cmd_pretrain(args) -> int:
    from .generator import GeneratorConfig
    from .io import load_corpus
    from .training import (
        MigrationParams,
        paper_generator_schedule,
        pretrain_generator,
    )

    corpus = load_corpus(args.corpus)
    preset = paper_generator_schedule if args.preset == "paper" else None
    train_cfg = _train_cfg_from(args, preset)
    gen_cfg = GeneratorConfig(
        dim_audio=corpus.dim_audio,
        dim_visual=corpus.dim_visual,
        text_dim_audio=corpus.text_audio.shape[1] if corpus.text_audio is not None else None,
        text_dim_visual=corpus.text_visual.shape[1] if corpus.text_visual is not None else None,
        depth=args.depth,
        seed=train_cfg.seed,
    )
    mig = MigrationParams(
        mu_audio=args.mu_a, mu_visual=args.mu_v,
        lambda_audio=args.lambda_a, lambda_visual=args.lambda_v,
        per_video=args.per_video,
    )
    _, history = pretrain_generator(
        corpus, gen_cfg, train_cfg, mig, checkpoint_path=args.out
    )
    log.info("pre-training done: final loss %.5f", history[-1]["loss"])
    print(json.dumps({"model": str(args.out), "final_loss": history[-1]["loss"]}))
    return 0


def cmd_genlabels(args) -> int:
    from .generator import PseudoLabelThresholds, generate_for_corpus
    from .io import load_corpus, write_bundle
    from .training import build_generator_from_checkpoint, load_checkpoint

    payload = load_checkpoint(args.model)
    if payload.get("kind") != "generator":
        raise ConfigError(f"{args.model} is a {payload.get('kind')!r} checkpoint, expected generator")
    model = build_generator_from_checkpoint(payload)
    corpus = load_corpus(args.corpus)
    planes = generate_for_corpus(model, corpus, PseudoLabelThresholds(args.theta_a, args.theta_v))
    write_bundle(args.out, "pseudo", corpus.categories, planes)
    log.info("wrote pseudo-labels for %d videos to %s", len(planes), args.out)
    print(json.dumps({"pseudo": str(args.out), "videos": len(planes)}))
    return 0


def cmd_train(args) -> int:
    from .io import load_corpus, read_bundle
    from .losses import LossConfig
    from .parser import ParserConfig
    from .training import paper_parser_schedule, train_parser

    corpus = load_corpus(args.corpus)
    kind, _, pseudo = read_bundle(args.pseudo)
    if kind not in ("pseudo", "predictions"):
        raise ConfigError(f"{args.pseudo} is not a label bundle (kind={kind!r})")
    preset = paper_parser_schedule if args.preset == "paper" else None
    train_cfg = _train_cfg_from(args, preset)
    parser_cfg = ParserConfig(
        dim_audio=corpus.dim_audio,
        dim_visual=corpus.dim_visual,
        num_classes=corpus.num_classes,
        d_model=args.d_model,
        m_layers=args.m_layers,
        fusion=args.fusion,
        erm=args.erm,
        erm_wiring=args.erm_wiring,
        seed=train_cfg.seed,
    )
    loss_cfg = LossConfig(
        positive_scale=args.w,
        mixup_alpha=args.alpha,
        use_mixup=not args.no_mix,
        use_soft_audio=not args.no_soft_a,
        use_soft_visual=not args.no_soft_v,
        use_video=not args.no_video,
    )
    _, history = train_parser(
        corpus, pseudo, parser_cfg, train_cfg, loss_cfg, checkpoint_path=args.out
    )
    log.info("training done: final loss %.5f", history[-1]["loss"])
    print(json.dumps({"model": str(args.out), "final_loss": history[-1]["loss"]}))
    return 0


def cmd_parse(args) -> int:
    from .io import load_corpus, write_bundle
    from .parser import parse_corpus
    from .training import build_parser_from_checkpoint, load_checkpoint

    payload = load_checkpoint(args.model)
    if payload.get("kind") != "parser":
        raise ConfigError(f"{args.model} is a {payload.get('kind')!r} checkpoint, expected parser")
    model = build_parser_from_checkpoint(payload)
    corpus = load_corpus(args.corpus)
    planes = parse_corpus(model, corpus, tau=args.tau)
    write_bundle(args.out, "predictions", corpus.categories, planes)
    log.info("wrote predictions for %d videos to %s", len(planes), args.out)
    print(json.dumps({"predictions": str(args.out), "videos": len(planes)}))
    return 0


def _load_planes_for_eval(path: str, tau: float):
    """Accept either a label bundle or a corpus manifest with ground truth."""
    from .io import load_corpus, read_bundle
    from .metrics import binarize

    doc = json.loads(Path(path).read_text())
    if "videos" in doc and doc.get("kind"):
        _, _, planes = read_bundle(path)
        return {vid: (binarize(a, tau), binarize(v, tau)) for vid, (a, v) in planes.items()}
    corpus = load_corpus(path)
    out = {}
    for v in corpus.videos:
        if v.gt_audio is None or v.gt_visual is None:
            raise IngestionError(f"video {v.video_id} has no segment ground truth for evaluation")
        out[v.video_id] = (binarize(v.gt_audio, tau), binarize(v.gt_visual, tau))
    return out


def cmd_eval(args) -> int:
    from .metrics import evaluate_corpus, per_class_segment_f1

    preds = _load_planes_for_eval(args.pred, args.tau)
    gts = _load_planes_for_eval(args.gt, args.tau)
    report = evaluate_corpus(preds, gts, iou_min=args.iou)
    payload = report.to_dict()
    if args.dump_per_class:
        payload["per_class"] = per_class_segment_f1(preds, gts)
    if args.format == "json":
        text = json.dumps(payload, indent=1, sort_keys=True)
    elif args.format == "csv":
        cols = [f"{lvl}_{m}" for lvl in ("segment", "event") for m in ("audio", "visual", "av", "type", "event")]
        vals = [payload[lvl][m] for lvl in ("segment", "event") for m in ("audio", "visual", "av", "type", "event")]
        text = ",".join(cols + ["average"]) + "\n" + ",".join(f"{v:.6f}" for v in vals + [payload["average"]])
    else:
        text = report.table()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation_matrix

    grid = json.loads(Path(args.grid).read_text())
    corpus_dir = Path(args.corpus) if args.corpus else Path(grid["corpus"])
    summary = run_ablation_matrix(
        grid, corpus_dir / "train.json", corpus_dir / "test.json", Path(args.out)
    )
    log.info("ablation roll-up at %s", summary)
    print(json.dumps({"summary": str(summary)}))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file supplying flag defaults")
    sub.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="ear", description=__doc__)
    subs = root.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--spec", default="default", help="spec JSON path or 'default'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_common(p)
    p.set_defaults(fn=cmd_synth, defaults={})

    p = subs.add_parser("migrate", help="run label migration over a corpus and dump results")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mu-a", type=float, dest="mu_a")
    p.add_argument("--mu-v", type=float, dest="mu_v")
    p.add_argument("--dump", action="store_true", help="also write similarity/mask/count tensors")
    _add_common(p)
    p.set_defaults(fn=cmd_migrate, defaults={"mu_a": 0.98, "mu_v": 0.95})

    p = subs.add_parser("pretrain", help="pre-train the pseudo-label generator")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mu-a", type=float, dest="mu_a")
    p.add_argument("--mu-v", type=float, dest="mu_v")
    p.add_argument("--lambda-a", type=float, dest="lambda_a")
    p.add_argument("--lambda-v", type=float, dest="lambda_v")
    p.add_argument("--per-video", action="store_true", help="restrict migration pools to one video")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr-peak", type=float, dest="lr_peak")
    p.add_argument("--lr-min", type=float, dest="lr_min")
    p.add_argument("--depth", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=["desk", "paper"])
    _add_common(p)
    p.set_defaults(
        fn=cmd_pretrain,
        defaults={
            "mu_a": 0.98, "mu_v": 0.95, "lambda_a": 0.05, "lambda_v": 0.15,
            "depth": 2, "preset": "desk",
        },
    )

    p = subs.add_parser("genlabels", help="emit pseudo-labels with a frozen generator")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-a", type=float, dest="theta_a")
    p.add_argument("--theta-v", type=float, dest="theta_v")
    _add_common(p)
    p.set_defaults(fn=cmd_genlabels, defaults={"theta_a": 0.5, "theta_v": 0.5})

    p = subs.add_parser("train", help="train the parsing model against pseudo-labels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m-layers", type=int, dest="m_layers")
    p.add_argument("--fusion", choices=["amdf", "han", "msa-mca"])
    p.add_argument("--erm", choices=["interleaved", "stacked", "off"])
    p.add_argument("--erm-wiring", choices=["corrected", "literal"], dest="erm_wiring")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--w", type=float, help="positive-branch weight multiplier")
    p.add_argument("--alpha", type=float, help="mixup Beta shape")
    p.add_argument("--no-mix", action="store_true")
    p.add_argument("--no-soft-a", action="store_true")
    p.add_argument("--no-soft-v", action="store_true")
    p.add_argument("--no-video", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr-peak", type=float, dest="lr_peak")
    p.add_argument("--lr-min", type=float, dest="lr_min")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=["desk", "paper"])
    _add_common(p)
    p.set_defaults(
        fn=cmd_train,
        defaults={
            "m_layers": 3, "fusion": "amdf", "erm": "interleaved", "erm_wiring": "corrected",
            "d_model": 32, "w": 1.0, "alpha": 0.5, "preset": "desk",
        },
    )

    p = subs.add_parser("parse", help="parse a corpus with a frozen model")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, help="binarize predictions at this threshold")
    _add_common(p)
    p.set_defaults(fn=cmd_parse, defaults={"tau": None})

    p = subs.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True, help="label bundle")
    p.add_argument("--gt", required=True, help="corpus manifest or label bundle")
    p.add_argument("--iou", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--format", choices=["table", "json", "csv"])
    p.add_argument("--out", help="also write the report here")
    p.add_argument("--dump-per-class", action="store_true", dest="dump_per_class")
    _add_common(p)
    p.set_defaults(fn=cmd_eval, defaults={"iou": 0.5, "tau": 0.5, "format": "table"})

    p = subs.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="synth corpus directory (overrides grid)")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate, defaults={})

    return root


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _merge_config(args, args.defaults)
        return args.fn(args)
    except NumericalAbort as exc:
        log.error("numerical abort at step %d: %s", exc.step, exc.terms)
        return 2
    except VALIDATION_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
