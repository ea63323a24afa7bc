"""Optimizer, schedule, training loops and checkpointing.

Both training stages share the AdamW optimizer with decoupled weight decay,
a linear-warmup + cosine-annealing schedule, global-norm gradient clipping
and seeded, resumable state.
"""
from __future__ import annotations

import hashlib
import json
import logging
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalAbort
from .generator import (
    DEFAULT_LAMBDA_AUDIO,
    DEFAULT_LAMBDA_VISUAL,
    GeneratorConfig,
    PseudoLabelGenerator,
    av_probs,
    pretrain_loss,
)
from .losses import LossConfig, compute_balance_weights, total_loss
from .migration import DEFAULT_MU_AUDIO, DEFAULT_MU_VISUAL, migrate_grouped
from .parser import AvvpParser, ParserConfig
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    warmup_epochs: int = 4
    lr_peak: float = 2e-3
    lr_min: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.lr_min > self.lr_peak:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_peak {self.lr_peak}")

    def to_dict(self) -> dict:
        return asdict(self)


def paper_generator_schedule() -> TrainConfig:
    """Published schedule for generator pre-training (batch 64, 80 epochs)."""
    return TrainConfig(batch_size=64, epochs=80, warmup_epochs=10, lr_peak=1e-4, lr_min=1e-5)


def paper_parser_schedule() -> TrainConfig:
    """Published schedule for parser training; lower annealing floor."""
    return TrainConfig(batch_size=64, epochs=80, warmup_epochs=10, lr_peak=1e-4, lr_min=5e-6)


def lr_at(fraction: float, cfg: TrainConfig) -> float:
    """Learning rate at a run fraction: linear ramp to peak, then cosine to min."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"epoch fraction must lie in [0, 1], got {fraction}")
    warm = cfg.warmup_epochs / cfg.epochs
    if warm > 0 and fraction <= warm:
        return cfg.lr_peak * fraction / warm
    progress = (fraction - warm) / (1.0 - warm)
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.beta1, self.beta2 = cfg.beta1, cfg.beta2
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        return {"m": dict(self.m), "v": dict(self.v), "t": self.t}

    def load_state_dict(self, state: dict) -> None:
        self.m = {k: np.array(a) for k, a in state["m"].items()}
        self.v = {k: np.array(a) for k, a in state["v"].items()}
        self.t = int(state["t"])


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def config_hash(*configs: dict) -> str:
    blob = json.dumps(configs, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_finite(value: float, step: int, terms: dict[str, float], what: str) -> None:
    if not np.isfinite(value):
        raise NumericalAbort(
            f"non-finite {what} loss at step {step}: terms {terms}", step, terms
        )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path,
    kind: str,
    model,
    optimizer: AdamW,
    epoch: int,
    rng: np.random.Generator,
    model_config: dict,
    train_config: dict,
    extra: dict | None = None,
) -> None:
    payload = {
        "kind": kind,
        "epoch": epoch,
        "model_state": model.state_arrays(),
        "optimizer_state": optimizer.state_dict(),
        "rng_state": rng.bit_generator.state,
        "model_config": model_config,
        "train_config": train_config,
        "config_hash": config_hash(model_config, train_config),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_checkpoint(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh)


def build_generator_from_checkpoint(payload: dict) -> PseudoLabelGenerator:
    model = PseudoLabelGenerator(GeneratorConfig(**payload["model_config"]))
    model.load_state_arrays(payload["model_state"])
    return model


def build_parser_from_checkpoint(payload: dict) -> AvvpParser:
    model = AvvpParser(ParserConfig(**payload["model_config"]))
    model.load_state_arrays(payload["model_state"])
    return model


# ---------------------------------------------------------------------------
# stage 1: generator pre-training


@dataclass
class MigrationParams:
    mu_audio: float = DEFAULT_MU_AUDIO
    mu_visual: float = DEFAULT_MU_VISUAL
    lambda_audio: float = DEFAULT_LAMBDA_AUDIO
    lambda_visual: float = DEFAULT_LAMBDA_VISUAL
    per_video: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_generator(
    corpus,
    gen_cfg: GeneratorConfig,
    train_cfg: TrainConfig,
    mig: MigrationParams | None = None,
    checkpoint_path: str | Path | None = None,
    resume: dict | None = None,
    stop_epoch: int | None = None,
) -> tuple[PseudoLabelGenerator, list[dict]]:
    """Pre-train the generator with audio-visual labels plus migrated soft labels."""
    mig = mig or MigrationParams()
    if corpus.text_audio is None or corpus.text_visual is None:
        raise ConfigError("generator pre-training requires text features in the manifest")
    for v in corpus.videos:
        if v.gt_audio is None or v.gt_visual is None:
            raise ConfigError(f"generator pre-training requires segment ground truth (video {v.video_id})")

    if resume is not None:
        model = build_generator_from_checkpoint(resume)
        optimizer = AdamW(model.named_parameters(), train_cfg)
        optimizer.load_state_dict(resume["optimizer_state"])
        rng = np.random.default_rng()
        rng.bit_generator.state = resume["rng_state"]
        start_epoch = resume["epoch"] + 1
        history = list(resume["extra"].get("history", []))
    else:
        model = PseudoLabelGenerator(gen_cfg)
        optimizer = AdamW(model.named_parameters(), train_cfg)
        rng = np.random.default_rng(train_cfg.seed)
        start_epoch = 0
        history = []

    text_a, text_v = corpus.text_audio, corpus.text_visual
    n = len(corpus.videos)
    step = start_epoch * max(1, (n + train_cfg.batch_size - 1) // train_cfg.batch_size)
    model.train()

    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at((epoch + 1) / train_cfg.epochs, train_cfg)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, train_cfg.batch_size):
            batch = [corpus.videos[i] for i in order[lo : lo + train_cfg.batch_size]]
            audio_pool = np.concatenate([v.audio for v in batch])
            visual_pool = np.concatenate([v.visual for v in batch])
            av_pool = np.concatenate([v.gt_av for v in batch])
            ids = None
            if mig.per_video:
                ids = [v.video_id for v in batch for _ in range(v.num_segments)]
            soft_audio = migrate_grouped(audio_pool, av_pool, mig.mu_audio, ids)
            soft_visual = migrate_grouped(visual_pool, av_pool, mig.mu_visual, ids)

            with Tape():
                dyn_a = T.concat(
                    [model.dynamic_probs(Tensor(v.audio), text_a, "audio", rng) for v in batch], axis=0
                )
                dyn_v = T.concat(
                    [model.dynamic_probs(Tensor(v.visual), text_v, "visual", rng) for v in batch], axis=0
                )
                stat_a = model.static_probs(Tensor(audio_pool), text_a, "audio")
                stat_v = model.static_probs(Tensor(visual_pool), text_v, "visual")
                p_av1, p_av2 = av_probs(dyn_a, dyn_v, stat_a, stat_v)
                loss, terms = pretrain_loss(
                    p_av1, p_av2, dyn_a, dyn_v, av_pool, soft_audio, soft_visual,
                    mig.lambda_audio, mig.lambda_visual,
                )
                _check_finite(terms["total"], step, terms, "pre-training")
                optimizer.zero_grad()
                T.backward(loss)
            clip_global_norm(optimizer.params, train_cfg.clip_norm)
            optimizer.step(lr)
            losses.append(terms["total"])
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr})
        log.info("pretrain epoch %d: loss %.5f lr %.2e", epoch, history[-1]["loss"], lr)
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path, "generator", model, optimizer, epoch, rng,
                gen_cfg.to_dict(), train_cfg.to_dict(),
                {"history": history, "migration": mig.to_dict()},
            )
        if stop_epoch is not None and epoch >= stop_epoch:
            break
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# stage 3: parser training


def train_parser(
    corpus,
    pseudo: dict[str, tuple[np.ndarray, np.ndarray]],
    parser_cfg: ParserConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    checkpoint_path: str | Path | None = None,
    resume: dict | None = None,
    stop_epoch: int | None = None,
) -> tuple[AvvpParser, list[dict]]:
    """Weakly supervised parser training against pseudo-labels and video labels."""
    loss_cfg = loss_cfg or LossConfig()
    missing = [v.video_id for v in corpus.videos if v.video_id not in pseudo]
    if missing:
        raise ConfigError(f"pseudo-labels missing for videos: {missing[:5]}")
    weights = compute_balance_weights(pseudo, loss_cfg.positive_scale)

    if resume is not None:
        model = build_parser_from_checkpoint(resume)
        optimizer = AdamW(model.named_parameters(), train_cfg)
        optimizer.load_state_dict(resume["optimizer_state"])
        rng = np.random.default_rng()
        rng.bit_generator.state = resume["rng_state"]
        start_epoch = resume["epoch"] + 1
        history = list(resume["extra"].get("history", []))
    else:
        model = AvvpParser(parser_cfg)
        optimizer = AdamW(model.named_parameters(), train_cfg)
        rng = np.random.default_rng(train_cfg.seed)
        start_epoch = 0
        history = []

    n = len(corpus.videos)
    step = start_epoch * max(1, (n + train_cfg.batch_size - 1) // train_cfg.batch_size)
    model.train()

    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at((epoch + 1) / train_cfg.epochs, train_cfg)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, train_cfg.batch_size):
            batch = [corpus.videos[i] for i in order[lo : lo + train_cfg.batch_size]]
            with Tape():
                batch_loss = None
                last_terms: dict[str, float] = {}
                for video in batch:
                    out = model(Tensor(video.audio), Tensor(video.visual), rng)
                    pa, pv = pseudo[video.video_id]
                    vloss, last_terms = total_loss(
                        out, pa, pv, video.label, weights, loss_cfg, rng,
                        model.classifier_audio, model.classifier_visual,
                    )
                    batch_loss = vloss if batch_loss is None else T.add(batch_loss, vloss)
                batch_loss = T.mul(batch_loss, Tensor(1.0 / len(batch)))
                value = batch_loss.item()
                _check_finite(value, step, last_terms, "parser")
                optimizer.zero_grad()
                T.backward(batch_loss)
            clip_global_norm(optimizer.params, train_cfg.clip_norm)
            optimizer.step(lr)
            losses.append(value)
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr})
        log.info("parser epoch %d: loss %.5f lr %.2e", epoch, history[-1]["loss"], lr)
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path, "parser", model, optimizer, epoch, rng,
                parser_cfg.to_dict(), train_cfg.to_dict(), {"history": history},
            )
        if stop_epoch is not None and epoch >= stop_epoch:
            break
    model.eval()
    return model, history
