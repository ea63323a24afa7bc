"""Temporal-aware pseudo-label generator.

Per modality, a small self-attention stack refines segment features; event
probabilities come from inner products with frozen text-label features.
Audio-visual probabilities are asymmetric products of one modality's dynamic
probabilities with the other's static (stack-free) probabilities. After
pre-training, the frozen generator emits soft segment-level pseudo-labels on
a target corpus, gated by the video-level weak label.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import EncoderBlock, Linear, Module
from .tensor import Tensor

DEFAULT_LAMBDA_AUDIO = 0.05
DEFAULT_LAMBDA_VISUAL = 0.15
DEFAULT_THETA = 0.5


@dataclass
class GeneratorConfig:
    dim_audio: int = 16
    dim_visual: int = 16
    text_dim_audio: int | None = None   # defaults to the feature dim
    text_dim_visual: int | None = None
    depth: int = 2
    num_heads: int = 4
    ffn_expansion: int = 4
    dropout: float = 0.1
    seed: int = 0

    def resolved_text_dims(self) -> tuple[int, int]:
        return (
            self.text_dim_audio if self.text_dim_audio is not None else self.dim_audio,
            self.text_dim_visual if self.text_dim_visual is not None else self.dim_visual,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class _ModalityStack(Module):
    """Optional linear bridge into the text width, then self-attention blocks."""

    def __init__(self, feat_dim: int, text_dim: int, cfg: GeneratorConfig, rng: np.random.Generator):
        super().__init__()
        self.bridge = Linear(feat_dim, text_dim, rng) if feat_dim != text_dim else None
        self.blocks = [
            EncoderBlock(text_dim, cfg.num_heads, rng, cfg.ffn_expansion, cfg.dropout)
            for _ in range(cfg.depth)
        ]
        self.text_dim = text_dim

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if self.bridge is not None:
            x = self.bridge(x)
        for block in self.blocks:
            x = block(x, rng=rng)
        return x

    __call__ = forward


class PseudoLabelGenerator(Module):
    """Unshared audio and visual stacks; text features stay frozen inputs."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        ta, tv = cfg.resolved_text_dims()
        self.audio_stack = _ModalityStack(cfg.dim_audio, ta, cfg, rng)
        self.visual_stack = _ModalityStack(cfg.dim_visual, tv, cfg, rng)

    def _stack(self, modality: str) -> _ModalityStack:
        if modality == "audio":
            return self.audio_stack
        if modality == "visual":
            return self.visual_stack
        raise ConfigError(f"unknown modality {modality!r}")

    def dynamic_logits(self, feats: Tensor, text: np.ndarray, modality: str,
                       rng: np.random.Generator | None = None) -> Tensor:
        stack = self._stack(modality)
        refined = stack(feats, rng)
        if refined.shape[1] != text.shape[1]:
            raise ShapeError(
                f"{modality} stack output width {refined.shape[1]} vs text width {text.shape[1]}"
            )
        return T.matmul(refined, T.transpose(Tensor(text)))

    def dynamic_probs(self, feats: Tensor, text: np.ndarray, modality: str,
                      rng: np.random.Generator | None = None) -> Tensor:
        """Temporal-aware event probabilities: sigmoid(stack(features) @ text^T)."""
        return T.sigmoid(self.dynamic_logits(feats, text, modality, rng))

    def static_probs(self, feats: Tensor, text: np.ndarray, modality: str) -> Tensor:
        """Single-segment event probabilities with no temporal modeling."""
        stack = self._stack(modality)
        x = stack.bridge(feats) if stack.bridge is not None else feats
        if x.shape[1] != text.shape[1]:
            raise ShapeError(f"{modality} feature width {x.shape[1]} vs text width {text.shape[1]}")
        return T.sigmoid(T.matmul(x, T.transpose(Tensor(text))))


def av_probs(p_audio_dyn: Tensor, p_visual_dyn: Tensor,
             p_audio_static: Tensor, p_visual_static: Tensor) -> tuple[Tensor, Tensor]:
    """Asymmetric audio-visual probabilities.

    The first pairs dynamic visual with static audio, the second dynamic
    audio with static visual; each is elementwise <= either factor.
    """
    shapes = {p_audio_dyn.shape, p_visual_dyn.shape, p_audio_static.shape, p_visual_static.shape}
    if len(shapes) != 1:
        raise ShapeError(f"av_probs: mismatched shapes {sorted(shapes)}")
    return T.mul(p_visual_dyn, p_audio_static), T.mul(p_audio_dyn, p_visual_static)


def pretrain_loss(
    p_av1: Tensor,
    p_av2: Tensor,
    p_audio_dyn: Tensor,
    p_visual_dyn: Tensor,
    av_labels,
    audio_soft_labels,
    visual_soft_labels,
    lambda_audio: float = DEFAULT_LAMBDA_AUDIO,
    lambda_visual: float = DEFAULT_LAMBDA_VISUAL,
) -> tuple[Tensor, dict[str, float]]:
    """Four-term generator objective; returns the scalar and per-term values."""
    if lambda_audio < 0 or lambda_visual < 0:
        raise ConfigError(f"loss weights must be nonnegative, got ({lambda_audio}, {lambda_visual})")
    t_av1 = T.bce(p_av1, av_labels)
    t_av2 = T.bce(p_av2, av_labels)
    t_a = T.bce(p_audio_dyn, audio_soft_labels)
    t_v = T.bce(p_visual_dyn, visual_soft_labels)
    total = T.add(
        T.add(t_av1, t_av2),
        T.add(T.mul(t_a, Tensor(lambda_audio)), T.mul(t_v, Tensor(lambda_visual))),
    )
    terms = {
        "av1": t_av1.item(),
        "av2": t_av2.item(),
        "audio": t_a.item(),
        "visual": t_v.item(),
        "total": total.item(),
    }
    return total, terms


def emit_pseudo_labels(dynamic_probs: np.ndarray, theta: float, video_label: np.ndarray) -> np.ndarray:
    """Soft pseudo-labels: sigmoid(P - theta) gated by the weak video label.

    Output support equals the label support column-wise, exactly.
    """
    shifted = dynamic_probs - theta
    soft = np.where(
        shifted >= 0,
        1.0 / (1.0 + np.exp(-shifted)),
        np.exp(shifted) / (1.0 + np.exp(shifted)),
    )
    return soft * video_label[None, :]


@dataclass
class PseudoLabelThresholds:
    theta_audio: float = DEFAULT_THETA
    theta_visual: float = DEFAULT_THETA

    def __post_init__(self):
        for name, val in (("theta_audio", self.theta_audio), ("theta_visual", self.theta_visual)):
            if not 0.0 < val < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {val}")


def generate_for_corpus(
    model: PseudoLabelGenerator,
    corpus,
    thresholds: PseudoLabelThresholds | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Emit per-video (audio, visual) soft pseudo-label planes for a corpus.

    The model is used frozen (eval mode, no tape); text features come from
    the target corpus so the category set may differ from pre-training.
    """
    thresholds = thresholds or PseudoLabelThresholds()
    if corpus.text_audio is None or corpus.text_visual is None:
        raise ConfigError("pseudo-label emission needs text features in the target manifest")
    was_training = model.training
    model.eval()
    out = {}
    for video in corpus.videos:
        pa = model.dynamic_probs(Tensor(video.audio), corpus.text_audio, "audio").data
        pv = model.dynamic_probs(Tensor(video.visual), corpus.text_visual, "visual").data
        out[video.video_id] = (
            emit_pseudo_labels(pa, thresholds.theta_audio, video.label),
            emit_pseudo_labels(pv, thresholds.theta_visual, video.label),
        )
    model.train(was_training)
    return out
