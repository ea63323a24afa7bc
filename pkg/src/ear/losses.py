"""Stage-3 training objective.

Five unweighted terms: class-imbalance-weighted soft BCE against the
pseudo-labels per modality, feature-mixup regularization per modality, and a
video-level BCE against the weak labels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_POSITIVE_SCALE = 1.0  # the W multiplier on the positive-branch weight
DEFAULT_MIXUP_ALPHA = 0.5


@dataclass(frozen=True)
class ClassBalanceWeights:
    """Global positive/negative branch weights, frozen for a training run."""

    w_pos_audio: float
    w_neg_audio: float
    w_pos_visual: float
    w_neg_visual: float
    scale: float
    num_videos: int

    def for_modality(self, modality: str) -> tuple[float, float]:
        if modality == "audio":
            return self.w_pos_audio, self.w_neg_audio
        if modality == "visual":
            return self.w_pos_visual, self.w_neg_visual
        raise ConfigError(f"unknown modality {modality!r}")


def compute_balance_weights(
    pseudo: dict[str, tuple[np.ndarray, np.ndarray]], scale: float = DEFAULT_POSITIVE_SCALE
) -> ClassBalanceWeights:
    """Exact global means over the full training pseudo-label set.

    w_pos = mean(1 - soft_label) * scale, w_neg = mean(soft_label), per modality.
    """
    if not pseudo:
        raise ConfigError("cannot compute balance weights on an empty pseudo-label set")
    audio = np.concatenate([a.reshape(-1) for a, _ in pseudo.values()])
    visual = np.concatenate([v.reshape(-1) for _, v in pseudo.values()])
    # fsum keeps the means exactly invariant to segment ordering
    mean_a = math.fsum(audio) / audio.size
    mean_v = math.fsum(visual) / visual.size
    return ClassBalanceWeights(
        w_pos_audio=(1.0 - mean_a) * scale,
        w_neg_audio=mean_a,
        w_pos_visual=(1.0 - mean_v) * scale,
        w_neg_visual=mean_v,
        scale=scale,
        num_videos=len(pseudo),
    )


def soft_loss(
    pred: Tensor,
    pseudo: np.ndarray,
    w_pos: float,
    w_neg: float,
    selector: np.ndarray | None = None,
) -> Tensor:
    """Class-balance-weighted BCE against soft pseudo-labels.

    The positive/negative branch selector defaults to the pseudo-label
    binarized at 0.5; a broadcast video-level selector may be passed instead.
    """
    if pred.shape != pseudo.shape:
        raise ShapeError(f"soft_loss: pred {pred.shape} vs pseudo {pseudo.shape}")
    y = (pseudo >= 0.5).astype(np.float64) if selector is None else selector
    weight = w_pos * y + w_neg * (1.0 - y)
    return T.bce(pred, pseudo, weight)


def mixup_loss(
    features: Tensor,
    pseudo: np.ndarray,
    classifier,
    rng: np.random.Generator,
    alpha: float = DEFAULT_MIXUP_ALPHA,
    gamma: float | None = None,
    perm: np.ndarray | None = None,
) -> Tensor:
    """Mixup regularization over a video's segments.

    Segments are paired by one uniform random permutation; features and
    pseudo-labels are mixed with the same Beta(alpha, alpha) draw, and the
    mixed features pass through the same classifier. Mixed labels are
    constants. A single-segment batch skips the term with a warning.
    """
    t = features.shape[0]
    if t < 2:
        log.warning("mixup skipped: batch of %d segment(s)", t)
        return Tensor(0.0)
    if perm is None:
        perm = rng.permutation(t)
    if gamma is None:
        gamma = float(rng.beta(alpha, alpha))
    partner = T.take_rows(features, perm)
    mixed_feat = T.add(T.mul(features, Tensor(gamma)), T.mul(partner, Tensor(1.0 - gamma)))
    mixed_label = gamma * pseudo + (1.0 - gamma) * pseudo[perm]
    mixed_pred = T.sigmoid(classifier(mixed_feat))
    return T.bce(mixed_pred, mixed_label)


@dataclass
class LossConfig:
    positive_scale: float = DEFAULT_POSITIVE_SCALE
    mixup_alpha: float = DEFAULT_MIXUP_ALPHA
    use_mixup: bool = True
    use_soft_audio: bool = True
    use_soft_visual: bool = True
    use_video: bool = True
    selector: str = "pseudo"  # or "video": broadcast the weak label as the branch selector

    def __post_init__(self):
        if self.selector not in ("pseudo", "video"):
            raise ConfigError(f"unknown soft-loss selector {self.selector!r}")
        if self.mixup_alpha <= 0:
            raise ConfigError(f"mixup alpha must be positive, got {self.mixup_alpha}")


def total_loss(
    outputs,
    pseudo_audio: np.ndarray,
    pseudo_visual: np.ndarray,
    video_label: np.ndarray,
    weights: ClassBalanceWeights,
    cfg: LossConfig,
    rng: np.random.Generator,
    classifier_audio=None,
    classifier_visual=None,
) -> tuple[Tensor, dict[str, float]]:
    """Unweighted sum of the five stage-3 terms; returns (scalar, term values)."""
    terms: list[Tensor] = []
    names: dict[str, float] = {}

    def record(name: str, term: Tensor) -> None:
        terms.append(term)
        names[name] = term.item()

    sel_a = sel_v = None
    if cfg.selector == "video":
        sel_a = np.tile(video_label[None, :], (pseudo_audio.shape[0], 1))
        sel_v = sel_a
    if cfg.use_mixup:
        record(
            "mix_audio",
            mixup_loss(outputs.feat_audio, pseudo_audio, classifier_audio, rng, cfg.mixup_alpha),
        )
        record(
            "mix_visual",
            mixup_loss(outputs.feat_visual, pseudo_visual, classifier_visual, rng, cfg.mixup_alpha),
        )
    if cfg.use_soft_audio:
        wp, wn = weights.for_modality("audio")
        record("soft_audio", soft_loss(outputs.prob_audio, pseudo_audio, wp, wn, sel_a))
    if cfg.use_soft_visual:
        wp, wn = weights.for_modality("visual")
        record("soft_visual", soft_loss(outputs.prob_visual, pseudo_visual, wp, wn, sel_v))
    if cfg.use_video:
        record("video", T.bce(outputs.prob_video, video_label))

    if not terms:
        raise ConfigError("all loss terms disabled")
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    names["total"] = total.item()
    return total, names
