"""Soft-constrained audio-visual parsing model.

Projected features go through per-modality self-attention stacks, an
asymmetric cross-modal fusion stage (the temporally modeled stream of one
modality queries the other's static projected stream), cross-modal event
decoders into category space, a stack of relationship-modeling layers over
event categories, per-modality classifiers and attentive MMIL pooling.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import EncoderBlock, ErmUnit, Linear, MmilPool, Module, MultiHeadAttention
from .tensor import Tensor

FUSION_MODES = ("amdf", "han", "msa-mca")
ERM_MODES = ("interleaved", "stacked", "off")
ERM_WIRINGS = ("corrected", "literal")


@dataclass
class ParserConfig:
    dim_audio: int = 16
    dim_visual: int = 16
    num_classes: int = 5
    d_model: int = 32
    num_heads: int = 4
    depth: int = 1
    m_layers: int = 3
    fusion: str = "amdf"
    erm: str = "interleaved"
    # "literal" feeds the audio stream into both uni-modal relationship units,
    # reproducing the written form of the layer recursion; "corrected" feeds
    # each stream into its own unit.
    erm_wiring: str = "corrected"
    ffn_expansion: int = 4
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.erm not in ERM_MODES:
            raise ConfigError(f"erm must be one of {ERM_MODES}, got {self.erm!r}")
        if self.erm_wiring not in ERM_WIRINGS:
            raise ConfigError(f"erm_wiring must be one of {ERM_WIRINGS}, got {self.erm_wiring!r}")
        if self.m_layers < 1:
            raise ConfigError(f"m_layers must be >= 1, got {self.m_layers}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParseOutput:
    prob_audio: Tensor    # (T, C) segment probabilities
    prob_visual: Tensor   # (T, C)
    prob_video: Tensor    # (C,) pooled video probability
    feat_audio: Tensor    # (T, C) relationship-aware features kept for mixup
    feat_visual: Tensor   # (T, C)


class HybridBlock(Module):
    """Parallel self- plus cross-attention with a shared FFN residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, expansion: int, drop: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads, rng, drop)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, drop)
        self.block = EncoderBlock(dim, heads, rng, expansion, drop)  # only its ffn/norms are used
        self.norm = self.block.norm1
        self.drop = drop

    def forward(self, x: Tensor, other: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        a = self.self_attn(x, x, rng)
        c = self.cross_attn(x, other, rng)
        if rng is not None:
            a = T.dropout(a, self.drop, rng, self.training)
            c = T.dropout(c, self.drop, rng, self.training)
        h = self.norm(T.add(T.add(x, a), c))
        f = self.block.ffn(h, rng)
        if rng is not None:
            f = T.dropout(f, self.drop, rng, self.training)
        return self.block.norm2(T.add(h, f))

    __call__ = forward


class ErmLayer(Module):
    """One relationship layer: per-stream units plus a joint unit over 2C."""

    def __init__(self, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.unit_audio = ErmUnit(num_classes, rng)
        self.unit_visual = ErmUnit(num_classes, rng)
        self.unit_joint = ErmUnit(2 * num_classes, rng)
        self.num_classes = num_classes


class AvvpParser(Module):
    def __init__(self, cfg: ParserConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, heads, c = cfg.d_model, cfg.num_heads, cfg.num_classes
        exp, drop = cfg.ffn_expansion, cfg.dropout

        self.proj_audio = Linear(cfg.dim_audio, d, rng)
        self.proj_visual = Linear(cfg.dim_visual, d, rng)
        self.stack_audio = [EncoderBlock(d, heads, rng, exp, drop) for _ in range(cfg.depth)]
        self.stack_visual = [EncoderBlock(d, heads, rng, exp, drop) for _ in range(cfg.depth)]
        if cfg.fusion == "han":
            self.fuse_audio = HybridBlock(d, heads, rng, exp, drop)
            self.fuse_visual = HybridBlock(d, heads, rng, exp, drop)
        else:
            self.fuse_audio = EncoderBlock(d, heads, rng, exp, drop)
            self.fuse_visual = EncoderBlock(d, heads, rng, exp, drop)
        self.dec_audio = EncoderBlock(d, heads, rng, exp, drop)
        self.dec_visual = EncoderBlock(d, heads, rng, exp, drop)
        self.dec_mlp_audio = [Linear(d, d, rng), Linear(d, c, rng)]
        self.dec_mlp_visual = [Linear(d, d, rng), Linear(d, c, rng)]
        self.erm_layers = [] if cfg.erm == "off" else [ErmLayer(c, rng) for _ in range(cfg.m_layers)]
        self.classifier_audio = Linear(c, c, rng, zero_init=True)
        self.classifier_visual = Linear(c, c, rng, zero_init=True)
        self.pool = MmilPool(c, c, rng)

    # -- stages ------------------------------------------------------------
    def fuse(self, feat_audio: Tensor, feat_visual: Tensor,
             rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Temporal modeling plus cross-modal fusion; returns (audio, visual) streams."""
        if feat_audio.shape[1] != self.cfg.dim_audio or feat_visual.shape[1] != self.cfg.dim_visual:
            raise ShapeError(
                f"parser expects feature widths ({self.cfg.dim_audio}, {self.cfg.dim_visual}), "
                f"got {feat_audio.shape} and {feat_visual.shape}"
            )
        static_a = self.proj_audio(feat_audio)
        static_v = self.proj_visual(feat_visual)
        if self.cfg.fusion == "han":
            return (
                self.fuse_audio(static_a, static_v, rng),
                self.fuse_visual(static_v, static_a, rng),
            )
        dyn_a, dyn_v = static_a, static_v
        for block in self.stack_audio:
            dyn_a = block(dyn_a, rng=rng)
        for block in self.stack_visual:
            dyn_v = block(dyn_v, rng=rng)
        if self.cfg.fusion == "amdf":
            # dynamic queries attend to the *static* other-modality stream
            kv_for_a, kv_for_v = static_v, static_a
        else:  # msa-mca: sequential self- then cross-attention on dynamic streams
            kv_for_a, kv_for_v = dyn_v, dyn_a
        return (
            self.fuse_audio(dyn_a, kv_for_a, rng),
            self.fuse_visual(dyn_v, kv_for_v, rng),
        )

    def decode_events(self, fused_audio: Tensor, fused_visual: Tensor,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Cross-modal aggregation and projection into category space (T, C)."""
        ha = self.dec_audio(fused_audio, fused_visual, rng)
        hv = self.dec_visual(fused_visual, fused_audio, rng)
        fa = self.dec_mlp_audio[1](T.relu(self.dec_mlp_audio[0](ha)))
        fv = self.dec_mlp_visual[1](T.relu(self.dec_mlp_visual[0](hv)))
        return fa, fv

    def erm_forward(self, event_audio: Tensor, event_visual: Tensor) -> tuple[Tensor, Tensor]:
        """Relationship-modeling stack over (T, C) event features."""
        c = self.cfg.num_classes
        a, v = event_audio, event_visual
        if self.cfg.erm == "off":
            return a, v
        literal = self.cfg.erm_wiring == "literal"
        if self.cfg.erm == "interleaved":
            for layer in self.erm_layers:
                ua = layer.unit_audio(a)
                uv = layer.unit_visual(a if literal else v)
                joint = layer.unit_joint(T.concat([ua, uv], axis=1))
                a = T.slice_axis(joint, 1, 0, c)
                v = T.slice_axis(joint, 1, c, 2 * c)
            return a, v
        # stacked: all uni-modal layers first, then all joint layers
        for layer in self.erm_layers:
            ua = layer.unit_audio(a)
            uv = layer.unit_visual(a if literal else v)
            a, v = ua, uv
        for layer in self.erm_layers:
            joint = layer.unit_joint(T.concat([a, v], axis=1))
            a = T.slice_axis(joint, 1, 0, c)
            v = T.slice_axis(joint, 1, c, 2 * c)
        return a, v

    def forward(self, feat_audio: Tensor, feat_visual: Tensor,
                rng: np.random.Generator | None = None) -> ParseOutput:
        fused_a, fused_v = self.fuse(feat_audio, feat_visual, rng)
        event_a, event_v = self.decode_events(fused_a, fused_v, rng)
        rel_a, rel_v = self.erm_forward(event_a, event_v)
        prob_a = T.sigmoid(self.classifier_audio(rel_a))
        prob_v = T.sigmoid(self.classifier_visual(rel_v))
        prob_video = self.pool(prob_a, prob_v, rel_a, rel_v)
        return ParseOutput(prob_a, prob_v, prob_video, rel_a, rel_v)

    __call__ = forward


def parse_corpus(model: AvvpParser, corpus, tau: float | None = None):
    """Frozen-model parsing over a corpus.

    Returns per-video (audio, visual) probability planes, binarized at
    ``tau`` when given.
    """
    from .metrics import binarize

    was_training = model.training
    model.eval()
    out = {}
    for video in corpus.videos:
        res = model(Tensor(video.audio), Tensor(video.visual))
        pa, pv = res.prob_audio.data, res.prob_visual.data
        if tau is not None:
            pa, pv = binarize(pa, tau), binarize(pv, tau)
        out[video.video_id] = (pa, pv)
    model.train(was_training)
    return out
