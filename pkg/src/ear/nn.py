"""Neural building blocks: attention encoders, relationship units, MMIL pooling.

All blocks run on the tape-based tensor engine and are gradient-checked
against finite differences in the test suite.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Base class with recursive parameter/buffer discovery and train/eval mode."""

    def __init__(self):
        self.training = True

    def modules(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
        for name, mod in self.modules():
            out.update(mod.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, val in vars(self).items():
            # underscore-prefixed arrays are transient diagnostics, not state
            if isinstance(val, np.ndarray) and not name.startswith("_"):
                out[prefix + name] = val
        for name, mod in self.modules():
            out.update(mod.named_buffers(prefix + name + "."))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        for key, arr in state.items():
            if key in params:
                if params[key].data.shape != arr.shape:
                    raise ShapeError(f"state mismatch for {key}: {params[key].data.shape} vs {arr.shape}")
                params[key].data = np.array(arr, dtype=np.float64)
            elif key in buffers:
                buffers[key][...] = arr
            else:
                raise ShapeError(f"unknown state entry {key}")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, mod in self.modules():
            mod.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        if zero_init:
            self.weight = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        else:
            self.weight = Tensor(xavier(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    __call__ = forward


class FeedForward(Module):
    """Two-layer MLP with ReLU, expansion factor configurable (default x4)."""

    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4, drop: float = 0.1):
        super().__init__()
        self.fc1 = Linear(dim, dim * expansion, rng)
        self.fc2 = Linear(dim * expansion, dim, rng)
        self.drop = drop

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = T.relu(self.fc1(x))
        if rng is not None:
            h = T.dropout(h, self.drop, rng, self.training)
        return self.fc2(h)

    __call__ = forward


class MultiHeadAttention(Module):
    """Scaled dot-product attention over one query stream and one key/value stream."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, drop: float = 0.1):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.drop = drop
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    @property
    def last_weights(self) -> np.ndarray:
        """Attention weights from the most recent forward call."""
        return self._last_weights

    def _split(self, x: Tensor, length: int) -> Tensor:
        # (L, D) -> (heads, L, head_dim)
        return T.transpose(T.reshape(x, (length, self.num_heads, self.head_dim)), (1, 0, 2))

    def forward(self, query: Tensor, keyvalue: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if query.shape[-1] != self.dim or keyvalue.shape[-1] != self.dim:
            raise ShapeError(
                f"attention expects width {self.dim}, got query {query.shape} and key/value {keyvalue.shape}"
            )
        tq, tk = query.shape[0], keyvalue.shape[0]
        q = self._split(self.wq(query), tq)
        k = self._split(self.wk(keyvalue), tk)
        v = self._split(self.wv(keyvalue), tk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), Tensor(1.0 / np.sqrt(self.head_dim)))
        weights = T.softmax(scores, axis=2)
        self._last_weights = weights.data
        if rng is not None:
            weights = T.dropout(weights, self.drop, rng, self.training)
        ctx = T.matmul(weights, v)  # (heads, Tq, head_dim)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (tq, self.dim))
        return self.wo(merged)

    __call__ = forward


class EncoderBlock(Module):
    """Attention plus feed-forward with post-norm residuals.

    Self-attention when called with one stream, cross-attention when the
    key/value stream differs from the query stream.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator,
                 expansion: int = 4, drop: float = 0.1):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads, rng, drop)
        self.ffn = FeedForward(dim, rng, expansion, drop)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.drop = drop

    def forward(self, x: Tensor, keyvalue: Tensor | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        kv = x if keyvalue is None else keyvalue
        a = self.attn(x, kv, rng)
        if rng is not None:
            a = T.dropout(a, self.drop, rng, self.training)
        h = self.norm1(T.add(x, a))
        f = self.ffn(h, rng)
        if rng is not None:
            f = T.dropout(f, self.drop, rng, self.training)
        return self.norm2(T.add(h, f))

    __call__ = forward


class ErmUnit(Module):
    """Relationship unit: temporal conv, learned adjacency, batch norm, LeakyReLU.

    The temporal convolution is per-category (columns never mix); the
    adjacency right-multiplication is the only place categories interact,
    which keeps block-diagonal adjacencies exactly stream-separating.
    """

    def __init__(self, width: int, rng: np.random.Generator, kernel_size: int = 3,
                 adjacency_noise: float = 0.01, negative_slope: float = 0.01):
        super().__init__()
        self.width = width
        kernel = np.zeros((kernel_size, width))
        kernel[kernel_size // 2] = 1.0
        kernel += rng.normal(0.0, adjacency_noise, size=kernel.shape)
        self.conv_weight = Tensor(kernel, requires_grad=True)
        self.conv_bias = Tensor(np.zeros(width), requires_grad=True)
        self.adjacency = Tensor(
            np.eye(width) + rng.normal(0.0, adjacency_noise, size=(width, width)),
            requires_grad=True,
        )
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.negative_slope = negative_slope

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.width:
            raise ConfigError(f"relationship unit width {self.width} vs input {x.shape}")
        h = T.conv1d_same(x, self.conv_weight, self.conv_bias)
        h = T.matmul(h, self.adjacency)
        h = T.batch_norm(h, self.gamma, self.beta, self.running_mean, self.running_var, self.training)
        return T.leaky_relu(h, self.negative_slope)

    __call__ = forward

    def set_identity(self) -> None:
        """Identity configuration: center-tap conv, identity adjacency, unit BN stats."""
        self.conv_weight.data = np.zeros_like(self.conv_weight.data)
        self.conv_weight.data[self.conv_weight.data.shape[0] // 2] = 1.0
        self.conv_bias.data = np.zeros_like(self.conv_bias.data)
        self.adjacency.data = np.eye(self.width)
        self.gamma.data = np.ones(self.width)
        self.beta.data = np.zeros(self.width)
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0


class MmilPool(Module):
    """Attentive multiple-instance pooling over time and modality.

    Temporal weights come from the fused (concatenated) segment features and
    are shared by both modalities; modality weights come from each modality's
    own features. The pooled output is therefore an exact convex combination
    of the segment probabilities.
    """

    def __init__(self, feature_dim: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.temporal_proj = Linear(2 * feature_dim, num_classes, rng)
        self.modality_proj = Linear(feature_dim, num_classes, rng)

    def forward_with_weights(self, p_a: Tensor, p_v: Tensor, f_a: Tensor, f_v: Tensor):
        if p_a.shape != p_v.shape or f_a.shape != f_v.shape or p_a.shape[0] != f_a.shape[0]:
            raise ShapeError(
                f"mmil_pool: probability shapes {p_a.shape}/{p_v.shape}, feature shapes {f_a.shape}/{f_v.shape}"
            )
        t, c = p_a.shape
        temporal_logits = self.temporal_proj(T.concat([f_a, f_v], axis=1))  # (T, C)
        w_time = T.softmax(temporal_logits, axis=0)
        la = T.reshape(self.modality_proj(f_a), (t, 1, c))
        lv = T.reshape(self.modality_proj(f_v), (t, 1, c))
        w_mod = T.softmax(T.concat([la, lv], axis=1), axis=1)  # (T, 2, C)
        wm_a = T.reshape(T.slice_axis(w_mod, 1, 0, 1), (t, c))
        wm_v = T.reshape(T.slice_axis(w_mod, 1, 1, 2), (t, c))
        inner = T.add(T.mul(wm_a, p_a), T.mul(wm_v, p_v))
        pooled = T.tsum(T.mul(w_time, inner), axis=0)  # (C,)
        return pooled, w_time.data, w_mod.data

    def forward(self, p_a: Tensor, p_v: Tensor, f_a: Tensor, f_v: Tensor) -> Tensor:
        pooled, _, _ = self.forward_with_weights(p_a, p_v, f_a, f_v)
        return pooled

    __call__ = forward
