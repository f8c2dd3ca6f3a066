"""Post-LN Transformer encoder with conv position embedding and bucketed relative bias."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ils_ssl import nn
from ils_ssl import tensor as T
from ils_ssl.tensor import Tensor, fp16_round


@dataclass
class EncoderConfig:
    n_layers: int = 4
    model_dim: int = 64
    inner_dim: int = 256
    n_heads: int = 4
    conv_pos_kernel: int = 16
    conv_pos_groups: int = 4
    n_rel_buckets: int = 320
    max_rel_offset: int = 800
    stabilization_scale: float = 32.0
    use_bucket_bias: bool = True
    conv_channels: int = 64

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.n_rel_buckets % 2:
            raise ValueError("n_rel_buckets must be even")
        if self.max_rel_offset <= 0 or self.stabilization_scale <= 0:
            raise ValueError("max_rel_offset and stabilization_scale must be positive")
        if self.model_dim % self.conv_pos_groups:
            raise ValueError("model_dim must be divisible by conv_pos_groups")


def relative_bucket(offset, n_buckets: int = 320, max_offset: int = 800):
    """Bucket index for a query-minus-key offset.

    The lower half of the table holds offsets <= 0, the upper half offsets > 0.
    Within a half, the first quarter of the table is exact and the rest is
    logarithmic up to ``max_offset``; larger offsets share the last bucket.
    """
    if n_buckets % 2:
        raise ValueError("n_buckets must be even")
    half = n_buckets // 2
    exact = half // 2
    off = np.asarray(offset, dtype=np.int64)
    a = np.abs(off)
    with np.errstate(divide="ignore"):
        log_part = exact + np.floor(exact * np.log(np.maximum(a, 1) / exact) / math.log(max_offset / exact))
    g = np.where(a < exact, a, np.minimum(half - 1, log_part)).astype(np.int64)
    out = half * (off > 0) + g
    return int(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=64)
def bucket_matrix(T_: int, n_buckets: int, max_offset: int) -> np.ndarray:
    pos = np.arange(T_)
    return relative_bucket(pos[:, None] - pos[None, :], n_buckets, max_offset)


def attention_probs(q: np.ndarray, k: np.ndarray, bias: np.ndarray | None = None, c: float = 32.0,
                    stabilized: bool = True, fp_mode: str = "float64") -> np.ndarray:
    """Attention probabilities for (..., T, dh) queries/keys outside the tape.

    In ``fp16_emulated`` mode every intermediate is rounded to half precision.
    The naive form exponentiates q.k/sqrt(dh) + r directly; the stabilized
    form subtracts the per-row max of q/(c sqrt(dh)).k and rescales by c.
    """
    rnd = fp16_round if fp_mode == "fp16_emulated" else (lambda x: x)
    dh = q.shape[-1]
    q, k = rnd(q), rnd(k)
    r = 0.0 if bias is None else rnd(bias)
    with np.errstate(over="ignore", invalid="ignore"):
        if stabilized:
            s = rnd(rnd(q / rnd(c * math.sqrt(dh))) @ np.swapaxes(k, -1, -2))
            z = rnd(rnd(rnd(s - s.max(-1, keepdims=True)) * c) + r)
        else:
            z = rnd(rnd(rnd(q @ np.swapaxes(k, -1, -2)) / rnd(math.sqrt(dh))) + r)
        e = rnd(np.exp(z))
        return rnd(e / rnd(e.sum(-1, keepdims=True)))


class RelativeBias(nn.Module):
    """Scalar bias per (head, bucket), shared by every layer."""

    def __init__(self, n_heads: int, n_buckets: int, max_offset: int, rng: np.random.Generator):
        self.table = nn.parameter(rng.normal(0.0, 0.02, size=(n_buckets, n_heads)))
        self.n_buckets = n_buckets
        self.max_offset = max_offset

    def __call__(self, T_: int) -> Tensor:
        idx = bucket_matrix(T_, self.n_buckets, self.max_offset)
        return T.take_rows(self.table, idx).transpose(2, 0, 1)  # (H, T, T)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, c: float, rng: np.random.Generator):
        self.q = nn.Linear(d, d, rng)
        self.k = nn.Linear(d, d, rng)
        self.v = nn.Linear(d, d, rng)
        self.out = nn.Linear(d, d, rng)
        self.n_heads = n_heads
        self.c = c

    def _split(self, x: Tensor) -> Tensor:
        B, T_, d = x.shape
        return x.reshape(B, T_, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def probs(self, x: Tensor, bias: Tensor | None, fp_mode: str = "float64") -> Tensor:
        q, k = self._split(self.q(x)), self._split(self.k(x))
        dh = q.shape[-1]
        if fp_mode != "float64":
            b = None if bias is None else bias.data[None]
            return Tensor(attention_probs(q.data, k.data, b, self.c, True, fp_mode))
        s = (q * (1.0 / (self.c * math.sqrt(dh)))) @ k.transpose(0, 1, 3, 2)
        # the row max is a constant shift; softmax is invariant to it
        z = (s - s.data.max(-1, keepdims=True)) * self.c
        if bias is not None:
            z = z + bias.reshape(1, *bias.shape)
        return T.softmax(z, axis=-1)

    def __call__(self, x: Tensor, bias: Tensor | None, fp_mode: str = "float64") -> Tensor:
        B, T_, d = x.shape
        a = self.probs(x, bias, fp_mode)
        v = self._split(self.v(x))
        h = (a @ v).transpose(0, 2, 1, 3).reshape(B, T_, d)
        return self.out(h)


class TransformerLayer(nn.Module):
    """Post-LN block: x = LN(x + attn(x)); x = LN(x + ffn(x))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.attn = SelfAttention(cfg.model_dim, cfg.n_heads, cfg.stabilization_scale, rng)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.fc1 = nn.Linear(cfg.model_dim, cfg.inner_dim, rng)
        self.fc2 = nn.Linear(cfg.inner_dim, cfg.model_dim, rng)
        self.norm2 = nn.LayerNorm(cfg.model_dim)

    def __call__(self, x: Tensor, bias: Tensor | None, fp_mode: str = "float64") -> Tensor:
        if not np.all(np.isfinite(x.data)):
            raise ValueError("attention_layer: non-finite input states")
        x = self.norm1(x + self.attn(x, bias, fp_mode))
        return self.norm2(x + self.fc2(T.gelu(self.fc1(x))))


class ConvPositionEmbedding(nn.Module):
    """Grouped same-length temporal convolution + GELU, added to its input."""

    def __init__(self, d: int, kernel: int, groups: int, rng: np.random.Generator):
        std = math.sqrt(4.0 / (kernel * d))
        self.weight = nn.parameter(rng.normal(0.0, std, size=(d, d // groups, kernel)))
        self.bias = nn.parameter(np.zeros(d))
        self.kernel = kernel
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        # x: (B, T, d)
        K = self.kernel
        left = K // 2
        right = K // 2 - 1 if K % 2 == 0 else K // 2
        h = T.conv1d(T.pad_time(x, left, right), self.weight, self.bias, stride=1, groups=self.groups)
        return x + T.gelu(h)


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pos_conv = ConvPositionEmbedding(cfg.model_dim, cfg.conv_pos_kernel, cfg.conv_pos_groups, rng)
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.layers = [TransformerLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.rel_bias = (RelativeBias(cfg.n_heads, cfg.n_rel_buckets, cfg.max_rel_offset, rng)
                         if cfg.use_bucket_bias else None)

    def __call__(self, x: Tensor, fp_mode: str = "float64", upto: int | None = None) -> list[Tensor]:
        """x: (B, T, d) masked features -> [h^1, ..., h^L]; ``upto`` stops early."""
        h = self.norm(self.pos_conv(x))
        bias = self.rel_bias(x.shape[1]) if self.rel_bias is not None else None
        states = []
        for layer in self.layers[:upto]:
            h = layer(h, bias, fp_mode)
            states.append(h)
        return states


def encoder_forward(x, encoder: TransformerEncoder, fp_mode: str = "float64") -> list[Tensor]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    return encoder(x, fp_mode)
