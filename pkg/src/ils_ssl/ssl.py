"""Masked prediction with supervision at a set of Transformer layers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ils_ssl import nn
from ils_ssl import tensor as T
from ils_ssl.audio import ENCODER_HOP, MIN_SAMPLES, ConvFeatureEncoder, expected_output_length
from ils_ssl.encoder import EncoderConfig, TransformerEncoder
from ils_ssl.tensor import Tensor

log = logging.getLogger(__name__)

TEMPERATURE = 0.1


class TrainingDiverged(RuntimeError):
    pass


# -- masking ----------------------------------------------------------------------

@dataclass
class MaskSpec:
    T: int
    span_starts: np.ndarray
    span_len: int
    masked_indices: np.ndarray = field(init=False)

    def __post_init__(self):
        starts = np.asarray(self.span_starts, dtype=np.int64)
        if np.any((starts < 0) | (starts >= self.T)):
            raise ValueError(f"span start out of range for T={self.T}")
        self.span_starts = starts
        mask = np.zeros(self.T, dtype=bool)
        for s in starts:
            mask[s:s + self.span_len] = True
        self.masked_indices = np.flatnonzero(mask)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.T, dtype=bool)
        m[self.masked_indices] = True
        return m


def sample_mask(T_: int, p: float, span_len: int, rng: np.random.Generator) -> MaskSpec:
    if not 0.0 <= p <= 1.0 or span_len < 1:
        raise ValueError(f"invalid mask parameters p={p}, span_len={span_len}")
    starts = np.flatnonzero(rng.random(T_) < p)
    return MaskSpec(T_, starts, span_len)


def apply_mask(x: Tensor, mask: np.ndarray, mask_embedding: Tensor) -> Tensor:
    """Replace rows where ``mask`` is set by ``mask_embedding``.  mask: (T,) or (B, T) bool."""
    mask = np.asarray(mask)
    if mask.dtype != bool:
        idx = mask
        if np.any((idx < 0) | (idx >= x.shape[-2])):
            raise IndexError(f"mask index out of range for T={x.shape[-2]}")
        mask = np.zeros(x.shape[-2], dtype=bool)
        mask[idx] = True
    if mask.shape != x.shape[:-1] and mask.shape != x.shape[-2:-1]:
        raise T.ShapeError("apply_mask", x.shape, mask.shape)
    m = mask[..., None].astype(np.float64)
    return x * (1.0 - m) + mask_embedding * m


# -- prediction heads -------------------------------------------------------------

class PredictionHead(nn.Module):
    def __init__(self, model_dim: int, embed_dim: int, n_classes: int, rng: np.random.Generator):
        if n_classes < 2:
            raise ValueError("a prediction head needs at least 2 codewords")
        bound = 1.0 / math.sqrt(model_dim)
        self.proj = nn.parameter(rng.uniform(-bound, bound, size=(model_dim, embed_dim)))
        self.codewords = nn.parameter(rng.uniform(0.0, 1.0, size=(n_classes, embed_dim)))
        self.tau = TEMPERATURE

    @property
    def n_classes(self) -> int:
        return self.codewords.shape[0]

    def logits(self, h: Tensor) -> Tensor:
        return T.cosine_similarity(h @ self.proj, self.codewords) * (1.0 / self.tau)


def codeword_distribution(h, head: PredictionHead) -> np.ndarray:
    """p(c | h) = softmax_c(cos(W h, e_c) / tau)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    if not np.all(np.isfinite(h.data)):
        raise ValueError("codeword_distribution: non-finite input")
    if h.ndim == 1:
        return T.softmax(head.logits(h.reshape(1, -1)), axis=-1).data[0]
    return T.softmax(head.logits(h), axis=-1).data


def ils_loss(layer_states: Sequence[Tensor], mask: np.ndarray, targets: np.ndarray,
             heads: dict[int, PredictionHead], K: Sequence[int]) -> Tensor:
    """Sum over l in K and masked t of -log p^l(z_t | h_t^l).

    layer_states[l-1] is h^l with shape (B, T, d) or (T, d); mask and targets
    share the leading (B, T) shape.  Unmasked frames contribute nothing.
    """
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    if targets.shape != mask.shape:
        raise T.ShapeError("ils_loss", targets.shape, mask.shape)
    flat_idx = np.flatnonzero(mask.reshape(-1))
    z = targets.reshape(-1)[flat_idx]
    total = Tensor(0.0)
    for l in K:
        head = heads[l]
        if z.size and int(z.max()) >= head.n_classes:
            raise ValueError(f"target id {int(z.max())} >= number of codewords {head.n_classes}")
        h = layer_states[l - 1]
        rows = h.reshape(-1, h.shape[-1])
        if flat_idx.size == 0:
            total = total + rows.sum() * 0.0
            continue
        logp = T.log_softmax(head.logits(T.take_rows(rows, flat_idx)), axis=-1)
        total = total - logp[np.arange(z.size), z].sum()
    return total


# -- model ------------------------------------------------------------------------

@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 32
    n_classes: int = 50
    supervised_layers: tuple[int, ...] = (2, 4)
    share_heads: bool = False
    seed: int = 0

    def __post_init__(self):
        K = tuple(sorted(set(int(l) for l in self.supervised_layers)))
        if not K:
            raise ValueError("supervised layer set K is empty")
        for l in K:
            if not 1 <= l <= self.encoder.n_layers:
                raise ValueError(f"supervised layer {l} outside [1, {self.encoder.n_layers}]")
        self.supervised_layers = K


class HubertModel(nn.Module):
    """Conv feature encoder -> projection -> masking -> Transformer -> per-layer heads."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng([cfg.seed, 17])
        self.cfg = cfg
        d = cfg.encoder.model_dim
        ch = cfg.encoder.conv_channels
        self.feature_encoder = ConvFeatureEncoder(ch, rng)
        self.feature_norm = nn.LayerNorm(ch)
        self.proj = nn.Linear(ch, d, rng)
        self.mask_emb = nn.parameter(rng.uniform(0.0, 1.0, size=d))
        self.encoder = TransformerEncoder(cfg.encoder, rng)
        if cfg.share_heads:
            self.heads = {"shared": PredictionHead(d, cfg.embed_dim, cfg.n_classes, rng)}
        else:
            self.heads = {str(l): PredictionHead(d, cfg.embed_dim, cfg.n_classes, rng)
                          for l in cfg.supervised_layers}

    def head_map(self) -> dict[int, PredictionHead]:
        if self.cfg.share_heads:
            return {l: self.heads["shared"] for l in self.cfg.supervised_layers}
        return {l: self.heads[str(l)] for l in self.cfg.supervised_layers}

    def features(self, wav) -> Tensor:
        """(B, L) waveform -> (B, T, d) projected conv features."""
        return self.proj(self.feature_norm(self.feature_encoder(wav)))

    def __call__(self, wav, mask: np.ndarray | None = None, upto: int | None = None) -> list[Tensor]:
        x = self.features(wav)
        if mask is not None:
            x = apply_mask(x, mask, self.mask_emb)
        return self.encoder(x, upto=upto)

    def extract(self, wav: np.ndarray, layer: int | None = None) -> list[np.ndarray]:
        """Unmasked per-layer states for one utterance, outside the tape."""
        states = self(Tensor(wav[None, :]), upto=layer)
        return [s.data[0] for s in states]


# -- schedule and training loop --------------------------------------------------------

def warmup_decay_lr(step: int, total: int, peak: float, warmup_fraction: float = 0.08) -> float:
    """Linear ramp to ``peak`` over the warmup steps, then linear decay to 0 at ``total``."""
    warm = max(1, int(round(warmup_fraction * total)))
    if step <= warm:
        return peak * step / warm
    return peak * max(0.0, (total - step) / max(1, total - warm))


@dataclass
class PretrainConfig:
    steps: int = 600
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.08
    batch_size: int = 4
    crop_frames: int = 80
    mask_prob: float = 0.08
    span_len: int = 10
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.98)
    seed: int = 0


def crop_batch(corpus, labels: dict[str, np.ndarray], rng: np.random.Generator, batch_size: int, crop_frames: int):
    """Random equal-length crops aligned to the 20 ms encoder hop."""
    picks = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
    picks = np.sort(picks)
    lengths = [len(labels[corpus[i].uid]) for i in picks]
    tc = min(crop_frames, min(lengths))
    n_samples = ENCODER_HOP * (tc - 1) + MIN_SAMPLES
    wavs, tgts = [], []
    for i, n_frames in zip(picks, lengths):
        off = int(rng.integers(0, n_frames - tc + 1))
        wav = corpus[i].waveform.samples
        start = off * ENCODER_HOP
        wavs.append(wav[start:start + n_samples])
        tgts.append(labels[corpus[i].uid][off:off + tc])
    return np.stack(wavs), np.stack(tgts)


def pretrain(corpus, labels: dict[str, np.ndarray], model: HubertModel, cfg: PretrainConfig,
             optimizer: nn.AdamW | None = None, start_step: int = 0, stop_step: int | None = None,
             log_fn: Callable[[str], None] | None = None) -> tuple[HubertModel, nn.AdamW, list[float]]:
    """Run masked-prediction updates ``start_step+1 .. stop_step`` (default: all steps).

    Each step draws its batch and masks from an RNG keyed on (seed, step), so a
    run resumed from a checkpoint replays the uninterrupted run exactly.
    """
    for utt in corpus:
        n = expected_output_length(len(utt.waveform))
        if len(labels[utt.uid]) != n:
            raise ValueError(f"{utt.uid}: {len(labels[utt.uid])} labels for {n} encoder frames")
    if optimizer is None:
        optimizer = nn.AdamW(model.named_parameters(), cfg.betas, weight_decay=cfg.weight_decay)
    K = model.cfg.supervised_layers
    heads = model.head_map()
    params = model.parameters()
    stop = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    losses = []
    for step in range(start_step + 1, stop + 1):
        rng = np.random.default_rng([cfg.seed, 1000, step])
        wav, tgt = crop_batch(corpus, labels, rng, cfg.batch_size, cfg.crop_frames)
        mask = np.stack([sample_mask(tgt.shape[1], cfg.mask_prob, cfg.span_len, rng).mask for _ in range(len(wav))])
        model.zero_grad()
        states = model(wav, mask, upto=max(K))
        loss = ils_loss(states, mask, tgt, heads, K)
        raw = loss.item()
        if not math.isfinite(raw):
            raise TrainingDiverged(f"non-finite loss {raw} at step {step}")
        T.backward(loss, params)
        lr = warmup_decay_lr(step, cfg.steps, cfg.peak_lr, cfg.warmup_fraction)
        optimizer.step(lr)
        n_masked = max(1, int(mask.sum()))
        norm = raw / (len(K) * n_masked)
        losses.append(norm)
        if log_fn is not None:
            log_fn(f"{step}\t{lr:.6e}\t{raw:.6f}\t{norm:.6f}")
    return model, optimizer, losses
