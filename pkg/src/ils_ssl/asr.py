"""CTC fine-tuning, greedy and LM-fused prefix beam search decoding."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from ils_ssl import nn
from ils_ssl import tensor as T
from ils_ssl.audio import phone_char
from ils_ssl.ssl import apply_mask, sample_mask
from ils_ssl.tensor import Tensor

BLANK = 0
NEG_INF = -math.inf


@dataclass
class Vocabulary:
    symbols: list[str]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if self.symbols[0] != "<b>" or "<b>" in self.symbols[1:]:
            raise ValueError("blank '<b>' must appear exactly once, at index 0")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def for_phones(cls, n_phones: int) -> Vocabulary:
        return cls(["<b>"] + [phone_char(p) for p in range(n_phones)])

    def __len__(self):
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        return [self._index[ch] for ch in text]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in ids)


# -- CTC ----------------------------------------------------------------------------

def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _log_softmax(x: np.ndarray) -> np.ndarray:
    return x - logsumexp(x, axis=-1, keepdims=True)


def _ctc_tables(logp: np.ndarray, target: Sequence[int]):
    T_ = logp.shape[0]
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    S = len(ext)
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # (T, S)
    alpha = np.full((T_, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(divide="ignore"):
        for t in range(1, T_):
            prev = alpha[t - 1]
            a1 = np.concatenate([[NEG_INF], prev[:-1]])
            a2 = np.concatenate([[NEG_INF, NEG_INF], prev[:-2]])[:S]
            a2 = np.where(skip, a2, NEG_INF)
            alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]
    beta = np.full((T_, S), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if S > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_fwd = np.zeros(S, dtype=bool)
    if S > 2:
        skip_fwd[:-2] = skip[2:]
    with np.errstate(divide="ignore"):
        for t in range(T_ - 2, -1, -1):
            nxt = beta[t + 1]
            b1 = np.concatenate([nxt[1:], [NEG_INF]])
            b2 = np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])[:S]
            b2 = np.where(skip_fwd, b2, NEG_INF)
            beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]
    return ext, alpha, beta, emit


def ctc_log_prob(logits: np.ndarray, target: Sequence[int]) -> float:
    """log p_CTC(target | x) with a per-frame log-softmax over the logits."""
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    if ctc_min_frames(target) > logp.shape[0]:
        return NEG_INF
    _, alpha, _, _ = _ctc_tables(logp, target)
    S = alpha.shape[1]
    return float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if S > 1 else alpha[-1, -1])


def ctc_loss(logits: Tensor, target: Sequence[int], return_feasible: bool = False):
    """-log of the summed probability of every alignment that collapses to ``target``.

    Infeasible targets (too long for the frame count) give +inf, flagged when
    ``return_feasible`` is set.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = [int(t) for t in target]
    if any(t == BLANK for t in target):
        raise ValueError("CTC target may not contain the blank symbol")
    logp = _log_softmax(logits.data)
    if ctc_min_frames(target) > logp.shape[0]:
        out = Tensor(math.inf)
        return (out, False) if return_feasible else out
    ext, alpha, beta, emit = _ctc_tables(logp, target)
    S = len(ext)
    logP = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if S > 1 else alpha[-1, -1])

    def bw(g):
        occ = alpha + beta - emit - logP  # log posterior of being in state s at t
        post = np.zeros_like(logp)
        with np.errstate(under="ignore"):
            np.add.at(post, (slice(None), ext), np.exp(occ))
        return (g * (np.exp(logp) - post),)

    out = T.custom_op(np.array(-logP), (logits,), bw, "ctc_loss")
    return (out, True) if return_feasible else out


def ctc_greedy_decode(logits) -> list[int]:
    best = np.argmax(np.asarray(logits.data if isinstance(logits, Tensor) else logits), axis=-1)
    out, prev = [], None
    for k in best:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return out


# -- character n-gram LM ------------------------------------------------------------

class CharNgramLM:
    """Add-k smoothed character n-gram with begin/end markers."""

    BOS, EOS = "<s>", "</s>"

    def __init__(self, transcripts: Sequence[str], order: int = 4, k: float = 0.1, alphabet: Sequence[str] | None = None):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.k = k
        chars = set(alphabet or [])
        for t in transcripts:
            chars.update(t)
        self.vocab = sorted(chars) + [self.EOS]
        self.counts: dict[tuple, Counter] = defaultdict(Counter)
        for t in transcripts:
            seq = [self.BOS] * (order - 1) + list(t) + [self.EOS]
            for i in range(order - 1, len(seq)):
                self.counts[tuple(seq[i - order + 1:i])][seq[i]] += 1
        self._totals = {h: sum(c.values()) for h, c in self.counts.items()}

    def _history(self, prefix: Sequence[str]) -> tuple:
        h = [self.BOS] * (self.order - 1) + list(prefix)
        return tuple(h[len(h) - self.order + 1:]) if self.order > 1 else ()

    def prob(self, symbol: str, prefix: Sequence[str] = ()) -> float:
        h = self._history(prefix)
        c = self.counts.get(h)
        num = (c[symbol] if c else 0) + self.k
        return num / (self._totals.get(h, 0) + self.k * len(self.vocab))

    def logp_next(self, symbol: str, prefix: Sequence[str] = ()) -> float:
        return math.log(self.prob(symbol, prefix))

    def logp(self, text: Sequence[str], eos: bool = True) -> float:
        """Chain-rule log-probability; ``eos`` adds the end-of-sentence term."""
        text = list(text)
        total = sum(self.logp_next(ch, text[:i]) for i, ch in enumerate(text))
        if eos:
            total += self.logp_next(self.EOS, text)
        return total


def train_char_ngram(transcripts: Sequence[str], order: int = 4, k: float = 0.1,
                     alphabet: Sequence[str] | None = None) -> CharNgramLM:
    return CharNgramLM(transcripts, order, k, alphabet)


# -- fused prefix beam search ------------------------------------------------------------

@dataclass
class DecodeWeights:
    w1: float = 2.0
    w2: float = -1.0
    beam: int = 16

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    score: float
    log_p_ctc: float
    log_p_lm: float = 0.0


def beam_search_fused(logits, lm: CharNgramLM | None, weights: DecodeWeights,
                      vocab: Vocabulary | None = None) -> Hypothesis:
    """CTC prefix beam search with shallow LM fusion.

    Prefixes are pruned on log p_CTC(prefix) + w1 log p_LM(prefix) + w2 |prefix|.
    Surviving prefixes are re-scored with the exact CTC forward probability and
    the full-sentence LM probability before the best one is returned.
    """
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    logp = _log_softmax(x)
    T_, V = logp.shape
    use_lm = lm is not None and weights.w1 != 0.0
    sym = (lambda i: vocab.symbols[i]) if vocab is not None else (lambda i: str(i))

    lm_cache: dict[tuple, float] = {(): 0.0}

    def lm_prefix(prefix: tuple) -> float:
        if not use_lm:
            return 0.0
        if prefix not in lm_cache:
            lm_cache[prefix] = lm_prefix(prefix[:-1]) + lm.logp_next(sym(prefix[-1]), [sym(i) for i in prefix[:-1]])
        return lm_cache[prefix]

    def rank(prefix, pb, pnb):
        return np.logaddexp(pb, pnb) + weights.w1 * lm_prefix(prefix) + weights.w2 * len(prefix)

    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(T_):
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            # blank keeps the prefix
            e = nxt[prefix]
            e[0] = np.logaddexp(e[0], total + logp[t, BLANK])
            last = prefix[-1] if prefix else None
            for c in range(1, V):
                p = logp[t, c]
                if c == last:
                    # repeat without blank collapses; after blank it extends
                    e[1] = np.logaddexp(e[1], pnb + p)
                    ext = nxt[prefix + (c,)]
                    ext[1] = np.logaddexp(ext[1], pb + p)
                else:
                    ext = nxt[prefix + (c,)]
                    ext[1] = np.logaddexp(ext[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-rank(kv[0], *kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:weights.beam]}

    best = None
    for prefix in beams:
        lp_ctc = ctc_log_prob(x, prefix)
        lp_lm = lm.logp([sym(i) for i in prefix]) if use_lm else 0.0
        score = lp_ctc + weights.w1 * lp_lm + weights.w2 * len(prefix)
        cand = Hypothesis(prefix, score, lp_ctc, lp_lm)
        if best is None or (cand.score, tuple(-i for i in prefix)) > (best.score, tuple(-i for i in best.labels)):
            best = cand
    return best


# -- schedule ---------------------------------------------------------------------

def tri_stage_lr(step: int, total: int, peak: float, warmup: float = 0.1, hold: float = 0.4) -> float:
    """Linear warmup over the first 10%, hold for 40%, then linear decay to 0."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    w_end = warmup * total
    h_end = (warmup + hold) * total
    if step < w_end:
        return peak * step / w_end
    if step <= h_end:
        return peak
    return peak * (total - step) / (total - h_end)


# -- fine-tuning ---------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    steps: int = 1500
    peak_lr: float = 1e-3
    freeze_steps: int = 150
    batch_size: int = 4
    ils_ft: str = "none"  # none | share | sep
    mask_prob: float = 0.0  # span-start probability of time masking during fine-tuning
    span_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.ils_ft not in ("none", "share", "sep"):
            raise ValueError(f"ils_ft must be none, share or sep; got {self.ils_ft!r}")
        if not 0.0 <= self.mask_prob <= 1.0 or self.span_len < 1:
            raise ValueError(f"invalid fine-tune masking p={self.mask_prob}, span_len={self.span_len}")


class CTCModel(nn.Module):
    """Pre-trained backbone without prediction heads plus CTC output layer(s)."""

    def __init__(self, backbone, vocab_size: int, ils_ft: str = "none", seed: int = 0):
        rng = np.random.default_rng([seed, 71])
        self.backbone = backbone
        backbone.heads = {}
        d = backbone.cfg.encoder.model_dim
        L = backbone.cfg.encoder.n_layers
        self.ils_ft = ils_ft
        self.ctc_layers = (L,) if ils_ft == "none" else tuple(sorted(set(backbone.cfg.supervised_layers) | {L}))
        self.output = nn.Linear(d, vocab_size, rng)
        self.extra_outputs = {}
        if ils_ft == "sep":
            self.extra_outputs = {str(l): nn.Linear(d, vocab_size, rng) for l in self.ctc_layers if l != L}

    @property
    def cfg(self):
        return self.backbone.cfg

    def output_for(self, layer: int) -> nn.Linear:
        if layer == self.cfg.encoder.n_layers or self.ils_ft == "share":
            return self.output
        return self.extra_outputs[str(layer)]

    def logits_from_features(self, feats: np.ndarray, mask: np.ndarray | None = None) -> dict[int, Tensor]:
        """feats: (T, C) frozen conv-encoder output -> logits per CTC layer."""
        m = self.backbone
        x = m.proj(m.feature_norm(Tensor(feats[None])))
        if mask is not None:
            x = apply_mask(x, mask, m.mask_emb)
        states = m.encoder(x)
        return {l: self.output_for(l)(states[l - 1])[0] for l in self.ctc_layers}

    def conv_features(self, wav: np.ndarray) -> np.ndarray:
        return self.backbone.feature_encoder(Tensor(wav[None])).data[0]

    def logits(self, wav: np.ndarray) -> np.ndarray:
        L = self.cfg.encoder.n_layers
        return self.logits_from_features(self.conv_features(wav))[L].data


def finetune(model: CTCModel, corpus, vocab: Vocabulary, cfg: FinetuneConfig,
             log_fn: Callable[[str], None] | None = None) -> CTCModel:
    """Adam + tri-stage schedule; conv encoder always frozen, Transformer frozen for ``freeze_steps``."""
    feats = {u.uid: model.conv_features(u.waveform.samples) for u in corpus}
    targets = {u.uid: vocab.encode(u.transcript) for u in corpus}
    named = dict(model.named_parameters())
    always_frozen = {k for k in named if k.startswith("backbone.feature_encoder.") or k == "backbone.mask_emb"}
    head_names = {k for k in named if k.startswith("output.") or k.startswith("extra_outputs.")}
    body = set(named) - always_frozen - head_names
    opt = nn.AdamW(named.items(), betas=(0.9, 0.98), weight_decay=0.0)
    params = list(named.values())
    for step in range(1, cfg.steps + 1):
        rng = np.random.default_rng([cfg.seed, 2000, step])
        picks = np.sort(rng.choice(len(corpus), size=min(cfg.batch_size, len(corpus)), replace=False))
        model.zero_grad()
        loss = Tensor(0.0)
        for i in picks:
            utt = corpus[i]
            mask = None
            if cfg.mask_prob > 0:
                mask = sample_mask(len(feats[utt.uid]), cfg.mask_prob, cfg.span_len, rng).mask
            for l, lg in model.logits_from_features(feats[utt.uid], mask).items():
                loss = loss + ctc_loss(lg, targets[utt.uid])
        loss = loss * (1.0 / len(picks))
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite CTC loss at fine-tune step {step}")
        T.backward(loss, params)
        frozen = always_frozen | (body if step <= cfg.freeze_steps else set())
        lr = tri_stage_lr(step, cfg.steps, cfg.peak_lr)
        opt.step(lr, frozen=frozen)
        if log_fn is not None:
            log_fn(f"{step}\t{lr:.6e}\t{loss.item():.6f}")
    return model
