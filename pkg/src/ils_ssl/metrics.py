"""Cluster quality against phone truth, layer-wise analysis and WER."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ils_ssl.labels import decimate_to_encoder_rate, kmeans_assign, kmeans_fit, layer_features


@dataclass
class JointCounts:
    counts: np.ndarray  # rows phones, cols clusters
    phone_ids: np.ndarray
    cluster_ids: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _as_seqs(x) -> list[np.ndarray]:
    if len(x) == 0:
        return []
    if np.ndim(x[0]) == 0:
        return [np.asarray(x, dtype=np.int64)]
    return [np.asarray(s, dtype=np.int64) for s in x]


def joint_counts(phones, clusters) -> JointCounts:
    """Frame-level co-occurrence over one sequence or a list of per-utterance sequences."""
    phones, clusters = _as_seqs(phones), _as_seqs(clusters)
    if len(phones) != len(clusters):
        raise ValueError(f"{len(phones)} phone sequences vs {len(clusters)} cluster sequences")
    for i, (p, c) in enumerate(zip(phones, clusters)):
        if len(p) != len(c):
            raise ValueError(f"sequence {i}: {len(p)} phone frames vs {len(c)} cluster frames")
    if not phones or sum(len(p) for p in phones) == 0:
        raise ValueError("joint_counts: no frames")
    y = np.concatenate(phones)
    z = np.concatenate(clusters)
    ys, yi = np.unique(y, return_inverse=True)
    zs, zi = np.unique(z, return_inverse=True)
    counts = np.zeros((len(ys), len(zs)), dtype=np.int64)
    np.add.at(counts, (yi, zi), 1)
    return JointCounts(counts, ys, zs)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def purity_and_pnmi(jc: JointCounts | np.ndarray) -> dict[str, float]:
    """Phone purity, cluster purity and PNMI = I(Y;Z)/H(Y) (natural log).

    PNMI is NaN with ``pnmi_defined=False`` when only one phone occurs.
    """
    n = jc.counts if isinstance(jc, JointCounts) else np.asarray(jc)
    total = n.sum()
    if total <= 0:
        raise ValueError("joint counts are empty")
    p = n / total
    py, pz = p.sum(1), p.sum(0)
    hy = _entropy(py)
    yi, zi = np.nonzero(p)
    pj = p[yi, zi]
    mi = float((pj * (np.log(pj) - np.log(py[yi]) - np.log(pz[zi]))).sum())
    defined = hy > 0
    return {
        "cluster_purity": float(p.max(axis=1).sum()),
        "phone_purity": float(p.max(axis=0).sum()),
        "pnmi": float(min(1.0, max(0.0, mi / hy))) if defined else math.nan,
        "pnmi_defined": defined,
    }


def wer(ref, hyp) -> float:
    """Levenshtein distance (S + I + D) over tokens divided by the reference length."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("wer: empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


def corpus_wer(refs: list[str], hyps: list[str]) -> float:
    """Word-level error rate pooled over utterances."""
    errs = words = 0
    for r, h in zip(refs, hyps):
        rw, hw = r.split(), h.split()
        errs += wer(rw, hw) * len(rw)
        words += len(rw)
    return errs / words


def frame_phones(utt) -> np.ndarray:
    """Ground-truth phones at the 20 ms encoder rate."""
    from ils_ssl.audio import expected_output_length
    return decimate_to_encoder_rate(utt.phone_ids, expected_output_length(len(utt.waveform)))


def layerwise_quality(model, fit_corpus, eval_corpus, C: int = 50, sample_fraction: float = 0.1,
                      seed: int = 0, max_iters: int = 100) -> list[dict]:
    """k-means each layer's unmasked states on a sampled fit split and score the eval split."""
    rng = np.random.default_rng([seed, 53])
    n_fit = max(1, int(round(sample_fraction * len(fit_corpus))))
    fit_idx = np.sort(rng.choice(len(fit_corpus), size=n_fit, replace=False))
    fit_set = [fit_corpus[i] for i in fit_idx]
    L = model.cfg.encoder.n_layers
    fit_feats = {u.uid: model.extract(u.waveform.samples) for u in fit_set}
    eval_feats = {u.uid: model.extract(u.waveform.samples) for u in eval_corpus}
    truth = [frame_phones(u) for u in eval_corpus]
    rows = []
    for l in range(1, L + 1):
        x = np.concatenate([fit_feats[u.uid][l - 1] for u in fit_set])
        cb = kmeans_fit(x, min(C, len(x)), seed + l, max_iters=max_iters, source=f"layer{l}")
        assigned = [kmeans_assign(eval_feats[u.uid][l - 1], cb) for u in eval_corpus]
        m = purity_and_pnmi(joint_counts(truth, assigned))
        rows.append({"layer": l, "cluster_purity": m["cluster_purity"],
                     "phone_purity": m["phone_purity"], "pnmi": m["pnmi"]})
    return rows


def write_quality_table(rows: list[dict], tsv_path, json_path=None) -> None:
    lines = ["layer\tcluster_purity\tphone_purity\tpnmi"]
    lines += [f"{r['layer']}\t{r['cluster_purity']:.6f}\t{r['phone_purity']:.6f}\t{r['pnmi']:.6f}" for r in rows]
    Path(tsv_path).write_text("\n".join(lines) + "\n")
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=1) + "\n")
