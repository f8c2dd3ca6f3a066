"""K-means codebooks and frame-level pseudo-labels."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ils_ssl.audio import compute_mfcc, expected_output_length

CODEBOOK_MAGIC = b"ILSCBK01"
LABELS_MAGIC = b"ILSLAB01"


@dataclass
class Codebook:
    centroids: np.ndarray
    source: str = "mfcc"

    @property
    def C(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty((len(x), len(c)))
    for s in range(0, len(x), chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("ncd,ncd->nc", diff, diff)
    return out


def _sq_dists_fast(x: np.ndarray, c: np.ndarray, xx: np.ndarray) -> np.ndarray:
    d = xx[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_assign(features: np.ndarray, cb: Codebook) -> np.ndarray:
    """Nearest centroid; ties go to the lowest index."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != cb.D:
        raise ValueError(f"feature dim {features.shape[1]} != codebook dim {cb.D}")
    return np.argmin(_sq_dists(features, cb.centroids), axis=1)


def _kmeans_pp(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, C):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(x)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans_fit(features: np.ndarray, C: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6,
               source: str = "mfcc", history: list | None = None) -> Codebook:
    """k-means++ seeding then Lloyd iterations.

    Empty clusters are moved to the point farthest from its assigned centroid.
    Distortion never increases across iterations (checked).
    """
    x = np.asarray(features, dtype=np.float64)
    if len(x) < C:
        raise ValueError(f"k-means needs N >= C, got N={len(x)}, C={C}")
    rng = np.random.default_rng([seed, 31])
    cent = _kmeans_pp(x, C, rng)
    xx = (x * x).sum(1)
    prev = np.inf
    for _ in range(max_iters):
        d = _sq_dists_fast(x, cent, xx)
        assign = np.argmin(d, axis=1)
        best = d[np.arange(len(x)), assign]
        distortion = best.sum()
        if distortion > prev * (1 + 1e-9) + 1e-9:
            raise RuntimeError(f"k-means distortion increased: {prev} -> {distortion}")
        prev = distortion
        if history is not None:
            history.append(float(distortion))
        counts = np.bincount(assign, minlength=C)
        onehot = np.zeros((C, len(x)))
        onehot[assign, np.arange(len(x))] = 1.0
        new = onehot @ x
        filled = counts > 0
        new[filled] /= counts[filled, None]
        taken = set()
        for c in np.flatnonzero(~filled):
            order = np.argsort(-best, kind="stable")
            far = next(i for i in order if i not in taken)
            taken.add(far)
            new[c] = x[far]
            best[far] = 0.0
        shift = np.sqrt(((new - cent) ** 2).sum(1)).max()
        cent = new
        if shift < tol:
            break
    return Codebook(cent, source)


# -- pseudo-label construction ----------------------------------------------------------

def _subset(corpus, fraction: float, seed: int):
    if fraction >= 1.0:
        return list(corpus)
    rng = np.random.default_rng([seed, 41])
    n = max(1, int(round(fraction * len(corpus))))
    idx = np.sort(rng.choice(len(corpus), size=n, replace=False))
    return [corpus[i] for i in idx]


def decimate_to_encoder_rate(labels10: np.ndarray, n_frames: int) -> np.ndarray:
    """Take even 10 ms frames, then truncate or repeat the last label to ``n_frames``."""
    lab = np.asarray(labels10)[::2]
    if len(lab) >= n_frames:
        return lab[:n_frames]
    return np.concatenate([lab, np.repeat(lab[-1], n_frames - len(lab))])


def build_iteration1_targets(corpus, C: int = 20, seed: int = 0, sample_fraction: float = 1.0,
                             max_iters: int = 100) -> tuple[dict[str, np.ndarray], Codebook]:
    feats = {u.uid: compute_mfcc(u.waveform).frames for u in corpus}
    fit = np.concatenate([feats[u.uid] for u in _subset(corpus, sample_fraction, seed)])
    cb = kmeans_fit(fit, C, seed, max_iters=max_iters, source="mfcc")
    labels = {}
    for u in corpus:
        lab10 = kmeans_assign(feats[u.uid], cb)
        labels[u.uid] = decimate_to_encoder_rate(lab10, expected_output_length(len(u.waveform)))
    return labels, cb


def layer_features(corpus, model, layer: int) -> dict[str, np.ndarray]:
    n_layers = model.cfg.encoder.n_layers
    if not 1 <= layer <= n_layers:
        raise ValueError(f"layer {layer} outside [1, {n_layers}]")
    return {u.uid: model.extract(u.waveform.samples, layer)[layer - 1] for u in corpus}


def build_iteration2_targets(corpus, model, layer: int, C: int = 50, seed: int = 0,
                             sample_fraction: float = 1.0, max_iters: int = 100
                             ) -> tuple[dict[str, np.ndarray], Codebook]:
    feats = layer_features(corpus, model, layer)
    fit = np.concatenate([feats[u.uid] for u in _subset(corpus, sample_fraction, seed)])
    cb = kmeans_fit(fit, C, seed, max_iters=max_iters, source=f"layer{layer}")
    return {u.uid: kmeans_assign(feats[u.uid], cb) for u in corpus}, cb


# -- persistence ------------------------------------------------------------------------

def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    shift = result = 0
    while True:
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7


def save_labels(labels: dict[str, np.ndarray], path) -> None:
    out = bytearray(LABELS_MAGIC)
    out += _varint(len(labels))
    for uid in sorted(labels):
        key = uid.encode()
        out += _varint(len(key)) + key
        seq = labels[uid]
        out += _varint(len(seq))
        for v in seq:
            out += _varint(int(v))
    Path(path).write_bytes(bytes(out))


def load_labels(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != LABELS_MAGIC:
        raise ValueError(f"{path}: not a label file")
    pos = 8
    n, pos = _read_varint(buf, pos)
    labels = {}
    for _ in range(n):
        klen, pos = _read_varint(buf, pos)
        uid = buf[pos:pos + klen].decode()
        pos += klen
        m, pos = _read_varint(buf, pos)
        seq = np.empty(m, dtype=np.int64)
        for i in range(m):
            seq[i], pos = _read_varint(buf, pos)
        labels[uid] = seq
    return labels


def save_codebook(cb: Codebook, path) -> None:
    tag = cb.source.encode()
    header = CODEBOOK_MAGIC + struct.pack("<IIH", cb.C, cb.D, len(tag)) + tag
    Path(path).write_bytes(header + cb.centroids.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    buf = Path(path).read_bytes()
    if buf[:8] != CODEBOOK_MAGIC:
        raise ValueError(f"{path}: not a codebook file")
    C, D, n = struct.unpack_from("<IIH", buf, 8)
    pos = 8 + 10
    tag = buf[pos:pos + n].decode()
    data = np.frombuffer(buf, dtype="<f4", offset=pos + n, count=C * D).astype(np.float64)
    return Codebook(data.reshape(C, D), tag)
