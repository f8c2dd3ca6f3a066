"""Synthetic phone corpus, MFCC features and the strided conv feature encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from ils_ssl import nn
from ils_ssl import tensor as T
from ils_ssl.tensor import Tensor

SAMPLE_RATE = 16000
FRAME_10MS = 160
CONV_KERNELS = (10, 3, 3, 3, 3, 2, 2)
CONV_STRIDES = (5, 2, 2, 2, 2, 2, 2)
ENCODER_HOP = int(np.prod(CONV_STRIDES))  # 320 samples = 20 ms


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class SyntheticUtterance:
    uid: str
    waveform: Waveform
    phone_ids: np.ndarray  # one id per 10 ms frame
    transcript: str
    speaker: int = -1


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_stride_ms: float
    source: str = "mfcc"


def phone_char(p: int) -> str:
    """Phone 0 is the word separator (space); phones 1.. map to a, b, c, ..."""
    return " " if p == 0 else chr(ord("a") + p - 1)


def transcript_of(segments: list[int]) -> str:
    return "".join(phone_char(p) for p in segments)


# -- corpus generation ----------------------------------------------------------

@dataclass
class CorpusSpec:
    n_utts: int = 300
    n_phones: int = 12
    seed: int = 0
    duration_range: tuple[int, int] = (1500, 2500)
    n_words: int = 20
    n_speakers: int = 6
    noise_level: float = 0.01
    nuisance: float = 1.0
    segment_ms: tuple[int, int] = field(default=(60, 200))


def _templates(n_phones: int):
    """(f0, formant) per phone; formant centres are spread evenly over 400-6000 Hz."""
    formants = np.linspace(400.0, 6000.0, n_phones)
    f0 = 95.0 + 9.0 * np.arange(n_phones)
    return f0, formants


def render_phone(p: int, n: int, n_phones: int, rng: np.random.Generator, pitch: float = 1.0) -> np.ndarray:
    """Harmonic stack for phone ``p`` shaped by a Gaussian formant envelope, band-limited to 7 kHz."""
    f0s, formants = _templates(n_phones)
    f0 = f0s[p] * pitch
    t = np.arange(n) / SAMPLE_RATE
    harm = np.arange(1, int(7000.0 // f0) + 1) * f0
    amps = np.exp(-0.5 * ((harm - formants[p]) / 180.0) ** 2)
    keep = amps > 1e-3
    harm, amps = harm[keep], amps[keep]
    phases = rng.uniform(0, 2 * np.pi, size=len(harm))
    sig = (amps[:, None] * np.sin(2 * np.pi * harm[:, None] * t[None, :] + phases[:, None])).sum(0)
    sig /= np.sqrt(np.mean(sig ** 2)) + 1e-12
    ramp = min(80, n // 4)
    if ramp > 0:
        win = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        sig[:ramp] *= win
        sig[-ramp:] *= win[::-1]
    return sig


def make_lexicon(n_phones: int, n_words: int, rng: np.random.Generator) -> list[list[int]]:
    letters = list(range(1, n_phones))
    words = []
    for _ in range(n_words):
        length = 1 if len(letters) == 1 else int(rng.integers(2, 5))
        w = [int(rng.choice(letters))]
        while len(w) < length:
            nxt = int(rng.choice(letters))
            if nxt != w[-1]:
                w.append(nxt)
        words.append(w)
    return words


def generate_corpus(n_utts: int, n_phones: int = 12, seed: int = 0,
                    duration_range: tuple[int, int] = (1500, 2500), **kw) -> list[SyntheticUtterance]:
    """Concatenate per-phone templates into utterances built from a random word lexicon.

    Segment durations are multiples of 10 ms so every 10 ms frame has one true phone.
    Per-speaker nuisance (pitch, gain, low-frequency hum) varies across utterances.
    """
    spec = CorpusSpec(n_utts=n_utts, n_phones=n_phones, seed=seed, duration_range=tuple(duration_range), **kw)
    lo, hi = spec.duration_range
    if n_phones < 2:
        raise ValueError("n_phones must be >= 2")
    if n_utts < 1 or lo < 200 or hi < lo:
        raise ValueError(f"degenerate corpus ranges: n_utts={n_utts}, duration_range={spec.duration_range}")
    seg_lo, seg_hi = spec.segment_ms
    if seg_lo < 10 or seg_hi < seg_lo:
        raise ValueError(f"degenerate segment range {spec.segment_ms}")

    rng = np.random.default_rng([seed, 0])
    lexicon = make_lexicon(n_phones, spec.n_words, rng)
    spk_rng = np.random.default_rng([seed, 1])
    speakers = [dict(pitch=spk_rng.uniform(0.9, 1.1),
                     gain=spk_rng.uniform(0.3, 0.9),
                     hum_f=spk_rng.uniform(60.0, 200.0),
                     hum_a=spk_rng.uniform(0.3, 0.8) * spec.nuisance,
                     noise=spec.noise_level * spk_rng.uniform(0.5, 2.0))
                for _ in range(max(1, spec.n_speakers))]

    out = []
    for u in range(n_utts):
        urng = np.random.default_rng([seed, 2, u])
        spk = int(urng.integers(len(speakers)))
        s = speakers[spk]
        target = urng.integers(lo // 10, hi // 10 + 1)
        segments: list[int] = []
        dur10: list[int] = []
        while sum(dur10) < target:
            word = lexicon[int(urng.integers(len(lexicon)))]
            for p in ([0] if segments else []) + word:
                segments.append(p)
                dur10.append(int(urng.integers(seg_lo // 10, seg_hi // 10 + 1)))
        pieces, phones = [], []
        for p, d in zip(segments, dur10):
            n = d * FRAME_10MS
            pieces.append(render_phone(p, n, n_phones, urng, s["pitch"]) * urng.uniform(0.9, 1.1))
            phones.extend([p] * d)
        sig = np.concatenate(pieces) * s["gain"]
        t = np.arange(len(sig)) / SAMPLE_RATE
        sig = sig + s["gain"] * s["hum_a"] * np.sin(2 * np.pi * s["hum_f"] * t + urng.uniform(0, 2 * np.pi))
        sig = sig + s["noise"] * urng.standard_normal(len(sig))
        sig = sig / max(1.0, np.max(np.abs(sig)) / 0.99)
        sig = sig.astype(np.float32).astype(np.float64)
        out.append(SyntheticUtterance(f"utt{u:05d}", Waveform(sig), np.array(phones, dtype=np.int64),
                                      transcript_of(segments), spk))
    return out


# -- corpus persistence ------------------------------------------------------------

def _rle(ids: np.ndarray) -> str:
    runs = []
    start = 0
    for i in range(1, len(ids) + 1):
        if i == len(ids) or ids[i] != ids[start]:
            runs.append(f"{int(ids[start])}:{i - start}")
            start = i
    return ",".join(runs)


def _unrle(text: str) -> np.ndarray:
    ids = []
    for run in text.split(","):
        p, n = run.split(":")
        ids.extend([int(p)] * int(n))
    return np.array(ids, dtype=np.int64)


def write_corpus(corpus: list[SyntheticUtterance], out_dir) -> Path:
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    rows = []
    for utt in corpus:
        (out / f"{utt.uid}.f32").write_bytes(utt.waveform.samples.astype("<f4").tobytes())
        rows.append(f"{utt.uid}\t{len(utt.waveform)}\t{utt.transcript}\t{_rle(utt.phone_ids)}\n")
    with open(out / "manifest.tsv", "w", newline="\n") as fh:
        fh.write("id\tn_samples\ttranscript\tphones\n")
        fh.writelines(rows)
    return out


def read_corpus(in_dir) -> list[SyntheticUtterance]:
    d = Path(in_dir)
    manifest = d / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    corpus = []
    with open(manifest) as fh:
        next(fh)
        for line in fh:
            uid, n, transcript, phones = line.rstrip("\n").split("\t")
            samples = np.fromfile(d / f"{uid}.f32", dtype="<f4").astype(np.float64)
            if len(samples) != int(n):
                raise ValueError(f"{d / (uid + '.f32')}: expected {n} samples, found {len(samples)}")
            corpus.append(SyntheticUtterance(uid, Waveform(samples), _unrle(phones), transcript))
    return corpus


# -- MFCC ---------------------------------------------------------------------

def _mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(n_filters: int = 26, n_fft: int = 512, sr: int = SAMPLE_RATE) -> np.ndarray:
    pts = _mel_inv(np.linspace(_mel(0.0), _mel(sr / 2), n_filters + 2))
    bins = np.floor((n_fft + 1) * pts / sr).astype(int)
    fb = np.zeros((n_filters, n_fft // 2 + 1))
    for m in range(1, n_filters + 1):
        l, c, r = bins[m - 1], bins[m], bins[m + 1]
        for k in range(l, c):
            fb[m - 1, k] = (k - l) / max(c - l, 1)
        for k in range(c, r):
            fb[m - 1, k] = (r - k) / max(r - c, 1)
    return fb


_FBANK = mel_filterbank()


def deltas(feat: np.ndarray, n: int = 2) -> np.ndarray:
    """Regression-window temporal differences with edge replication."""
    T_ = len(feat)
    padded = np.pad(feat, ((n, n), (0, 0)), mode="edge")
    denom = 2 * sum(i * i for i in range(1, n + 1))
    out = np.zeros_like(feat)
    for i in range(1, n + 1):
        out += i * (padded[n + i:n + i + T_] - padded[n - i:n - i + T_])
    return out / denom


def compute_mfcc(w: Waveform, dither: float = 0.0, rng: np.random.Generator | None = None) -> FeatureSequence:
    """13 cepstra (c0 in place of log energy) plus deltas and delta-deltas; 25 ms window, 10 ms hop."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    win, hop, n_fft = 400, FRAME_10MS, 512
    if len(x) < win:
        raise ValueError(f"waveform too short for MFCC: {len(x)} samples < {win}")
    if dither:
        x = x + dither * (rng or np.random.default_rng(0)).standard_normal(len(x))
    x = np.append(x[0], x[1:] - 0.97 * x[:-1])
    n_frames = (len(x) - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2 / n_fft
    logmel = np.log(np.maximum(power @ _FBANK.T, 1e-10))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :13]
    d1 = deltas(ceps)
    d2 = deltas(d1)
    return FeatureSequence(np.hstack([ceps, d1, d2]), 10.0, "mfcc")


# -- conv feature encoder -------------------------------------------------------------

def expected_output_length(n_samples: int) -> int:
    length = n_samples
    for k, s in zip(CONV_KERNELS, CONV_STRIDES):
        length = (length - k) // s + 1
    return int(length)


MIN_SAMPLES = 400


class ConvFeatureEncoder(nn.Module):
    """Seven strided convolutions, each followed by channel layer norm and GELU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.convs = []
        self.norms = []
        cin = 1
        for k in CONV_KERNELS:
            std = np.sqrt(2.0 / (cin * k))
            self.convs.append(nn.parameter(rng.normal(0.0, std, size=(channels, cin, k))))
            self.norms.append(nn.LayerNorm(channels))
            cin = channels
        self.channels = channels

    def __call__(self, wav, return_first_preact: bool = False) -> Tensor:
        """wav: (B, L) array or Tensor -> (B, T, channels)."""
        x = wav if isinstance(wav, Tensor) else Tensor(np.atleast_2d(wav))
        if x.shape[-1] < MIN_SAMPLES:
            raise ValueError(f"conv encoder needs at least {MIN_SAMPLES} samples, got {x.shape[-1]}")
        x = x.reshape(x.shape[0], x.shape[-1], 1)
        first = None
        for i, (w, norm, s) in enumerate(zip(self.convs, self.norms, CONV_STRIDES)):
            x = T.conv1d(x, w, stride=s)
            if i == 0:
                first = x
            x = T.gelu(norm(x))
        return (x, first) if return_first_preact else x


def conv_feature_encoder(w: Waveform, encoder: ConvFeatureEncoder) -> FeatureSequence:
    out = encoder(w.samples[None, :])
    return FeatureSequence(out.data[0], 20.0, "conv_encoder")
