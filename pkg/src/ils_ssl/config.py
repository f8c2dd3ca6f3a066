"""Pipeline configuration: nested dataclasses loaded from YAML profiles.

Two profiles ship with the package.  ``desk-scale`` is what the tests and the
default CLI run use; ``paper-scale`` records the full-size recipe values and is
only meant to be read, not trained on a CPU.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ils_ssl.encoder import EncoderConfig

PROFILES = ("desk-scale", "paper-scale")


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    n_utts: int = 300
    n_finetune_utts: int = 50
    n_heldout_utts: int = 20
    n_eval_utts: int = 40
    n_phones: int = 12
    duration_ms: tuple[int, int] = (1500, 2500)
    n_words: int = 20
    n_speakers: int = 6
    seed: int = 0


@dataclass
class SSLSection:
    mask_prob: float = 0.08
    span_len: int = 10
    supervised_layers: tuple[int, ...] = (2, 4)
    share_heads: bool = False
    embed_dim: int = 32
    iter1_classes: int = 20
    iter2_classes: int = 50
    relabel_layer: int = 2
    label_sample_fraction: float = 1.0
    kmeans_max_iters: int = 100
    iter1_steps: int = 300
    iter2_steps: int = 600
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.08
    batch_size: int = 4
    crop_frames: int = 80
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.98)
    seed: int = 0


@dataclass
class FinetuneSection:
    steps: int = 1500
    peak_lr: float = 3e-3
    freeze_steps: int = 150
    batch_size: int = 8
    ils_ft: str = "none"
    mask_prob: float = 0.08
    span_len: int = 10
    seed: int = 0


@dataclass
class DecodeSection:
    w1: float = 2.0
    w2: float = -1.0
    beam: int = 16
    lm_order: int = 4
    lm_k: float = 0.1


@dataclass
class AnalysisSection:
    n_classes: int = 50
    sample_fraction: float = 0.3
    kmeans_max_iters: int = 100
    seed: int = 0


@dataclass
class PipelineConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssl: SSLSection = field(default_factory=SSLSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        L = self.encoder.n_layers
        K = tuple(sorted(set(int(l) for l in self.ssl.supervised_layers)))
        if not K:
            raise ConfigError("ssl.supervised_layers is empty")
        bad = [l for l in K if not 1 <= l <= L]
        if bad:
            raise ConfigError(f"ssl.supervised_layers {bad} outside [1, {L}]")
        self.ssl.supervised_layers = K
        if not 1 <= self.ssl.relabel_layer <= L:
            raise ConfigError(f"ssl.relabel_layer {self.ssl.relabel_layer} outside [1, {L}]")
        if self.finetune.ils_ft not in ("none", "share", "sep"):
            raise ConfigError(f"finetune.ils_ft must be none|share|sep, got {self.finetune.ils_ft!r}")
        if self.decode.beam < 1:
            raise ConfigError("decode.beam must be >= 1")
        if self.corpus.n_phones < 2:
            raise ConfigError("corpus.n_phones must be >= 2")
        for name in ("iter1_classes", "iter2_classes"):
            if getattr(self.ssl, name) < 2:
                raise ConfigError(f"ssl.{name} must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self, sections=None) -> str:
        """sha256 of the canonical JSON of the whole config, or of the named sections only."""
        d = self.to_dict()
        if sections is not None:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _coerce(value, annotation: str):
    if annotation.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(value)
    if annotation == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = _coerce(value, str(f.type))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def _profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    return resources.files("ils_ssl").joinpath("profiles", f"{name}.yaml").read_text()


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as YAML scalars or lists."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, profile: str = "desk-scale",
                overrides: list[str] | None = None) -> PipelineConfig:
    """Profile defaults, then the optional YAML file, then ``--set`` overrides."""
    data = yaml.safe_load(_profile_text(profile)) or {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        data = _merge(data, user)
    data = apply_overrides(data, overrides or [])
    return from_dict(data)


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: PipelineConfig) -> str:
    def plain(x: Any):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False)
