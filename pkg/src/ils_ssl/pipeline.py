"""The two-iteration pipeline as plain functions; the CLI is a thin layer over these."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from ils_ssl import checkpoint as ck
from ils_ssl import nn
from ils_ssl.asr import (CTCModel, DecodeWeights, FinetuneConfig, Vocabulary, beam_search_fused,
                         ctc_greedy_decode, ctc_log_prob, finetune, train_char_ngram)
from ils_ssl.audio import generate_corpus, read_corpus, write_corpus
from ils_ssl.config import PipelineConfig
from ils_ssl.encoder import EncoderConfig
from ils_ssl.labels import (build_iteration1_targets, build_iteration2_targets, load_labels, save_codebook,
                            save_labels)
from ils_ssl.metrics import corpus_wer, layerwise_quality, write_quality_table
from ils_ssl.ssl import HubertModel, ModelConfig, PretrainConfig, pretrain

log = logging.getLogger(__name__)

SPLITS = ("pretrain", "finetune", "heldout", "eval")
# config sections that shape each kind of checkpoint; decode/analysis never invalidate one
PRETRAIN_SECTIONS = ("corpus", "encoder", "ssl")
FINETUNE_SECTIONS = PRETRAIN_SECTIONS + ("finetune",)


class PipelineError(RuntimeError):
    pass


def fingerprint(cfg: PipelineConfig, sections=PRETRAIN_SECTIONS) -> str:
    return cfg.fingerprint(sections)


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Same config with every training/analysis seed set to ``seed`` (the corpus is left alone)."""
    return replace(cfg, ssl=replace(cfg.ssl, seed=seed), finetune=replace(cfg.finetune, seed=seed),
                   analysis=replace(cfg.analysis, seed=seed))


# -- corpus ---------------------------------------------------------------------------

def make_splits(cfg: PipelineConfig) -> dict[str, list]:
    c = cfg.corpus
    sizes = [c.n_utts, c.n_finetune_utts, c.n_heldout_utts, c.n_eval_utts]
    utts = generate_corpus(sum(sizes), c.n_phones, c.seed, tuple(c.duration_ms),
                           n_words=c.n_words, n_speakers=c.n_speakers)
    out, start = {}, 0
    for name, n in zip(SPLITS, sizes):
        out[name] = utts[start:start + n]
        start += n
    return out


def cmd_gen_corpus(cfg: PipelineConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise PipelineError(f"gen-corpus: parent directory {out_dir.parent} does not exist")
    out_dir.mkdir(exist_ok=True)
    splits = make_splits(cfg)
    for name, utts in splits.items():
        if utts:
            split_dir = out_dir / name
            split_dir.mkdir(exist_ok=True)
            write_corpus(utts, split_dir)
    return {name: len(u) for name, u in splits.items()}


def load_split(corpus_dir, name: str) -> list:
    path = Path(corpus_dir) / name
    if not (path / "manifest.tsv").exists():
        raise PipelineError(f"no corpus split at {path} (run gen-corpus first)")
    return read_corpus(path)


# -- model construction -------------------------------------------------------------------

def model_config(cfg: PipelineConfig, iteration: int) -> ModelConfig:
    L = cfg.encoder.n_layers
    if iteration == 1:
        K = (L,)
        if tuple(cfg.ssl.supervised_layers) != K:
            log.warning("iteration 1 trains the top layer only: supervised layers %s -> %s",
                        list(cfg.ssl.supervised_layers), list(K))
        C = cfg.ssl.iter1_classes
    elif iteration == 2:
        K = tuple(cfg.ssl.supervised_layers)
        C = cfg.ssl.iter2_classes
    else:
        raise PipelineError(f"iteration must be 1 or 2, got {iteration}")
    return ModelConfig(encoder=replace(cfg.encoder), embed_dim=cfg.ssl.embed_dim, n_classes=C,
                       supervised_layers=K, share_heads=cfg.ssl.share_heads, seed=cfg.ssl.seed)


def pretrain_config(cfg: PipelineConfig, iteration: int) -> PretrainConfig:
    s = cfg.ssl
    return PretrainConfig(steps=s.iter1_steps if iteration == 1 else s.iter2_steps, peak_lr=s.peak_lr,
                          warmup_fraction=s.warmup_fraction, batch_size=s.batch_size,
                          crop_frames=s.crop_frames, mask_prob=s.mask_prob, span_len=s.span_len,
                          weight_decay=s.weight_decay, betas=tuple(s.betas), seed=s.seed)


def model_config_from_meta(meta: dict) -> ModelConfig:
    m = dict(meta["model"])
    m["encoder"] = EncoderConfig(**m["encoder"])
    m["supervised_layers"] = tuple(m["supervised_layers"])
    return ModelConfig(**m)


def load_pretrained(path, cfg: PipelineConfig | None = None, force: bool = False):
    expected = fingerprint(cfg) if cfg is not None else None
    ckpt = ck.load(path, expected, force)
    if ckpt.meta.get("kind") != "pretrain":
        raise PipelineError(f"{path}: expected a pre-training checkpoint, found {ckpt.meta.get('kind')!r}")
    model = HubertModel(model_config_from_meta(ckpt.meta))
    ck.load_into(model, ckpt)
    return model, ckpt


def _logger(path: Path | None):
    if path is None:
        return None, None
    fh = open(path, "a")

    def write(line: str) -> None:
        fh.write(line + "\n")
        fh.flush()
    return write, fh


# -- commands ---------------------------------------------------------------------------

def cmd_relabel(cfg: PipelineConfig, corpus_dir, prev_checkpoint, out_labels, force: bool = False) -> dict:
    """Cluster layer ``ssl.relabel_layer`` of a trained model into iteration-2 targets."""
    corpus = load_split(corpus_dir, "pretrain")
    model, _ = load_pretrained(prev_checkpoint, cfg, force)
    s = cfg.ssl
    labels, cb = build_iteration2_targets(corpus, model, s.relabel_layer, s.iter2_classes, s.seed,
                                          s.label_sample_fraction, s.kmeans_max_iters)
    out_labels = Path(out_labels)
    save_labels(labels, out_labels)
    save_codebook(cb, out_labels.with_suffix(".codebook"))
    return {"utterances": len(labels), "layer": s.relabel_layer, "classes": cb.C}


def cmd_pretrain(cfg: PipelineConfig, corpus_dir, out_checkpoint, iteration: int, prev_checkpoint=None,
                 labels_path=None, resume_from=None, stop_step: int | None = None, force: bool = False,
                 log_path=None) -> dict:
    """Train one iteration and write a checkpoint (plus its step log).

    Iteration 1 clusters MFCCs and supervises the top layer only.  Iteration 2
    needs the iteration-1 checkpoint: its targets come from ``labels_path`` when
    given, otherwise the relabel step runs inline.
    """
    if iteration == 2 and prev_checkpoint is None:
        raise PipelineError("pretrain --iteration 2 requires --prev (the iteration-1 checkpoint)")
    corpus = load_split(corpus_dir, "pretrain")
    out_checkpoint = Path(out_checkpoint)
    s = cfg.ssl
    if iteration == 1:
        labels, cb = build_iteration1_targets(corpus, s.iter1_classes, s.seed, s.label_sample_fraction,
                                              s.kmeans_max_iters)
    elif labels_path is not None:
        labels = load_labels(labels_path)
    else:
        prev, _ = load_pretrained(prev_checkpoint, cfg, force)
        labels, cb = build_iteration2_targets(corpus, prev, s.relabel_layer, s.iter2_classes, s.seed,
                                              s.label_sample_fraction, s.kmeans_max_iters)
    missing = [u.uid for u in corpus if u.uid not in labels]
    if missing:
        raise PipelineError(f"labels missing for {len(missing)} utterances, first {missing[0]}")

    mcfg = model_config(cfg, iteration)
    pcfg = pretrain_config(cfg, iteration)
    model = HubertModel(mcfg)
    opt = nn.AdamW(model.named_parameters(), pcfg.betas, weight_decay=pcfg.weight_decay)
    start = 0
    if resume_from is not None:
        state = ck.load(resume_from, fingerprint(cfg), force)
        if state.meta.get("iteration") != iteration:
            raise PipelineError(f"{resume_from} is an iteration-{state.meta.get('iteration')} checkpoint")
        ck.load_into(model, state)
        opt.load_state(state.tensors, state.step)
        start = state.step
    write, fh = _logger(Path(log_path) if log_path else out_checkpoint.with_suffix(".log"))
    try:
        model, opt, losses = pretrain(corpus, labels, model, pcfg, opt, start, stop_step, write)
    finally:
        if fh is not None:
            fh.close()
    step = start + len(losses)
    meta = {"kind": "pretrain", "iteration": iteration, "model": asdict(mcfg), "total_steps": pcfg.steps}
    ck.save(ck.Checkpoint(fingerprint(cfg), step, meta, ck.model_tensors(model, opt)), out_checkpoint)
    if iteration == 1 or labels_path is None:
        save_labels(labels, out_checkpoint.with_suffix(".labels"))
    return {"step": step, "supervised_layers": list(mcfg.supervised_layers),
            "final_loss": losses[-1] if losses else math.nan,
            "parameters": model.num_parameters()}


def build_vocab(cfg: PipelineConfig) -> Vocabulary:
    return Vocabulary.for_phones(cfg.corpus.n_phones)


def finetune_config(cfg: PipelineConfig) -> FinetuneConfig:
    f = cfg.finetune
    return FinetuneConfig(steps=f.steps, peak_lr=f.peak_lr, freeze_steps=f.freeze_steps,
                          batch_size=f.batch_size, ils_ft=f.ils_ft, mask_prob=f.mask_prob,
                          span_len=f.span_len, seed=f.seed)


def cmd_finetune(cfg: PipelineConfig, corpus_dir, checkpoint, out_checkpoint, force: bool = False,
                 log_path=None) -> dict:
    corpus = load_split(corpus_dir, "finetune")
    backbone, _ = load_pretrained(checkpoint, cfg, force)
    vocab = build_vocab(cfg)
    fcfg = finetune_config(cfg)
    model = CTCModel(backbone, len(vocab), fcfg.ils_ft, fcfg.seed)
    out_checkpoint = Path(out_checkpoint)
    write, fh = _logger(Path(log_path) if log_path else out_checkpoint.with_suffix(".log"))
    try:
        finetune(model, corpus, vocab, fcfg, write)
    finally:
        if fh is not None:
            fh.close()
    meta = {"kind": "finetune", "model": asdict(backbone.cfg), "ils_ft": fcfg.ils_ft,
            "vocab": vocab.symbols}
    ck.save(ck.Checkpoint(fingerprint(cfg, FINETUNE_SECTIONS), fcfg.steps, meta, ck.model_tensors(model)),
            out_checkpoint)
    return {"step": fcfg.steps, "parameters": model.num_parameters(), "ctc_layers": list(model.ctc_layers)}


def load_finetuned(path, cfg: PipelineConfig | None = None, force: bool = False) -> tuple[CTCModel, Vocabulary]:
    expected = fingerprint(cfg, FINETUNE_SECTIONS) if cfg is not None else None
    ckpt = ck.load(path, expected, force)
    if ckpt.meta.get("kind") != "finetune":
        raise PipelineError(f"{path}: expected a fine-tuned checkpoint, found {ckpt.meta.get('kind')!r}")
    vocab = Vocabulary(list(ckpt.meta["vocab"]))
    backbone = HubertModel(model_config_from_meta(ckpt.meta))
    model = CTCModel(backbone, len(vocab), ckpt.meta["ils_ft"])
    ck.load_into(model, ckpt)
    return model, vocab


def cmd_decode(cfg: PipelineConfig, corpus_dir, checkpoint, out_path, split: str = "heldout",
               force: bool = False) -> dict:
    """Write ``id<TAB>hyp<TAB>composite<TAB>log p_CTC`` per utterance; return greedy and fused WER."""
    model, vocab = load_finetuned(checkpoint, cfg, force)
    utts = load_split(corpus_dir, split)
    lm_text = [u.transcript for u in load_split(corpus_dir, "pretrain") + load_split(corpus_dir, "finetune")]
    d = cfg.decode
    lm = train_char_ngram(lm_text, d.lm_order, d.lm_k, alphabet=vocab.symbols[1:])
    weights = DecodeWeights(d.w1, d.w2, d.beam)
    lines, refs, greedy, fused = [], [], [], []
    for u in utts:
        logits = model.logits(u.waveform.samples)
        g = ctc_greedy_decode(logits)
        hyp = beam_search_fused(logits, lm, weights, vocab)
        text = vocab.decode(hyp.labels)
        refs.append(u.transcript)
        greedy.append(vocab.decode(g))
        fused.append(text)
        lines.append(f"{u.uid}\t{text}\t{hyp.score:.10f}\t{hyp.log_p_ctc:.10f}")
    Path(out_path).write_text("\n".join(lines) + "\n")
    return {"utterances": len(utts), "greedy_wer": corpus_wer(refs, greedy), "fused_wer": corpus_wer(refs, fused),
            "greedy_log_p_ctc": float(np.mean([ctc_log_prob(model.logits(u.waveform.samples), vocab.encode(h))
                                               for u, h in zip(utts, greedy)])) if utts else math.nan}


def cmd_analyze(cfg: PipelineConfig, corpus_dir, checkpoint, out_prefix, force: bool = False) -> list[dict]:
    """Per-layer cluster purity, phone purity and PNMI; writes ``<prefix>.tsv`` and ``<prefix>.json``."""
    model, _ = load_pretrained(checkpoint, cfg, force)
    fit = load_split(corpus_dir, "pretrain")
    ev = load_split(corpus_dir, "eval")
    a = cfg.analysis
    rows = layerwise_quality(model, fit, ev, a.n_classes, a.sample_fraction, a.seed, a.kmeans_max_iters)
    out_prefix = str(out_prefix)
    write_quality_table(rows, out_prefix + ".tsv", out_prefix + ".json")
    return rows


def summary_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=float)
