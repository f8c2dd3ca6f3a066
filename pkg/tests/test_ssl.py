import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_softmax

from ils_ssl import tensor as T
from ils_ssl.audio import generate_corpus
from ils_ssl.encoder import EncoderConfig
from ils_ssl.labels import build_iteration1_targets
from ils_ssl.ssl import (HubertModel, MaskSpec, ModelConfig, PredictionHead, PretrainConfig, TrainingDiverged,
                         apply_mask, codeword_distribution, ils_loss, pretrain, sample_mask, warmup_decay_lr)
from ils_ssl.tensor import Tensor

from _oracles import grad_error


def test_mask_p_zero_is_empty():
    assert sample_mask(50, 0.0, 10, np.random.default_rng(0)).masked_indices.size == 0


def test_forced_start_covers_everything():
    assert MaskSpec(10, [0], 10).masked_indices.tolist() == list(range(10))


def test_spans_truncate_at_end():
    assert MaskSpec(10, [7], 10).masked_indices.tolist() == [7, 8, 9]
    with pytest.raises(ValueError):
        MaskSpec(10, [10], 3)


def test_mask_rejects_bad_parameters():
    with pytest.raises(ValueError):
        sample_mask(10, 1.5, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_mask(10, 0.1, 0, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.floats(0, 1), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_mask_is_union_of_spans(T_, p, span, seed):
    spec = sample_mask(T_, p, span, np.random.default_rng(seed))
    union = set()
    for s in spec.span_starts:
        union.update(range(s, min(s + span, T_)))
    assert spec.masked_indices.tolist() == sorted(union)


def test_masked_fraction_statistics():
    fracs = [sample_mask(1000, 0.08, 10, np.random.default_rng(s)).masked_indices.size / 1000 for s in range(1000)]
    target = 1 - 0.92 ** 10
    assert target == pytest.approx(0.5656, abs=1e-4)
    assert abs(np.mean(fracs) - target) < 0.01
    # frames near the start have fewer covering starts; the exact mean accounts for that
    exact = np.mean([1 - 0.92 ** min(t + 1, 10) for t in range(1000)])
    assert abs(np.mean(fracs) - exact) < 3 * np.std(fracs) / math.sqrt(1000) + 1e-3


def test_apply_mask_cases():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 3)))
    emb = Tensor(rng.normal(size=3), requires_grad=True)
    assert np.array_equal(apply_mask(x, np.zeros(5, bool), emb).data, x.data)
    full = apply_mask(x, np.ones(5, bool), emb).data
    assert np.array_equal(full, np.tile(emb.data, (5, 1)))
    part = apply_mask(x, np.array([1, 3]), emb).data
    assert np.array_equal(part[[0, 2, 4]], x.data[[0, 2, 4]])
    with pytest.raises(IndexError):
        apply_mask(x, np.array([5]), emb)


def test_empty_mask_gives_zero_mask_embedding_grad():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 3)))
    emb = Tensor(rng.normal(size=3), requires_grad=True)
    T.backward(T.tsum(apply_mask(x, np.zeros(5, bool), emb) * Tensor(rng.normal(size=(5, 3)))), [emb])
    assert np.array_equal(emb.grad, np.zeros(3))


def make_head(d, e, C, seed=0):
    return PredictionHead(d, e, C, np.random.default_rng(seed))


def test_equal_similarity_gives_uniform():
    head = make_head(6, 4, 7)
    head.codewords.data[:] = head.codewords.data[0]
    p = codeword_distribution(np.random.default_rng(0).normal(size=6), head)
    assert np.allclose(p, 1 / 7, atol=1e-15)


def test_two_codeword_example():
    head = make_head(2, 2, 2)
    head.proj.data[:] = np.eye(2)
    head.codewords.data[:] = [[3.0, 0.0], [0.0, 2.0]]
    p = codeword_distribution(np.array([1.5, 0.0]), head)
    assert p[0] == pytest.approx(math.exp(10) / (math.exp(10) + 1), abs=1e-12)
    assert p[0] == pytest.approx(0.9999546, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_codeword_distribution_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    p = codeword_distribution(rng.normal(size=(3, 8)), make_head(8, 4, 6, seed))
    assert np.all(np.abs(p.sum(-1) - 1) <= 1e-12)


def test_codeword_distribution_errors():
    head = make_head(4, 3, 5)
    with pytest.raises(ValueError):
        codeword_distribution(np.zeros(4), head)
    with pytest.raises(ValueError):
        codeword_distribution(np.array([np.nan, 0, 0, 1.0]), head)
    with pytest.raises(ValueError):
        make_head(4, 3, 1)


def _oracle_loss(states, mask, z, heads, K):
    # numpy transcription of the masked cross-entropy with cosine logits
    total = 0.0
    for l in K:
        W, E = heads[l].proj.data, heads[l].codewords.data
        h = states[l - 1].data[mask]
        a = h @ W
        cos = (a / np.linalg.norm(a, axis=-1, keepdims=True)) @ (E / np.linalg.norm(E, axis=-1, keepdims=True)).T
        total -= log_softmax(cos / 0.1, axis=-1)[np.arange(len(a)), z[mask]].sum()
    return total


def _instance(seed, L=2, T_=6, d=8, C=5, e=4):
    rng = np.random.default_rng(seed)
    states = [Tensor(rng.normal(size=(T_, d)), requires_grad=True) for _ in range(L)]
    heads = {l: make_head(d, e, C, seed + l) for l in range(1, L + 1)}
    mask = rng.random(T_) < 0.5
    mask[0] = True
    z = rng.integers(0, C, size=T_)
    return states, heads, mask, z


def test_loss_matches_numpy_oracle():
    for seed in range(3):
        states, heads, mask, z = _instance(seed)
        for K in [(2,), (1, 2)]:
            got = ils_loss(states, mask, z, heads, K).item()
            assert got == pytest.approx(_oracle_loss(states, mask, z, heads, K), abs=1e-10)


def test_loss_is_additive_over_layers():
    states, heads, mask, z = _instance(4)
    both = ils_loss(states, mask, z, heads, (1, 2)).item()
    assert both == pytest.approx(ils_loss(states, mask, z, heads, (1,)).item()
                                 + ils_loss(states, mask, z, heads, (2,)).item(), abs=1e-12)


def test_loss_ignores_unmasked_targets():
    states, heads, mask, z = _instance(5)
    z2 = z.copy()
    z2[~mask] = (z2[~mask] + 1) % 5
    assert ils_loss(states, mask, z, heads, (1, 2)).item() == ils_loss(states, mask, z2, heads, (1, 2)).item()


def test_uniform_heads_closed_form():
    rng = np.random.default_rng(0)
    T_, d = 12, 8
    states = [Tensor(rng.normal(size=(T_, d))) for _ in range(2)]
    heads = {}
    for l in (1, 2):
        heads[l] = make_head(d, 4, 500, l)
        heads[l].codewords.data[:] = heads[l].codewords.data[0]
    mask = np.zeros(T_, bool)
    mask[[0, 2, 3, 5, 7, 8, 11]] = True
    z = rng.integers(0, 500, size=T_)
    loss = ils_loss(states, mask, z, heads, (1, 2)).item()
    assert loss == pytest.approx(2 * 7 * math.log(500), abs=1e-9)
    assert loss == pytest.approx(87.01, abs=1e-2)


def test_perfect_predictor_has_near_zero_loss():
    head = make_head(2, 2, 2)
    head.proj.data[:] = np.eye(2)
    head.codewords.data[:] = [[1.0, 0.0], [-1.0, 0.0]]
    h = Tensor(np.array([[2.0, 0.0], [-1.0, 0.0], [3.0, 0.0]]))
    z = np.array([0, 1, 0])
    loss = ils_loss([h], np.ones(3, bool), z, {1: head}, (1,)).item()
    # cosines are +-1, so each term is log(1 + e^-20)
    assert loss == pytest.approx(3 * math.log1p(math.exp(-20)), rel=1e-9)
    assert loss < 1e-8


def test_target_out_of_range():
    states, heads, mask, z = _instance(0)
    z[0] = 5
    with pytest.raises(ValueError, match="codewords"):
        ils_loss(states, mask, z, heads, (1,))


def test_loss_gradients():
    for seed in range(3):
        states, heads, mask, z = _instance(seed)
        params = states + [p for h in heads.values() for p in h.parameters()]
        rng = np.random.default_rng(seed)
        assert grad_error(lambda: ils_loss(states, mask, z, heads, (1, 2)), params, rng) < 1e-4


def test_loss_invariant_to_rescaling_states():
    states, heads, mask, z = _instance(7)
    loss = ils_loss(states, mask, z, heads, (1, 2))
    T.backward(loss, states)
    for s in states:
        # directional derivative along h itself, per frame
        assert np.max(np.abs((s.grad * s.data).sum(-1))) < 1e-8


def tiny_model(K=(2,), share=False, seed=0, C=5, n_layers=2, bias=True):
    enc = EncoderConfig(n_layers=n_layers, model_dim=16, inner_dim=32, n_heads=2, conv_pos_kernel=4,
                        conv_pos_groups=2, n_rel_buckets=16, max_rel_offset=40, use_bucket_bias=bias,
                        conv_channels=8)
    return HubertModel(ModelConfig(enc, embed_dim=8, n_classes=C, supervised_layers=K, share_heads=share, seed=seed))


def test_shared_heads_shrink_parameter_count():
    sep = tiny_model((1, 2))
    shared = tiny_model((1, 2), share=True)
    head_size = 16 * 8 + 5 * 8
    assert sep.num_parameters() - shared.num_parameters() == head_size
    hm = shared.head_map()
    assert hm[1] is hm[2]


def test_model_config_validation():
    with pytest.raises(ValueError):
        tiny_model((3,))
    with pytest.raises(ValueError):
        ModelConfig(supervised_layers=())


def test_lr_schedule():
    total, peak = 1000, 1e-3
    warm = 80
    assert warmup_decay_lr(warm, total, peak) == peak
    assert warmup_decay_lr(total, total, peak) <= peak / total
    assert warmup_decay_lr(40, total, peak) == pytest.approx(peak / 2)
    lrs = [warmup_decay_lr(s, total, peak) for s in range(1, total + 1)]
    assert np.argmax(lrs) == warm - 1
    assert np.all(np.diff(lrs[warm - 1:]) <= 0)


@pytest.fixture(scope="module")
def toy():
    corpus = generate_corpus(10, 4, seed=0, duration_range=(400, 600))
    labels, _ = build_iteration1_targets(corpus, 5, seed=0)
    return corpus, labels


def _snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def test_zero_steps_leaves_parameters(toy):
    corpus, labels = toy
    model = tiny_model()
    before = _snapshot(model)
    _, _, losses = pretrain(corpus, labels, model, PretrainConfig(steps=0))
    assert losses == []
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())


def _cfg(steps, **kw):
    return PretrainConfig(steps=steps, batch_size=2, crop_frames=16, **kw)


def test_pretrain_is_deterministic_and_logs(toy):
    corpus, labels = toy
    lines = []
    _, _, a = pretrain(corpus, labels, tiny_model(), _cfg(4), log_fn=lines.append)
    _, _, b = pretrain(corpus, labels, tiny_model(), _cfg(4))
    assert a == b
    assert len(lines) == 4
    step, lr, raw, norm = lines[0].split("\t")
    assert int(step) == 1 and float(lr) > 0 and float(raw) > float(norm) > 0


def test_pretrain_resume_replays_uninterrupted_run(toy):
    corpus, labels = toy
    full, _, la = pretrain(corpus, labels, tiny_model(), _cfg(6))
    part = tiny_model()
    part, opt, lb = pretrain(corpus, labels, part, _cfg(6), stop_step=3)
    part, _, lc = pretrain(corpus, labels, part, _cfg(6), optimizer=opt, start_step=3)
    assert la == lb + lc
    for (n, p), (_, q) in zip(full.named_parameters(), part.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_pretrain_aborts_on_nan(toy):
    corpus, labels = toy
    model = tiny_model()
    model.heads["2"].codewords.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="step 1"):
        pretrain(corpus, labels, model, _cfg(2))


def test_pretrain_rejects_misaligned_labels(toy):
    corpus, labels = toy
    bad = dict(labels)
    bad[corpus[0].uid] = bad[corpus[0].uid][:-1]
    with pytest.raises(ValueError, match="labels"):
        pretrain(corpus, bad, tiny_model(), _cfg(1))


@pytest.mark.slow
def test_overfits_toy_corpus(toy):
    corpus, labels = toy
    results = []
    for seed in range(3):
        cfg = PretrainConfig(steps=2000, batch_size=2, crop_frames=20, peak_lr=2e-3, seed=seed)
        _, _, losses = pretrain(corpus, labels, tiny_model(seed=seed), cfg)
        first, last = np.mean(losses[:50]), np.mean(losses[-50:])
        results.append(last < 0.5 * first)
        if results[-1]:
            break
    assert any(results)
