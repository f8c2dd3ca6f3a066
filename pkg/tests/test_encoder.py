import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from ils_ssl import tensor as T
from ils_ssl.encoder import (ConvPositionEmbedding, EncoderConfig, SelfAttention, TransformerEncoder,
                             TransformerLayer, attention_probs, bucket_matrix, encoder_forward,
                             relative_bucket)
from ils_ssl.tensor import Tensor

from _oracles import grad_error


def bucket_oracle(offset, n_buckets=320, max_offset=800):
    # scalar transcription of the piecewise exact-then-logarithmic rule
    H = n_buckets // 2
    E = H // 2
    a = abs(offset)
    if a < E:
        g = a
    else:
        g = min(H - 1, E + math.floor(E * math.log(a / E) / math.log(max_offset / E)))
    return H * (offset > 0) + g


def test_bucket_examples():
    assert relative_bucket(0) == 0
    assert relative_bucket(900) == relative_bucket(2000) == 319
    assert relative_bucket(-5) == 5
    assert relative_bucket(-900) == relative_bucket(-5000) == 159


def test_bucket_matches_scalar_oracle():
    offs = np.arange(-2500, 2501)
    got = relative_bucket(offs)
    assert got.tolist() == [bucket_oracle(int(o)) for o in offs]
    small = relative_bucket(offs, 16, 40)
    assert small.tolist() == [bucket_oracle(int(o), 16, 40) for o in offs]


def test_bucket_rejects_odd_count():
    with pytest.raises(ValueError):
        relative_bucket(3, 321)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000))
def test_bucket_sign_symmetry(a):
    assert relative_bucket(-a) + 160 == relative_bucket(a)


def test_bucket_monotone_within_each_half():
    for sign in (1, -1):
        b = relative_bucket(sign * np.arange(1, 3000))
        assert np.all(np.diff(b) >= 0)
        assert b.max() == (319 if sign > 0 else 159)


def test_bucket_matrix_uses_query_minus_key():
    m = bucket_matrix(5, 320, 800)
    assert m[3, 1] == relative_bucket(2) and m[1, 3] == relative_bucket(-2)
    assert np.all(np.diag(m) == 0)


def naive_probs(q, k, bias):
    return softmax(q @ k.T / math.sqrt(q.shape[-1]) + bias, axis=-1)


def test_single_position_gets_full_weight():
    rng = np.random.default_rng(0)
    p = attention_probs(rng.normal(size=(1, 8)), rng.normal(size=(1, 8)), np.array([[0.3]]))
    assert p.tolist() == [[1.0]]


def test_stabilized_matches_naive_float64():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q, k = rng.normal(size=(6, 8)) * 3, rng.normal(size=(6, 8)) * 3
        bias = rng.normal(size=(6, 6))
        assert np.max(np.abs(attention_probs(q, k, bias) - naive_probs(q, k, bias))) < 1e-10
        assert np.max(np.abs(attention_probs(q, k, bias, stabilized=False) - naive_probs(q, k, bias))) < 1e-10


def test_fp16_overflow_naive_vs_stabilized():
    rng = np.random.default_rng(2)
    q, k = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    s = q @ k.T / math.sqrt(8)
    q = q * math.sqrt(1e5 / np.abs(s).max())
    k = k * math.sqrt(1e5 / np.abs(s).max())
    assert np.abs(q @ k.T / math.sqrt(8)).max() == pytest.approx(1e5)
    naive = attention_probs(q, k, None, stabilized=False, fp_mode="fp16_emulated")
    stab = attention_probs(q, k, None, stabilized=True, fp_mode="fp16_emulated")
    assert not np.all(np.isfinite(naive))
    assert np.all(np.isfinite(stab))
    assert np.allclose(stab.sum(-1), 1.0, atol=2e-3)


def test_attention_layer_rejects_non_finite():
    layer = TransformerLayer(EncoderConfig(model_dim=8, inner_dim=16, n_heads=2, conv_pos_groups=2),
                             np.random.default_rng(0))
    x = np.zeros((1, 3, 8))
    x[0, 1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        layer(Tensor(x), None)


def test_tape_attention_matches_naive():
    rng = np.random.default_rng(3)
    att = SelfAttention(8, 2, 32.0, rng)
    x = Tensor(rng.normal(size=(1, 6, 8)))
    bias = rng.normal(size=(2, 6, 6))
    p = att.probs(x, Tensor(bias)).data[0]
    q = (x.data[0] @ att.q.weight.data + att.q.bias.data).reshape(6, 2, 4)
    k = (x.data[0] @ att.k.weight.data + att.k.bias.data).reshape(6, 2, 4)
    for h in range(2):
        assert np.max(np.abs(p[h] - naive_probs(q[:, h], k[:, h], bias[h]))) < 1e-10


def test_conv_position_zero_weights_is_identity():
    pe = ConvPositionEmbedding(8, 4, 2, np.random.default_rng(0))
    pe.weight.data[:] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(1, 10, 8)))
    assert np.array_equal(pe(x).data, x.data)


def test_conv_position_constant_input_constant_interior():
    K = 4
    pe = ConvPositionEmbedding(8, K, 2, np.random.default_rng(0))
    x = Tensor(np.tile(np.random.default_rng(1).normal(size=8), (1, 20, 1)))
    out = pe(x).data[0]
    interior = out[K // 2: 20 - K // 2]
    assert np.max(np.abs(interior - interior[0])) < 1e-12
    assert out.shape == (20, 8)


def test_conv_position_gradients():
    rng = np.random.default_rng(4)
    pe = ConvPositionEmbedding(8, 4, 2, rng)
    x = Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True)
    assert grad_error(lambda: pe(x), [x, pe.weight, pe.bias], rng) < 1e-4


def tiny_cfg(**kw):
    base = dict(n_layers=2, model_dim=8, inner_dim=16, n_heads=2, conv_pos_kernel=4, conv_pos_groups=2,
                n_rel_buckets=16, max_rel_offset=40)
    base.update(kw)
    return EncoderConfig(**base)


def test_encoder_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(model_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(n_rel_buckets=321)
    with pytest.raises(ValueError):
        EncoderConfig(max_rel_offset=0)
    with pytest.raises(ValueError):
        EncoderConfig(stabilization_scale=0.0)


def test_single_layer_returns_one_state():
    enc = TransformerEncoder(tiny_cfg(n_layers=1), np.random.default_rng(0))
    states = encoder_forward(np.random.default_rng(1).normal(size=(5, 8)), enc)
    assert len(states) == 1 and states[0].shape == (1, 5, 8)


def test_forward_is_deterministic():
    enc = TransformerEncoder(tiny_cfg(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 9, 8))
    a = [s.data for s in encoder_forward(x, enc)]
    b = [s.data for s in encoder_forward(x, enc)]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_no_bucket_bias_equals_zero_table():
    x = np.random.default_rng(1).normal(size=(1, 9, 8))
    with_bias = TransformerEncoder(tiny_cfg(), np.random.default_rng(0))
    with_bias.rel_bias.table.data[:] = 0.0
    without = TransformerEncoder(tiny_cfg(use_bucket_bias=False), np.random.default_rng(0))
    # copy the shared weights so only the bias path differs
    src = dict(with_bias.named_parameters())
    for name, p in without.named_parameters():
        p.data[...] = src[name].data
    a = encoder_forward(x, with_bias)[-1].data
    b = encoder_forward(x, without)[-1].data
    assert np.max(np.abs(a - b)) < 1e-12


def test_permutation_equivariance_without_position_information():
    enc = TransformerEncoder(tiny_cfg(use_bucket_bias=False), np.random.default_rng(0))
    enc.pos_conv.weight.data[:] = 0.0
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 7, 8))
    perm = rng.permutation(7)
    a = encoder_forward(x, enc)[-1].data[0]
    b = encoder_forward(x[:, perm], enc)[-1].data[0]
    assert np.max(np.abs(a[perm] - b)) < 1e-9


def test_every_parameter_gets_gradient():
    enc = TransformerEncoder(tiny_cfg(), np.random.default_rng(0))
    rng = np.random.default_rng(5)
    T_ = 12
    x = Tensor(rng.normal(size=(1, T_, 8)))
    states = encoder_forward(x, enc)
    loss = T.tsum(states[0] * Tensor(rng.normal(size=(1, T_, 8))))
    loss = loss + T.tsum(states[1] * Tensor(rng.normal(size=(1, T_, 8))))
    params = dict(enc.named_parameters())
    T.backward(loss, list(params.values()))
    reachable = np.unique(bucket_matrix(T_, 16, 40))
    for name, p in params.items():
        if name == "rel_bias.table":
            g = np.abs(p.grad).sum(axis=1)
            assert np.all(g[reachable] > 0)
            assert np.all(g[np.setdiff1d(np.arange(16), reachable)] == 0)
        else:
            assert np.any(p.grad != 0), name


def test_encoder_gradients():
    rng = np.random.default_rng(6)
    enc = TransformerEncoder(tiny_cfg(), rng)
    x = Tensor(rng.normal(size=(1, 5, 8)), requires_grad=True)
    params = [x, enc.rel_bias.table, enc.layers[0].attn.q.weight, enc.layers[1].fc1.weight,
              enc.layers[1].norm2.weight, enc.pos_conv.weight]
    assert grad_error(lambda: T.concat(encoder_forward(x, enc), axis=-1), params, rng) < 1e-4


def test_fp16_forward_stays_close_on_moderate_inputs():
    enc = TransformerEncoder(tiny_cfg(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 6, 8))
    a = encoder_forward(x, enc)[-1].data
    b = encoder_forward(x, enc, fp_mode="fp16_emulated")[-1].data
    assert np.all(np.isfinite(b))
    assert np.max(np.abs(a - b)) < 0.05
