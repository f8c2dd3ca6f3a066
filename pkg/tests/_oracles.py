"""Independent reference computations shared by the test modules."""

import itertools
import math

import numpy as np

from ils_ssl import tensor as T
from ils_ssl.tensor import Tensor, finite_difference_grad


def grad_error(fn, params, rng, step=1e-5):
    """Max relative error between backward and central differences.

    ``fn()`` returns a Tensor of any shape; it is contracted with a fixed random
    weight so that every output element matters.  The denominator is
    max(1, |analytic|).
    """
    out = fn()
    w = Tensor(rng.normal(size=out.shape))

    def loss():
        return T.tsum(fn() * w)

    for p in params:
        p.grad = None
    T.backward(loss(), params)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        fd = finite_difference_grad(lambda: loss().item(), p, step)
        err = np.max(np.abs(fd - analytic) / np.maximum(1.0, np.abs(analytic)))
        worst = max(worst, float(err))
    return worst


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def ctc_collapse(path, blank=0):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_brute_force_logprob(logits, target):
    """log sum over every frame path that collapses to ``target``."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(1, keepdims=True)
    logp = logits - (m + np.log(np.exp(logits - m).sum(1, keepdims=True)))
    T_, V = logp.shape
    terms = []
    for path in itertools.product(range(V), repeat=T_):
        if ctc_collapse(path) == tuple(target):
            terms.append(sum(logp[t, k] for t, k in enumerate(path)))
    if not terms:
        return -math.inf
    m = max(terms)
    return m + math.log(sum(math.exp(x - m) for x in terms))


def all_label_sequences(V, max_len):
    """Every non-blank label sequence of length <= max_len over symbols 1..V-1."""
    for n in range(max_len + 1):
        yield from itertools.product(range(1, V), repeat=n)


def entropy_nats(counts):
    p = np.asarray(counts, dtype=np.float64).ravel()
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


def levenshtein(a, b):
    d = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, d[0] = d[0], i
        for j, y in enumerate(b, 1):
            prev, d[j] = d[j], min(d[j] + 1, d[j - 1] + 1, prev + (x != y))
    return d[len(b)]
