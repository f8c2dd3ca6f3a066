"""Parameter containers, basic layers and the AdamW optimizer."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ils_ssl import tensor as T
from ils_ssl.tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Attribute-based parameter registry; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k in sorted(val):
                    item = val[k]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def parameters(self) -> list[Tensor]:
        return list(self.state_dict().values())

    def num_parameters(self) -> int:
        # shared tensors are counted once
        seen = {}
        for p in self.parameters():
            seen[id(p)] = p.size
        return int(sum(seen.values()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class AdamW:
    """Adam with decoupled weight decay.  Moments are keyed by parameter name."""

    def __init__(self, named_params, betas=(0.9, 0.98), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: OrderedDict[str, Tensor] = OrderedDict(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float, frozen: set[str] | None = None) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for name, p in self.params.items():
            if frozen and name in frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            if f"adam.m/{k}" in tensors:
                self.m[k] = np.array(tensors[f"adam.m/{k}"], dtype=np.float64)
                self.v[k] = np.array(tensors[f"adam.v/{k}"], dtype=np.float64)
        self.step_count = step
