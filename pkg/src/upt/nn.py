"""Layers, parameter containers and the AdamW optimizer on top of ``autograd``."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


def linear(a: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``a @ weight + bias`` with ``weight`` stored as (in, out)."""
    if a.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {a.shape} does not match weight {weight.shape}")
    out = ag.matmul(a, weight) if a.ndim >= 2 else ag.matmul(a.reshape(1, -1), weight).reshape(-1)
    return out if bias is None else out + bias


def layer_norm(
    a: Tensor,
    axis: int = -1,
    eps: float = 1e-5,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
) -> Tensor:
    """Normalize ``a`` to zero mean and unit variance along ``axis``, then
    apply the optional affine map."""
    mu = ag.mean(a, axis=axis, keepdims=True)
    centered = a - mu
    var = ag.mean(centered * centered, axis=axis, keepdims=True)
    out = centered * ag.pow(var + eps, -0.5)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def mlp(a: Tensor, layers: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """Stack of linear layers with ReLU between them (none after the last)."""
    for k, (w, b) in enumerate(layers):
        a = linear(a, w, b)
        if k < len(layers) - 1:
            a = ag.relu(a)
    return a


class Module:
    """Minimal parameter container.

    Parameters are the ``Tensor`` attributes with ``requires_grad=True``;
    submodules are found through attributes holding a ``Module`` or a list
    of them. Names follow attribute insertion order, which makes the
    checkpoint ordering stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{k}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        ag.zero_grad(self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, in_dim, (in_dim, out_dim))
        self.bias = uniform_init(rng, in_dim, (out_dim,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, -1, self.eps, self.gamma, self.beta)


class MLP(Module):
    """Linear layers of the given widths with ReLU in between."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp(x, [(layer.weight, layer.bias) for layer in self.layers])


class AdamW:
    """Adam with decoupled weight decay.

    Args:
        params: Tensors to update in place.
        lr: Step size; may be changed between steps for schedules.
        betas: Moment decay rates.
        eps: Denominator guard.
        weight_decay: Decoupled decay coefficient, applied as ``p -= lr * wd * p``.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        ag.zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
