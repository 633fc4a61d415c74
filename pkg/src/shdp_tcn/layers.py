"""Differentiable layers: linear maps, self-attention, weight-normalised causal
dilated convolution, dropout and the TCN residual block."""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import DegenerateWeightError, ShapeError, Tensor

__all__ = [
    "Module",
    "LinearLayer",
    "SelfAttentionLayer",
    "CausalConvLayer",
    "Dropout",
    "ResidualBlock",
    "receptive_field",
    "block_dilations",
    "weight_norm_effective",
    "parameters_to_json",
    "load_parameters",
    "DegenerateWeightError",
]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Minimal container: parameters are discovered from attributes in
    definition order, children are recursed with dotted paths."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))


class LinearLayer(Module):
    """``y = x @ weight + bias`` for ``x`` of shape [n, d_in]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = _uniform(rng, (d_in, d_out), d_in)
        self.bias = _zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"LinearLayer expects [n, {self.d_in}] input, got {x.shape}")
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class SelfAttentionLayer(Module):
    """Single-head scaled dot-product self-attention over the rows of ``a``.

    No positional encoding and no mask: the layer is equivariant under
    permutations of the rows.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.wq = LinearLayer(d, d, rng, bias=False)
        self.wk = LinearLayer(d, d, rng, bias=False)
        self.wv = LinearLayer(d, d, rng, bias=False)

    def _check(self, a: Tensor) -> None:
        if a.data.ndim != 2 or a.shape[1] != self.d:
            raise ShapeError(f"self-attention expects [n, {self.d}] input, got {a.shape}")

    def weights(self, a: Tensor) -> Tensor:
        """Row-stochastic attention matrix ``softmax(Q K^T / sqrt(d))``."""
        self._check(a)
        q, k = self.wq(a), self.wk(a)
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.d))
        return T.softmax_rows(scores)

    def __call__(self, a: Tensor) -> Tensor:
        return T.matmul(self.weights(a), self.wv(a))


def weight_norm_effective(v: Tensor, g) -> Tensor:
    """Single-kernel weight normalisation: ``g * v / ||v||``.

    ``v`` is one output channel's kernel slice (any shape) and ``g`` a scalar
    gain, either a float or a one-element Tensor that receives a gradient.
    """
    gain = g if isinstance(g, Tensor) else Tensor([float(g)])
    out = T.weight_norm(T.reshape(v, (1,) + v.shape), T.reshape(gain, (1,)))
    return T.reshape(out, v.shape)


class CausalConvLayer(Module):
    """Weight-normalised causal convolution with dilation.

    The filters ``v`` are stored unnormalised; the effective kernel of output
    channel ``o`` is ``g[o] * v[o] / ||v[o]||``. ``g`` starts at the initial
    kernel norm, so the effective kernel equals ``v`` at construction.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int,
                 rng: np.random.Generator):
        if kernel_size < 1 or dilation < 1:
            raise ValueError("kernel_size and dilation must be positive")
        self.c_in = c_in
        self.c_out = c_out
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.v = _uniform(rng, (c_out, c_in, kernel_size), c_in * kernel_size)
        self.g = Tensor(np.sqrt((self.v.data.reshape(c_out, -1) ** 2).sum(axis=1)),
                        requires_grad=True)
        self.bias = _zeros((c_out,))

    def effective_weight(self) -> Tensor:
        return T.weight_norm(self.v, self.g)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[0] != self.c_in:
            raise ShapeError(f"CausalConvLayer expects [{self.c_in}, T] input, got {x.shape}")
        return T.conv1d_causal(x, self.effective_weight(), self.bias, self.dilation)


class Dropout(Module):
    """Inverted dropout; the identity outside training mode."""

    def __init__(self, rate: float, seed: int):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: Optional[int] = None) -> None:
        self.rng_seed = self.rng_seed if seed is None else seed
        self.rng = np.random.default_rng(self.rng_seed)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        mask = Tensor(keep / (1.0 - self.rate))
        return T.mul(x, mask)


class ResidualBlock(Module):
    """``H(x) = F(x) + S(x)`` with
    ``F = dropout . relu . conv2 . dropout . relu . conv1`` and ``S`` the
    identity, or a 1x1 convolution when channel counts differ."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int,
                 dropout_rate: float, rng: np.random.Generator, seed: int):
        self.c_in = c_in
        self.c_out = c_out
        self.conv1 = CausalConvLayer(c_in, c_out, kernel_size, dilation, rng)
        self.conv2 = CausalConvLayer(c_out, c_out, kernel_size, dilation, rng)
        self.drop1 = Dropout(dropout_rate, seed)
        self.drop2 = Dropout(dropout_rate, seed + 1)
        self.match_conv = CausalConvLayer(c_in, c_out, 1, 1, rng) if c_in != c_out else None

    @property
    def dilation(self) -> int:
        return self.conv1.dilation

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[0] != self.c_in:
            raise ShapeError(f"ResidualBlock expects [{self.c_in}, T] input, got {x.shape}")
        h = self.drop1(T.relu(self.conv1(x)))
        h = self.drop2(T.relu(self.conv2(h)))
        skip = self.match_conv(x) if self.match_conv is not None else x
        return T.add(h, skip)


def block_dilations(num_blocks: int, convs_per_block: int = 2) -> list[int]:
    """Per-convolution dilations of a block stack with ``d = 2**level``."""
    return [2**i for i in range(num_blocks) for _ in range(convs_per_block)]


def receptive_field(kernel_size: int, dilations: Sequence[int]) -> int:
    """Number of input steps that can reach one output of a conv stack.

    ``dilations`` lists every convolution in order, so a residual stack
    passes ``block_dilations(n)``. One layer gives ``(K - 1) * d + 1``.
    """
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    if not dilations:
        raise ValueError("dilations must be non-empty")
    return 1 + (kernel_size - 1) * int(np.sum(dilations))


def parameters_to_json(module: Module) -> dict:
    """``{path: {"shape": [...], "values": [...]}}`` in row-major order."""
    return {
        name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
        for name, p in module.named_parameters()
    }


def load_parameters(module: Module, doc: dict) -> None:
    """Copy serialised values into ``module``, validating paths and shapes."""
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(doc))
    extra = sorted(set(doc) - set(params))
    if missing or extra:
        raise ShapeError(f"parameter paths differ: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        entry = doc[name]
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if shape != p.shape or values.size != p.size:
            raise ShapeError(f"{name}: stored shape {shape} does not match model shape {p.shape}")
        p.data[...] = values.reshape(shape)
