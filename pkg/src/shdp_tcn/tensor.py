"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when one of
their inputs requires a gradient and a tape is open. Outside a tape every
operation is a plain numpy computation, which is what inference uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(mul(x, x))
    >>> tape.backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import builtins
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Node",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "matmul",
    "transpose",
    "softmax_rows",
    "relu",
    "reshape",
    "take",
    "stack",
    "conv1d_causal",
    "weight_norm",
    "DegenerateWeightError",
    "GradCheckReport",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "shdp_tcn_active_tape", default=None
)


class Tensor:
    """A dense array of 64-bit floats with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, output and the rule mapping the
    output adjoint to one adjoint (or ``None``) per input."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


@dataclass(eq=False)
class Tape:
    """Ordered record of operations executed while the tape is open.

    Nodes are appended in execution order, which is a topological order of
    the forward computation, so backward is a single reverse sweep.
    """

    nodes: list = field(default_factory=list)

    def __post_init__(self):
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    tape = _active_tape.get()
    out.requires_grad = tape is not None and builtins.any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = Node(op, tuple(inputs), out, rule)
        out._node = node
        tape.record(node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` buffer of every leaf
    tensor that requires a gradient and appears on ``tape``.

    Leaves the tape never reaches get a zero buffer. Gradients accumulate
    across calls; zero them between optimisation steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.is_leaf and t.grad is None:
                t.grad = np.zeros_like(t.data)
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return

    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad += gi
            elif id(t) in adjoints:
                adjoints[id(t)] = adjoints[id(t)] + gi
            else:
                adjoints[id(t)] = gi


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a bias vector matching the last
    axis of ``a``; no other broadcasting is performed."""
    if a.shape == b.shape:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.data.ndim - 1))
        return _record("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _record(
        "mean", np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),)
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    return _record(
        "matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", s, (a,), rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _record("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index) -> Tensor:
    """Basic numpy indexing (``a.data[index]``) with a scatter backward."""
    out = np.array(a.data[index], dtype=np.float64)

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("take", out, (a,), rule)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    for t in tensors[1:]:
        _check_same("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors])
    return _record("stack", out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))))


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated convolution of ``x`` [c_in, T] with ``w`` [c_out, c_in, K].

    ``out[o, t] = b[o] + sum_{i,k} w[o, i, k] * x[i, t - (K-1-k)*dilation]``,
    with inputs before the first step read as zero, so the output keeps
    length T.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(f"conv1d_causal: expected x [c_in, T] and w [c_out, c_in, K], got {x.shape}, {w.shape}")
    c_out, c_in, k = w.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv1d_causal: x has {x.shape[0]} channels, filters expect {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d_causal: bias shape {b.shape}, expected ({c_out},)")
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")
    steps = x.shape[1]
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((c_in, pad)), x.data], axis=1)
    # cols[i, k, t] = xp[i, t + k*dilation]
    idx = np.arange(steps)[None, :] + dilation * np.arange(k)[:, None]
    cols = xp[:, idx].reshape(c_in * k, steps)
    wmat = w.data.reshape(c_out, c_in * k)
    out = wmat @ cols + b.data[:, None]

    def rule(g):
        gw = (g @ cols.T).reshape(w.shape)
        gcols = (wmat.T @ g).reshape(c_in, k, steps)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j * dilation : j * dilation + steps] += gcols[:, j, :]
        return gxp[:, pad:], gw, g.sum(axis=1)

    return _record("conv1d_causal", out, (x, w, b), rule)


class DegenerateWeightError(ValueError):
    """Raised when weight normalisation meets a zero-norm direction."""


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Reparameterise ``v`` as ``g[o] * v[o] / ||v[o]||`` per leading index ``o``."""
    if g.data.ndim != 1 or g.shape[0] != v.shape[0]:
        raise ShapeError(f"weight_norm: gain shape {g.shape} does not match {v.shape}")
    flat = v.data.reshape(v.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    if np.any(norms == 0.0):
        raise DegenerateWeightError("weight_norm: kernel direction has zero norm")
    unit = flat / norms[:, None]
    out = (g.data[:, None] * unit).reshape(v.shape)

    def rule(gout):
        go = gout.reshape(flat.shape)
        proj = (go * unit).sum(axis=1)
        gv = (g.data / norms)[:, None] * (go - proj[:, None] * unit)
        return gv.reshape(v.shape), proj

    return _record("weight_norm", out, (v, g), rule)


@dataclass
class GradCheckReport:
    """Tape gradient against central differences at the checked coordinates."""

    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def failures(self) -> np.ndarray:
        return self.coords[self.rel_error > self.tol]

    @property
    def passed(self) -> bool:
        return self.failures.size == 0


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    coords: Optional[Sequence[int]] = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    ``x`` is perturbed in place (and restored), so ``f`` may ignore its
    argument and close over ``x`` instead, which is how model parameters are
    checked. Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps round-off on near-zero gradients from registering as failures.
    """
    if not x.requires_grad:
        raise ValueError("grad_check: x must require a gradient")
    x.grad = None
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    analytic_all = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)

    coords = np.arange(x.size) if coords is None else np.asarray(coords, dtype=int)
    flat = x.data.reshape(-1)
    numeric = np.empty(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        hi = f(x).item()
        flat[c] = orig - eps
        lo = f(x).item()
        flat[c] = orig
        numeric[j] = (hi - lo) / (2.0 * eps)
    analytic = analytic_all[coords]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(coords, analytic, numeric, rel, tol)
