"""Finite-difference verification of every differentiable op and layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import CausalConvLayer, LinearLayer, ResidualBlock, SelfAttentionLayer
from .model import ModelConfig, ShdpTcnModel, assemble_input
from .tensor import GradCheckReport, Tensor, grad_check

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    n_coords: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.1) -> Tensor:
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Random linear functional of ``out`` so every output entry matters."""
    return T.sum(T.mul(out, Tensor(w)))


def _module_check(name, module, loss_fn, tol, rng, n_coords=100) -> CheckResult:
    """Check ``n_coords`` random coordinates spread over all parameters."""
    params = module.parameters()
    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, count = 0.0, 0
    for i, p in enumerate(params):
        local = picks[(picks >= offsets[i]) & (picks < offsets[i + 1])] - offsets[i]
        if local.size == 0:
            continue
        rep = grad_check(lambda _: loss_fn(), p, coords=local, tol=tol)
        worst = max(worst, rep.max_rel_error)
        count += local.size
    return CheckResult(name, count, worst, tol)


def _op_check(name, fn: Callable[[Tensor], Tensor], x: Tensor, tol: float) -> CheckResult:
    rep: GradCheckReport = grad_check(fn, x, tol=tol)
    return CheckResult(name, len(rep.coords), rep.max_rel_error, tol)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    rng_pair = rng.normal(size=(2, 4))
    b = rng.normal(size=(4, 3))
    wm = rng.normal(size=(5, 3))
    out.append(_op_check("matmul (left)", lambda a: _weighted(T.matmul(a, Tensor(b)), wm), _param(rng, 5, 4), LAYER_TOL))
    a = rng.normal(size=(5, 4))
    out.append(_op_check("matmul (right)", lambda x: _weighted(T.matmul(Tensor(a), x), wm), _param(rng, 4, 3), LAYER_TOL))
    ws = rng.normal(size=(4, 6))
    out.append(_op_check("softmax_rows", lambda x: _weighted(T.softmax_rows(x), ws), _param(rng, 4, 6), LAYER_TOL))
    wr = rng.normal(size=(20,))
    out.append(_op_check("relu", lambda x: _weighted(T.relu(x), wr), _away_from_zero(rng, 20), LAYER_TOL))
    other = Tensor(rng.normal(size=(20,)))
    out.append(_op_check("add", lambda x: _weighted(T.add(x, other), wr), _param(rng, 20), LAYER_TOL))
    out.append(_op_check("sub", lambda x: _weighted(T.sub(other, x), wr), _param(rng, 20), LAYER_TOL))
    out.append(_op_check("mul", lambda x: _weighted(T.mul(x, x), wr), _param(rng, 20), LAYER_TOL))
    out.append(_op_check("scale", lambda x: _weighted(T.scale(x, -2.5), wr), _param(rng, 20), LAYER_TOL))
    out.append(_op_check("sum", lambda x: T.sum(T.mul(x, x)), _param(rng, 20), LAYER_TOL))
    out.append(_op_check("mean", lambda x: T.mean(T.mul(x, x)), _param(rng, 20), LAYER_TOL))
    base = Tensor(rng.normal(size=(5, 3)))
    out.append(_op_check("add (bias)", lambda x: _weighted(T.add(base, x), wm), _param(rng, 3), LAYER_TOL))
    wt = rng.normal(size=(4, 5))
    out.append(_op_check("transpose", lambda x: _weighted(T.transpose(x), wt), _param(rng, 5, 4), LAYER_TOL))
    wtk = rng.normal(size=(1, 5))
    out.append(_op_check("take/reshape", lambda x: _weighted(T.reshape(T.take(x, (slice(None), -1)), (1, 5)), wtk), _param(rng, 5, 4), LAYER_TOL))
    out.append(_op_check("stack", lambda x: _weighted(T.stack([x, T.scale(x, 3.0)]), rng_pair), _param(rng, 4), LAYER_TOL))
    wk = rng.normal(size=(3, 2, 4))
    out.append(_op_check("weight_norm", lambda v: _weighted(T.weight_norm(v, Tensor([0.7, -1.3, 2.0])), wk), _param(rng, 3, 2, 4), LAYER_TOL))
    for d in (1, 2, 4):
        w = Tensor(rng.normal(size=(3, 2, 3)))
        bias = Tensor(rng.normal(size=3))
        wc = rng.normal(size=(3, 11))
        out.append(_op_check(f"conv1d_causal d={d} (input)",
                             lambda x: _weighted(T.conv1d_causal(x, w, bias, d), wc), _param(rng, 2, 11), LAYER_TOL))
        xin = Tensor(rng.normal(size=(2, 11)))
        out.append(_op_check(f"conv1d_causal d={d} (filters)",
                             lambda f: _weighted(T.conv1d_causal(xin, f, bias, d), wc), _param(rng, 3, 2, 3), LAYER_TOL))
    return out


def layer_checks(seed: int = 0) -> list[CheckResult]:
    """Each layer is sized to hold at least 100 parameters, all checked."""
    rng = np.random.default_rng(seed)
    out = []

    lin = LinearLayer(10, 10, rng)
    lin.bias.data[:] = rng.normal(size=10)
    xl = Tensor(rng.normal(size=(6, 10)))
    wl = rng.normal(size=(6, 10))
    out.append(_module_check("LinearLayer", lin, lambda: _weighted(lin(xl), wl), LAYER_TOL, rng))

    att = SelfAttentionLayer(6, rng)
    xa = Tensor(rng.normal(size=(5, 6)))
    wa = rng.normal(size=(5, 6))
    out.append(_module_check("SelfAttentionLayer", att, lambda: _weighted(att(xa), wa), LAYER_TOL, rng))

    conv = CausalConvLayer(5, 6, 3, 2, rng)
    conv.bias.data[:] = rng.normal(size=6)
    xc = Tensor(rng.normal(size=(5, 9)))
    wc = rng.normal(size=(6, 9))
    out.append(_module_check("CausalConvLayer", conv, lambda: _weighted(conv(xc), wc), LAYER_TOL, rng))

    block = ResidualBlock(3, 4, 3, 2, 0.0, rng, seed=seed)
    for p in (block.conv1.bias, block.conv2.bias):
        p.data[:] = np.abs(rng.normal(size=p.shape)) + 0.5
    xb = Tensor(rng.normal(size=(3, 10)))
    wb = rng.normal(size=(4, 10))
    out.append(_module_check("ResidualBlock", block, lambda: _weighted(block(xb), wb), LAYER_TOL, rng))
    return out


def toy_model_check(seed: int = 0, n_points: int = 3) -> CheckResult:
    """End-to-end MSE gradient of a tiny model (window 8, 2 channels, 1 block,
    attention on), every parameter checked at ``n_points`` random draws."""
    worst, count = 0.0, 0
    for k in range(n_points):
        rng = np.random.default_rng([seed, k])
        cfg = ModelConfig(window_len=8, topic_dim=1, channels=2, num_blocks=1, kernel_size=3,
                          dropout_rate=0.1, use_attention=True, seed=seed + k)
        model = ShdpTcnModel(cfg).eval()
        for p in model.parameters():
            p.data += 0.1 * rng.normal(size=p.shape)
        xs = [assemble_input(rng.uniform(0, 1, 8), rng.uniform(-1, 1, 1), cfg) for _ in range(3)]
        ys = Tensor(rng.uniform(0, 1, 3))

        def loss():
            preds = T.stack([model(x) for x in xs])
            d = T.sub(preds, ys)
            return T.mean(T.mul(d, d))

        res = _module_check("", model, loss, MODEL_TOL, rng, n_coords=model.num_parameters())
        worst = max(worst, res.max_rel_error)
        count += res.n_coords
    return CheckResult("SHDP-TCN end-to-end (MSE)", count, worst, MODEL_TOL)


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + layer_checks(seed) + [toy_model_check(seed)]


def format_results(results) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'check':<{w}}  {'coords':>6}  {'max rel err':>11}  {'tol':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {r.n_coords:>6}  {r.max_rel_error:>11.3e}  {r.tol:>7.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
