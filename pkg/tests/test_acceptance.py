"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
(printed in the terminal summary) before asserting."""

import json
import time

import numpy as np
import pytest

from shdp_tcn import tensor as T
from shdp_tcn.benchmark import FULL_MODEL, PLAIN_TCN, run_ablation
from shdp_tcn.cli import main
from shdp_tcn.data import (
    HeatSeries,
    SplitSpec,
    WindowError,
    generate_ar_series,
    make_windows,
    write_series_csv,
)
from shdp_tcn.layers import ResidualBlock, SelfAttentionLayer
from shdp_tcn.model import ModelConfig, build
from shdp_tcn.tensor import Tensor
from shdp_tcn.training import (
    FALL,
    RISE,
    STABLE,
    TrainConfig,
    classification_metrics,
    evaluate,
    train,
)
from shdp_tcn.verify import LAYER_TOL, MODEL_TOL, layer_checks, op_checks, toy_model_check

GRAD_LAYER_TOL = 1e-4
GRAD_MODEL_TOL = 1e-3
GRAD_MIN_COORDS = 100
GRAD_MAX_SECONDS = 10.0
CONV_TOL = 1e-12
CONV_INSTANCES = 200
STOCHASTIC_TOL = 1e-12
ATTENTION_INSTANCES = 50
AR_RATIO = 0.5
AR_MAX_SECONDS = 120.0


def direct_dilated_conv(x, filters, bias, d):
    """Sum over taps k = 1..K of f_k * x[t - (K - k) d], zero before the start."""
    c_out, c_in, K = filters.shape
    steps = x.shape[1]
    out = np.zeros((c_out, steps))
    for o in range(c_out):
        for t in range(steps):
            s = bias[o]
            for i in range(c_in):
                for k in range(1, K + 1):
                    src = t - (K - k) * d
                    if src >= 0:
                        s += filters[o, i, k - 1] * x[i, src]
            out[o, t] = s
    return out


def test_01_gradient_correctness(acceptance):
    assert LAYER_TOL == GRAD_LAYER_TOL and MODEL_TOL == GRAD_MODEL_TOL
    start = time.perf_counter()
    ops = op_checks(0)
    layers = layer_checks(0)
    model = toy_model_check(0)
    elapsed = time.perf_counter() - start
    worst_layer = max(r.max_rel_error for r in ops + layers)
    ok = (
        all(r.passed for r in ops + layers)
        and all(r.n_coords >= GRAD_MIN_COORDS for r in layers)
        and model.passed
        and model.n_coords >= GRAD_MIN_COORDS
        and elapsed < GRAD_MAX_SECONDS
    )
    detail = (f"ops+layers max rel err {worst_layer:.2e} (tol {GRAD_LAYER_TOL:g}, "
              f"{min(r.n_coords for r in layers)}+ coords per layer); end-to-end {model.max_rel_error:.2e} "
              f"over {model.n_coords} coords (tol {GRAD_MODEL_TOL:g}); {elapsed:.2f} s (< {GRAD_MAX_SECONDS:g} s)")
    acceptance(1, "gradient correctness", ok, detail)
    assert ok, detail


def test_02_convolution_oracle(acceptance):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(CONV_INSTANCES):
        K = int(rng.integers(1, 5))
        d = int(rng.choice([1, 2, 4, 8]))
        steps = int(rng.integers(1, 65))
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x, f, b = rng.normal(size=(c_in, steps)), rng.normal(size=(c_out, c_in, K)), rng.normal(size=c_out)
        got = T.conv1d_causal(Tensor(x), Tensor(f), Tensor(b), d).data
        worst = max(worst, float(np.max(np.abs(got - direct_dilated_conv(x, f, b, d)))))
    hand_a = T.conv1d_causal(Tensor([[1.0, 2, 3, 4]]), Tensor([[[1.0, 1.0]]]), Tensor([0.0]), 1).data
    hand_b = T.conv1d_causal(Tensor([[1.0, 2, 3, 4, 5]]), Tensor([[[1.0, 0.0, 1.0]]]), Tensor([0.0]), 2).data
    hands = hand_a.tolist() == [[1, 3, 5, 7]] and hand_b.tolist() == [[1, 2, 3, 4, 6]]
    ok = worst <= CONV_TOL and hands
    detail = f"max |diff| {worst:.1e} over {CONV_INSTANCES} instances (tol {CONV_TOL:g}); hand cases {'ok' if hands else 'WRONG'}"
    acceptance(2, "convolution oracle equivalence", ok, detail)
    assert ok, detail


def test_03_causality_and_receptive_field(acceptance):
    # default 3-block TCN stack (K=3, dilations 1,2,4, 51 channels); the
    # attention encoder is unmasked by design, so it is switched off here
    cfg = ModelConfig(use_attention=False)
    model = build(cfg)
    rf = cfg.receptive_field
    assert rf == 1 + sum(2 * (cfg.kernel_size - 1) * 2**i for i in range(cfg.num_blocks))
    rng = np.random.default_rng(3)
    n, dim = cfg.window_len, cfg.input_channels
    x = rng.normal(size=(n, dim))
    base = model.encode(Tensor(x)).data

    future_leak = 0.0
    for tp in range(1, n):
        xp = x.copy()
        xp[tp] += rng.normal(size=dim)
        out = model.encode(Tensor(xp)).data
        future_leak = max(future_leak, float(np.max(np.abs(out[:, :tp] - base[:, :tp]))))

    probe_ok = True
    for t in (rf - 1, 50, n - 1):
        for lag, should_change in ((rf - 1, True), (rf, False)):
            if t - lag < 0:
                continue
            xp = x.copy()
            xp[t - lag] += 1.0
            changed = bool(np.any(model.encode(Tensor(xp)).data[:, t] != base[:, t]))
            probe_ok &= changed == should_change
    ok = future_leak == 0.0 and probe_ok
    detail = (f"RF {rf}; max change of out(t) from inputs after t = {future_leak:g}; "
              f"lag RF-1 changes / lag RF does not: {'yes' if probe_ok else 'NO'}")
    acceptance(3, "causality and receptive field", ok, detail)
    assert ok, detail


def test_04_residual_identity(acceptance):
    rng = np.random.default_rng(4)
    exact = True
    for K, d, c in ((3, 1, 4), (3, 2, 51), (2, 4, 1), (1, 1, 3)):
        block = ResidualBlock(c, c, K, d, 0.1, rng, seed=0)
        for conv in (block.conv1, block.conv2):
            conv.g.data[:] = 0.0
            conv.bias.data[:] = 0.0
        x = rng.normal(size=(c, 30))
        exact &= np.array_equal(block(Tensor(x)).data, x)
        exact &= np.array_equal(block.train()(Tensor(x)).data, x)
    cfg = ModelConfig(window_len=20, topic_dim=3, use_attention=False)
    model = build(cfg)
    for b in model.blocks:
        for conv in (b.conv1, b.conv2):
            conv.g.data[:] = 0.0
            conv.bias.data[:] = 0.0
    x = rng.normal(size=(20, 4))
    exact &= np.array_equal(model.encode(Tensor(x)).data, x.T)
    detail = "zero-gain, zero-bias blocks return the input bit-for-bit" if exact else "identity broken"
    acceptance(4, "residual identity", exact, detail)
    assert exact, detail


def test_05_attention_properties(acceptance):
    rng = np.random.default_rng(5)
    worst_row = 0.0
    equivariant = True
    for _ in range(ATTENTION_INSTANCES):
        n, d = int(rng.integers(1, 12)), int(rng.integers(1, 8))
        att = SelfAttentionLayer(d, rng)
        a = rng.normal(size=(n, d)) * 3
        w = att.weights(Tensor(a)).data
        worst_row = max(worst_row, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
        equivariant &= bool(np.all(w >= 0))
        perm = rng.permutation(n)
        equivariant &= np.allclose(att(Tensor(a[perm])).data, att(Tensor(a)).data[perm], rtol=0, atol=1e-12)
    single = SelfAttentionLayer(2, rng)
    for lin in (single.wq, single.wk, single.wv):
        lin.weight.data[...] = np.eye(2)
    identity = single(Tensor([[2.0, 3.0]])).data.tolist() == [[2.0, 3.0]]
    ok = worst_row <= STOCHASTIC_TOL and equivariant and identity
    detail = (f"max |row sum - 1| {worst_row:.1e} (tol {STOCHASTIC_TOL:g}); permutation equivariant on "
              f"{ATTENTION_INSTANCES} instances: {'yes' if equivariant else 'NO'}; single step identity: "
              f"{'yes' if identity else 'NO'}")
    acceptance(5, "attention properties", ok, detail)
    assert ok, detail


def _ar_run():
    series = generate_ar_series()
    win = make_windows(series, 12, SplitSpec())
    model = build(ModelConfig(window_len=12, topic_dim=0, seed=0))
    history = train(model, win.train, TrainConfig(batch_size=32, epochs=32, shuffle_seed=0))
    report = evaluate(model, win.test, win.trend_epsilon)
    return history, report


@pytest.mark.slow
def test_06_learning_capability(acceptance):
    start = time.perf_counter()
    history, report = _ar_run()
    history2, report2 = _ar_run()
    elapsed = time.perf_counter() - start
    deterministic = history == history2 and report.to_dict() == report2.to_dict()
    model_mse = report.model.mse
    pers_mse = report.baselines["persistence"].mse
    ratio = model_mse / pers_mse
    ok = ratio < AR_RATIO and deterministic and elapsed / 2 < AR_MAX_SECONDS
    detail = (f"test MSE {model_mse:.3e} vs persistence {pers_mse:.3e}: ratio {ratio:.3g} "
              f"(needs < {AR_RATIO:g}); deterministic: {'yes' if deterministic else 'NO'}; "
              f"{elapsed / 2:.1f} s per run")
    acceptance(6, "learning capability (AR series)", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_07_ablation_ordering(acceptance):
    res = run_ablation()
    full, plain = res.mean_macro_f1(FULL_MODEL.name), res.mean_macro_f1(PLAIN_TCN.name)
    print(res.table())
    ok = full >= plain
    detail = (f"mean macro-F1 over {len(res.seeds)} seeds: {FULL_MODEL.name} {full:.4f} vs "
              f"{PLAIN_TCN.name} {plain:.4f}, gap {full - plain:+.4f}")
    acceptance(7, "ablation ordering", ok, detail)
    assert ok, detail + "\n" + res.table()


def test_08_pipeline_arithmetic(acceptance):
    series = HeatSeries("s", "2012-01", np.arange(114.0))
    assert series.end_month == "2021-06"
    win = make_windows(series, 12, SplitSpec("2019-06"))
    counts = (len(win.train), len(win.test))
    message = ""
    try:
        make_windows(series, 100, SplitSpec("2019-06"))
    except WindowError as err:
        message = str(err)
    ok = counts == (78, 24) and "maximum feasible window_len is 89" in message
    detail = f"window 12 -> {counts[0]} train / {counts[1]} test; window 100 -> {message or 'NOT rejected'}"
    acceptance(8, "pipeline arithmetic", ok, detail)
    assert ok, detail


def test_09_determinism(acceptance, tmp_path):
    series = tmp_path / "series.csv"
    t = np.arange(114)
    write_series_csv(HeatSeries("s", "2012-01", np.round(40 + 0.2 * t + 6 * np.sin(2 * np.pi * (t % 12) / 12))), series)
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "model": {"window_len": 12, "topic_dim": 4, "seed": 11},
        "train": {"epochs": 3, "shuffle_seed": 7},
        "data": {"series": str(series)},
    }))
    outputs = []
    for run in ("a", "b"):
        model = tmp_path / f"{run}.json"
        report = tmp_path / f"{run}.report.json"
        assert main(["train", "--config", str(config), "--model-out", str(model)]) == 0
        # second leg: retrain from the emitted manifest
        again = tmp_path / f"{run}.again.json"
        assert main(["train", "--config", str(tmp_path / f"{run}.manifest.json"), "--model-out", str(again)]) == 0
        assert main(["evaluate", str(model), str(series), "--report-out", str(report)]) == 0
        outputs.append((model.read_bytes(), again.read_bytes(), report.read_bytes()))
    (ma, aa, ra), (mb, ab, rb) = outputs
    ok = ma == mb == aa == ab and ra == rb
    detail = f"model files identical: {ma == mb == aa == ab}; reports identical: {ra == rb}"
    acceptance(9, "determinism", ok, detail)
    assert ok, detail


def test_10_metrics_hand_examples(acceptance):
    checks = []
    labels = [RISE, FALL, STABLE, STABLE, RISE]
    perfect = classification_metrics(labels, labels)
    checks.append(all(v == 1.0 for c in (RISE, FALL, STABLE)
                      for v in (perfect.precision[c], perfect.recall[c], perfect.f1[c]))
                  and perfect.macro_f1 == perfect.accuracy == 1.0)
    binary = classification_metrics([RISE, FALL, RISE, FALL], [RISE, RISE, FALL, FALL])
    checks.append((binary.precision[RISE], binary.recall[RISE], binary.f1[RISE]) == (0.5, 0.5, 0.5))
    checks.append(binary.confusion == [[1, 1, 0], [1, 1, 0], [0, 0, 0]])
    one = classification_metrics([RISE] * 6, [RISE, FALL, STABLE] * 2)
    checks.append(one.precision[RISE] == pytest.approx(1 / 3, abs=1e-15) and one.recall[RISE] == 1.0)
    checks.append(one.macro_f1 == pytest.approx(one.f1[RISE] / 3, abs=1e-15) and one.f1[RISE] == pytest.approx(0.5))
    degenerate = classification_metrics([STABLE, STABLE, STABLE], [RISE, RISE, FALL])
    checks.append(degenerate.precision[STABLE] == degenerate.recall[STABLE] == degenerate.f1[STABLE] == 0.0)
    checks.append(degenerate.macro_f1 == 0.0 and degenerate.support[STABLE] == 0)
    ok = all(checks)
    detail = f"{sum(checks)}/{len(checks)} hand-counted examples reproduced exactly"
    acceptance(10, "metrics unit tests", ok, detail)
    assert ok, detail
