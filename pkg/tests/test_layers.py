import json
import math

import numpy as np
import pytest

from shdp_tcn import tensor as T
from shdp_tcn.layers import (
    CausalConvLayer,
    DegenerateWeightError,
    Dropout,
    LinearLayer,
    ResidualBlock,
    SelfAttentionLayer,
    block_dilations,
    load_parameters,
    parameters_to_json,
    receptive_field,
    weight_norm_effective,
)
from shdp_tcn.tensor import ShapeError, Tape, Tensor


def direct_dilated_conv(x, filters, bias, d):
    """out[o, t] = bias[o] + sum_i sum_{k=1..K} f[o, i, k] * x[i, t - (K - k) d],
    one-based time, inputs at indices < 1 read as zero."""
    c_out, c_in, K = filters.shape
    steps = x.shape[1]
    out = np.zeros((c_out, steps))
    for o in range(c_out):
        for t in range(1, steps + 1):
            s = bias[o]
            for i in range(c_in):
                for k in range(1, K + 1):
                    src = t - (K - k) * d
                    if src >= 1:
                        s += filters[o, i, k - 1] * x[i, src - 1]
            out[o, t - 1] = s
    return out


def attention_oracle(a, wq, wk, wv):
    n, d = a.shape
    q, k, v = a @ wq, a @ wk, a @ wv
    out = np.zeros_like(a)
    for i in range(n):
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(n)]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        z = sum(e)
        for j in range(n):
            out[i] += e[j] / z * v[j]
    return out


def set_conv(layer, filters, bias=None):
    """Load ``filters`` as the effective kernel (gain = per-channel norm)."""
    filters = np.asarray(filters, dtype=float)
    layer.v.data[...] = filters
    layer.g.data[...] = np.sqrt((filters.reshape(filters.shape[0], -1) ** 2).sum(axis=1))
    layer.bias.data[...] = 0.0 if bias is None else bias


def rng_(seed=0):
    return np.random.default_rng(seed)


class TestCausalConv:
    def test_kernel_two_unit_filter(self):
        # y_t = x_{t-1} + x_t
        out = T.conv1d_causal(Tensor([[1.0, 2, 3, 4]]), Tensor([[[1.0, 1.0]]]), Tensor([0.0]), 1)
        assert out.data.tolist() == [[1.0, 3.0, 5.0, 7.0]]

    def test_dilated_three_tap(self):
        # K=3, d=2, F=[1,0,1]: y_t = x_{t-4} + x_t
        out = T.conv1d_causal(Tensor([[1.0, 2, 3, 4, 5]]), Tensor([[[1.0, 0.0, 1.0]]]), Tensor([0.0]), 2)
        assert out.data.tolist() == [[1.0, 2.0, 3.0, 4.0, 6.0]]

    @pytest.mark.parametrize("K,d", [(1, 1), (2, 1), (3, 2), (4, 8)])
    def test_delta_filter_is_identity(self, K, d):
        x = rng_(K).normal(size=(1, 17))
        f = np.zeros((1, 1, K))
        f[0, 0, -1] = 1.0
        out = T.conv1d_causal(Tensor(x), Tensor(f), Tensor([0.0]), d)
        np.testing.assert_array_equal(out.data, x)

    def test_matches_direct_formula(self):
        rng = rng_(11)
        for _ in range(60):
            K, d, steps = int(rng.integers(1, 5)), int(rng.choice([1, 2, 4, 8])), int(rng.integers(1, 65))
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            x, f, b = rng.normal(size=(c_in, steps)), rng.normal(size=(c_out, c_in, K)), rng.normal(size=c_out)
            out = T.conv1d_causal(Tensor(x), Tensor(f), Tensor(b), d)
            np.testing.assert_allclose(out.data, direct_dilated_conv(x, f, b, d), atol=1e-12, rtol=0)

    def test_layer_applies_weight_norm_and_bias(self):
        layer = CausalConvLayer(1, 1, 2, 1, rng_())
        set_conv(layer, [[[1.0, 1.0]]], bias=[0.5])
        out = layer(Tensor([[1.0, 2.0, 3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[1.5, 3.5, 5.5, 7.5]], atol=1e-15)

    def test_causality_by_gradient(self):
        layer = CausalConvLayer(2, 3, 3, 2, rng_(1))
        x = Tensor(rng_(2).normal(size=(2, 12)), requires_grad=True)
        t = 6
        with Tape() as tape:
            out = T.sum(T.take(layer(x), (slice(None), t)))
        tape.backward(out)
        assert np.all(x.grad[:, t + 1 :] == 0.0)
        assert np.any(x.grad[:, : t + 1] != 0.0)

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            CausalConvLayer(2, 1, 3, 1, rng_())(Tensor(np.ones((3, 5))))


class TestReceptiveField:
    def test_single_layer(self):
        assert receptive_field(3, [4]) == 9

    def test_pointwise(self):
        assert receptive_field(1, [1, 2, 4, 8]) == 1

    def test_stack_one_conv_each(self):
        assert receptive_field(2, [1, 2, 4]) == 8

    def test_stack_probe(self):
        """Perturbation at lag RF-1 reaches the last output, lag RF does not."""
        rng = rng_(4)
        layers = [CausalConvLayer(1, 1, 2, d, rng) for d in (1, 2, 4)]
        for layer in layers:
            set_conv(layer, [[[1.0, 1.0]]])
        rf = receptive_field(2, [1, 2, 4])
        x = np.ones((1, 20))
        t = 19

        def run(xx):
            h = Tensor(xx)
            for layer in layers:
                h = layer(h)
            return h.data[0, t]

        base = run(x)
        for lag, changes in ((rf - 1, True), (rf, False)):
            xp = x.copy()
            xp[0, t - lag] += 1.0
            assert bool(run(xp) != base) is changes

    def test_block_dilations(self):
        assert block_dilations(3) == [1, 1, 2, 2, 4, 4]
        assert receptive_field(3, block_dilations(3)) == 1 + 2 * 2 * (1 + 2 + 4)


class TestWeightNorm:
    def test_three_four_five(self):
        out = weight_norm_effective(Tensor([3.0, 4.0]), 5.0)
        np.testing.assert_allclose(out.data, [3.0, 4.0], atol=1e-15)

    def test_zero_gain(self):
        out = weight_norm_effective(Tensor([0.3, -2.0, 1.0]), 0.0)
        np.testing.assert_array_equal(np.abs(out.data), 0.0)

    def test_norm_equals_gain(self):
        rng = rng_(7)
        for _ in range(50):
            v = rng.normal(size=(2, 3))
            g = float(rng.normal())
            out = weight_norm_effective(Tensor(v), g)
            assert abs(np.linalg.norm(out.data) - abs(g)) <= 1e-12

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateWeightError):
            weight_norm_effective(Tensor([0.0, 0.0]), 1.0)

    def test_gradient_reaches_v_and_g(self):
        v = Tensor([1.0, 2.0, 2.0], requires_grad=True)
        g = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = T.sum(T.mul(weight_norm_effective(v, g), Tensor([1.0, 0.0, 0.0])))
        tape.backward(y)
        # y = g v0 / |v|, |v| = 3
        np.testing.assert_allclose(g.grad, [1.0 / 3.0])
        np.testing.assert_allclose(v.grad, [2 * (1 / 3 - 1 / 27), -2 * 2 / 27, -2 * 2 / 27])

    def test_layer_channels_have_gain_norm(self):
        layer = CausalConvLayer(3, 4, 3, 1, rng_(2))
        layer.g.data[:] = [0.5, -1.0, 2.0, 3.0]
        w = layer.effective_weight().data.reshape(4, -1)
        np.testing.assert_allclose(np.linalg.norm(w, axis=1), [0.5, 1.0, 2.0, 3.0], atol=1e-12)


class TestAttention:
    def test_single_row_identity(self):
        att = SelfAttentionLayer(2, rng_())
        for lin in (att.wq, att.wk, att.wv):
            lin.weight.data[...] = np.eye(2)
        np.testing.assert_allclose(att(Tensor([[2.0, 3.0]])).data, [[2.0, 3.0]], atol=1e-15)

    def test_identical_rows(self):
        att = SelfAttentionLayer(3, rng_(1))
        out = att(Tensor(np.tile([0.2, -1.0, 0.7], (2, 1)))).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_hand_rolled_two_step(self):
        att = SelfAttentionLayer(1, rng_())
        for lin in (att.wq, att.wk, att.wv):
            lin.weight.data[...] = [[1.0]]
        a = np.array([[0.0], [math.log(3.0)]])
        l3 = math.log(3.0)
        # row 2: softmax([0, l3*l3]) applied to V = [0, l3]
        w = math.exp(l3 * l3) / (1.0 + math.exp(l3 * l3))
        expected_row2 = w * l3
        out = att(Tensor(a)).data
        assert abs(out[1, 0] - expected_row2) <= 1e-12
        np.testing.assert_allclose(out, attention_oracle(a, *(np.eye(1),) * 3), atol=1e-12)

    def test_matches_oracle(self):
        rng = rng_(5)
        att = SelfAttentionLayer(4, rng)
        a = rng.normal(size=(6, 4))
        ref = attention_oracle(a, att.wq.weight.data, att.wk.weight.data, att.wv.weight.data)
        np.testing.assert_allclose(att(Tensor(a)).data, ref, atol=1e-12)

    def test_rows_stochastic(self):
        rng = rng_(6)
        att = SelfAttentionLayer(5, rng)
        w = att.weights(Tensor(rng.normal(size=(9, 5)) * 3)).data
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_permutation_equivariant(self):
        rng = rng_(8)
        att = SelfAttentionLayer(3, rng)
        a = rng.normal(size=(7, 3))
        perm = rng.permutation(7)
        np.testing.assert_allclose(att(Tensor(a[perm])).data, att(Tensor(a)).data[perm], atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            SelfAttentionLayer(3, rng_())(Tensor(np.ones((4, 2))))


class TestDropout:
    def test_eval_is_identity(self):
        d = Dropout(0.5, seed=1)
        x = Tensor(np.arange(5.0))
        assert d(x) is x

    def test_zero_rate(self):
        d = Dropout(0.0, seed=1).train()
        x = Tensor(np.arange(5.0))
        np.testing.assert_array_equal(d(x).data, x.data)

    def test_inverted_scaling_mean(self):
        d = Dropout(0.5, seed=3).train()
        out = d(Tensor(np.ones(100_000))).data
        assert 0.98 <= out.mean() <= 1.02
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_seeded(self):
        a = Dropout(0.3, seed=9).train()(Tensor(np.ones(50))).data
        b = Dropout(0.3, seed=9).train()(Tensor(np.ones(50))).data
        np.testing.assert_array_equal(a, b)

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            Dropout(1.0, seed=0)


def zero_block(c, K=3, d=1):
    block = ResidualBlock(c, c, K, d, 0.1, rng_(0), seed=0)
    for conv in (block.conv1, block.conv2):
        conv.g.data[:] = 0.0
        conv.bias.data[:] = 0.0
    return block


class TestResidualBlock:
    def test_zero_residual_is_identity(self):
        x = rng_(1).normal(size=(3, 10))
        out = zero_block(3)(Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_pointwise_hand_case(self):
        block = ResidualBlock(1, 1, 1, 1, 0.1, rng_(), seed=0)
        set_conv(block.conv1, [[[1.0]]])
        set_conv(block.conv2, [[[1.0]]])
        out = block(Tensor([[-1.0, 2.0]]))
        assert out.data.tolist() == [[-1.0, 4.0]]

    def test_channel_matching_conv(self):
        block = ResidualBlock(2, 4, 3, 1, 0.0, rng_(), seed=0)
        assert block.match_conv is not None and block.match_conv.kernel_size == 1
        assert block(Tensor(np.ones((2, 6)))).shape == (4, 6)
        assert ResidualBlock(3, 3, 3, 1, 0.0, rng_(), seed=0).match_conv is None

    def test_causal_perturbation(self):
        rng = rng_(3)
        block = ResidualBlock(2, 3, 3, 2, 0.1, rng, seed=0)
        x = rng.normal(size=(2, 16))
        base = block(Tensor(x)).data
        for t in range(15):
            xp = x.copy()
            xp[:, t + 1 :] += rng.normal(size=(2, 15 - t))
            np.testing.assert_array_equal(block(Tensor(xp)).data[:, : t + 1], base[:, : t + 1])

    def test_eval_deterministic(self):
        rng = rng_(3)
        block = ResidualBlock(2, 2, 3, 1, 0.5, rng, seed=0)
        x = Tensor(rng.normal(size=(2, 8)))
        np.testing.assert_array_equal(block(x).data, block(x).data)

    def test_train_mode_uses_dropout(self):
        rng = rng_(3)
        block = ResidualBlock(2, 2, 3, 1, 0.5, rng, seed=0).train()
        x = Tensor(np.abs(rng.normal(size=(2, 8))) + 1)
        assert not np.array_equal(block(x).data, block(x).data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            zero_block(3)(Tensor(np.ones((2, 5))))


class TestSerialization:
    def test_round_trip(self):
        src = ResidualBlock(2, 3, 3, 2, 0.1, rng_(1), seed=0)
        doc = json.loads(json.dumps(parameters_to_json(src)))
        dst = ResidualBlock(2, 3, 3, 2, 0.1, rng_(2), seed=0)
        load_parameters(dst, doc)
        for (na, a), (nb, b) in zip(src.named_parameters(), dst.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(a.data, b.data)

    def test_paths(self):
        names = [n for n, _ in LinearLayer(2, 3, rng_()).named_parameters()]
        assert names == ["weight", "bias"]
        names = dict(ResidualBlock(2, 3, 3, 1, 0.1, rng_(), seed=0).named_parameters())
        assert {"conv1.v", "conv1.g", "conv1.bias", "match_conv.v"} <= set(names)

    def test_shape_validation(self):
        doc = parameters_to_json(LinearLayer(2, 3, rng_()))
        doc["weight"]["shape"] = [3, 2]
        with pytest.raises(ShapeError, match="weight"):
            load_parameters(LinearLayer(2, 3, rng_()), doc)

    def test_missing_path(self):
        doc = parameters_to_json(LinearLayer(2, 3, rng_()))
        del doc["bias"]
        with pytest.raises(ShapeError, match="missing"):
            load_parameters(LinearLayer(2, 3, rng_()), doc)
