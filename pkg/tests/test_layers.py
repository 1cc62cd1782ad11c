"""Layer-level tests: zero-fill oracles for masked passes and central
finite-difference checks for every gradient path."""

import numpy as np
import pytest

from structdrop import (ConvShape, DropoutMode, DropoutPattern, MacCounter,
                        PatternKind, SensitivityConfig, StateError, StepContext,
                        TileConfig, backward_dense_masked, forward_dense_masked,
                        make_rng, mask_from_pattern)
from structdrop.layers import (ConvLayer, DenseLayer, LstmLayer, ReluLayer,
                               SigmoidLayer, SoftmaxCrossEntropy, TanhLayer)
from structdrop.search import PatternDistribution


def finite_difference_check(params, loss_fn, rng, samples=20, eps=1e-5, tol=1e-4):
    """Central differences on random parameter entries vs analytic grads."""
    loss_fn()
    worst = 0.0
    for param, grad in params:
        flat_p, flat_g = param.ravel(), grad.ravel()
        for _ in range(samples):
            i = int(rng.integers(flat_p.size))
            keep = flat_p[i]
            flat_p[i] = keep + eps
            up = loss_fn(grad=False)
            flat_p[i] = keep - eps
            down = loss_fn(grad=False)
            flat_p[i] = keep
            numeric = (up - down) / (2 * eps)
            analytic = flat_g[i]
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, rel)
    assert worst < tol, f"worst relative gradient error {worst:.3e}"
    return worst


class TestForwardDenseMasked:
    def test_period_one_is_dense(self):
        layer = DenseLayer(5, 7, make_rng(0))
        x = make_rng(1).standard_normal((5, 3))
        pattern = DropoutPattern(PatternKind.ROW, 1, 1)
        out = forward_dense_masked(layer, x, pattern)
        np.testing.assert_array_equal(out, layer.weight @ x + layer.bias[:, None])

    def test_all_ones_arithmetic(self):
        # all-one weights and inputs: kept rows sum the fan-in, dropped rows
        # stay exactly zero
        layer = DenseLayer(4, 6, make_rng(2))
        layer.weight[:] = 1.0
        layer.bias[:] = 0.0
        x = np.ones((4, 2))
        out = forward_dense_masked(layer, x, DropoutPattern(PatternKind.ROW, 2, 1))
        np.testing.assert_array_equal(out[::2], np.full((3, 2), 4.0))
        np.testing.assert_array_equal(out[1::2], np.zeros((3, 2)))

    def test_zero_fill_oracle(self):
        layer = DenseLayer(9, 11, make_rng(3))
        x = make_rng(4).standard_normal((9, 5))
        pattern = DropoutPattern(PatternKind.ROW, 3, 2)
        out = forward_dense_masked(layer, x, pattern)
        mask = mask_from_pattern(pattern, 11)
        w = layer.weight.copy()
        w[~mask.bits] = 0.0
        b = np.where(mask.bits, layer.bias, 0.0)
        np.testing.assert_allclose(out, w @ x + b[:, None], rtol=1e-6, atol=1e-12)

    def test_mac_accounting(self):
        layer = DenseLayer(8, 12, make_rng(5))
        counter = MacCounter()
        forward_dense_masked(layer, np.ones((8, 3)),
                             DropoutPattern(PatternKind.ROW, 4, 1), counter=counter)
        assert counter.performed == 3 * 8 * 3  # kept rows x in_dim x batch
        assert counter.dense == 12 * 8 * 3


class TestBackwardDenseMasked:
    def test_period_one_is_dense_backprop(self):
        layer = DenseLayer(5, 7, make_rng(6))
        x = make_rng(7).standard_normal((5, 3))
        upstream = make_rng(8).standard_normal((7, 3))
        pattern = DropoutPattern(PatternKind.ROW, 1, 1)
        forward_dense_masked(layer, x, pattern)
        d_weight, dx = backward_dense_masked(layer, upstream, pattern)
        np.testing.assert_allclose(d_weight, upstream @ x.T, rtol=1e-12)
        np.testing.assert_allclose(dx, layer.weight.T @ upstream, rtol=1e-12)

    def test_single_kept_row_grad(self):
        layer = DenseLayer(4, 5, make_rng(9))
        x = make_rng(10).standard_normal((4, 2))
        upstream = make_rng(11).standard_normal((5, 2))
        pattern = DropoutPattern(PatternKind.ROW, 5, 3)
        forward_dense_masked(layer, x, pattern)
        d_weight, _ = backward_dense_masked(layer, upstream, pattern)
        assert np.all(d_weight[[0, 1, 3, 4]] == 0.0)
        assert np.any(d_weight[2] != 0.0)

    def test_pattern_mismatch_raises(self):
        layer = DenseLayer(4, 6, make_rng(12))
        forward_dense_masked(layer, np.ones((4, 2)),
                             DropoutPattern(PatternKind.ROW, 2, 1))
        with pytest.raises(StateError):
            backward_dense_masked(layer, np.ones((6, 2)),
                                  DropoutPattern(PatternKind.ROW, 2, 2))

    def test_finite_differences_on_kept_rows(self):
        rng = make_rng(13)
        layer = DenseLayer(6, 8, make_rng(14))
        x = rng.standard_normal((6, 4))
        probe = rng.standard_normal((8, 4))
        pattern = DropoutPattern(PatternKind.ROW, 3, 1)

        def loss(grad=True):
            out = forward_dense_masked(layer, x, pattern, scale=1.4)
            if grad:
                backward_dense_masked(layer, probe.copy(), pattern)
            return float((out * probe).sum())

        finite_difference_check(layer.params(), loss, rng)


def make_step_loss(layer, x, probe, ctx_kwargs=None, freeze_rng=True):
    """Loss hook running layer.forward/backward with a frozen dropout draw."""
    state = (layer.dropout_rng.bit_generator.state
             if freeze_rng and layer.dropout_rng is not None else None)

    def loss(grad=True):
        if state is not None:
            layer.dropout_rng.bit_generator.state = state
        ctx = StepContext(training=True, **(ctx_kwargs or {}))
        out = layer.forward(x, ctx)
        if grad:
            layer.backward(probe.copy(), ctx)
        return float((out * probe).sum())

    return loss


class TestTrainingPathGradients:
    def test_dense_modes(self):
        rng = make_rng(20)
        for mode, dist in [
            (DropoutMode.NONE, None),
            (DropoutMode.BERNOULLI, None),
            (DropoutMode.APPROX_ROW, PatternDistribution.from_probs([0.2, 0.5, 0.3])),
            (DropoutMode.APPROX_TILE, PatternDistribution.from_probs([0.4, 0.6])),
        ]:
            layer = DenseLayer(6, 8, make_rng(21), mode=mode, rate=0.4,
                               distribution=dist, tile=TileConfig(2, 2),
                               dropout_rng=make_rng(22))
            x = rng.standard_normal((6, 4))
            probe = rng.standard_normal((8, 4))
            finite_difference_check(layer.params(),
                                    make_step_loss(layer, x, probe), rng)

    def test_conv_modes(self):
        rng = make_rng(23)
        shape = ConvShape(2, 8, 8, 3, 3, stride=1, padding=1)
        x = rng.standard_normal((2, 2, 8, 8))
        probe = rng.standard_normal((2, 3, 8, 8))
        sens = SensitivityConfig(region_rows=4, region_cols=4,
                                 value_threshold=0.2)
        for mode, tile in [(DropoutMode.NONE, TileConfig(8, 8)),
                           (DropoutMode.RSDP, TileConfig(8, 8)),
                           (DropoutMode.BSDP, TileConfig(16, 6))]:
            layer = ConvLayer(shape, make_rng(24), mode=mode, sensitivity=sens,
                              tile=tile, dropout_rng=make_rng(25))
            finite_difference_check(
                layer.params(),
                make_step_loss(layer, x, probe, {"dropout_ratio": 0.5}), rng)

    def test_lstm_modes(self):
        rng = make_rng(26)
        x = rng.standard_normal((4, 5, 3))
        probe = rng.standard_normal((4, 6, 3))
        for mode, dist in [
            (DropoutMode.NONE, None),
            (DropoutMode.BERNOULLI, None),
            (DropoutMode.APPROX_ROW, PatternDistribution.from_probs([0.2, 0.5, 0.3])),
            (DropoutMode.APPROX_TILE, PatternDistribution.from_probs([0.5, 0.5])),
        ]:
            layer = LstmLayer(5, 6, make_rng(27), mode=mode, rate=0.5,
                              distribution=dist, tile=TileConfig(8, 11),
                              dropout_rng=make_rng(28))
            finite_difference_check(layer.params(),
                                    make_step_loss(layer, x, probe), rng)

    def test_activations(self):
        rng = make_rng(29)
        x = rng.standard_normal((5, 4))
        for layer in [ReluLayer(), SigmoidLayer(), TanhLayer()]:
            ctx = StepContext(training=True)
            probe = rng.standard_normal((5, 4))
            out = layer.forward(x.copy(), ctx)
            dx = layer.backward(probe.copy(), ctx)
            eps = 1e-6
            up = layer.forward(x + eps * probe, ctx)
            down = layer.forward(x - eps * probe, ctx)
            numeric = float(((up - down) * probe).sum()) / (2 * eps)
            analytic = float((dx * probe).sum())
            assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), 1e-8)
            layer.forward(x.copy(), ctx)  # restore cache coherence

    def test_softmax_cross_entropy_gradient(self):
        rng = make_rng(30)
        head = SoftmaxCrossEntropy()
        logits = rng.standard_normal((7, 5))
        labels = rng.integers(0, 7, size=5)
        loss, _ = head.forward(logits, labels)
        grad = head.backward()
        eps = 1e-6
        for _ in range(20):
            i, j = int(rng.integers(7)), int(rng.integers(5))
            up = logits.copy()
            up[i, j] += eps
            down = logits.copy()
            down[i, j] -= eps
            numeric = (head.forward(up, labels)[0] -
                       head.forward(down, labels)[0]) / (2 * eps)
            assert abs(numeric - grad[i, j]) <= 1e-4 * max(abs(numeric), 1e-8)


class TestMaskedEquivalence:
    def test_dropped_units_have_zero_grads(self):
        layer = DenseLayer(5, 9, make_rng(31),
                           mode=DropoutMode.APPROX_ROW,
                           distribution=PatternDistribution.from_probs([0.0, 0.0, 1.0]),
                           dropout_rng=make_rng(32))
        ctx = StepContext(training=True)
        out = layer.forward(np.ones((5, 2)), ctx)
        layer.backward(np.ones((9, 2)), ctx)
        mask = mask_from_pattern(layer._pattern, 9)
        assert np.all(out[~mask.bits] == 0.0)
        assert np.all(layer.d_weight[~mask.bits] == 0.0)
        assert np.all(layer.d_bias[~mask.bits] == 0.0)

    def test_lstm_masked_step_matches_zero_filled_dense(self):
        # one forward pass with a unit pattern equals the dense pass of a
        # layer whose dropped gate rows (and outputs) are zeroed by hand
        dist = PatternDistribution.from_probs([0.0, 1.0])
        masked = LstmLayer(3, 4, make_rng(33), mode=DropoutMode.APPROX_ROW,
                           distribution=dist, dropout_rng=make_rng(34))
        plain = LstmLayer(3, 4, make_rng(33))
        x = make_rng(35).standard_normal((3, 3, 2))
        h_masked = masked.forward(x, StepContext(training=True))
        _, unit_keep, *_ = masked._cache
        gate_keep = np.tile(unit_keep, 4)
        plain.weight[~gate_keep] = 0.0
        plain.bias[~gate_keep] = 0.0
        h_plain = plain.forward(x, StepContext(training=False))
        h_plain *= unit_keep[None, :, None]
        np.testing.assert_allclose(h_masked, h_plain, rtol=1e-12, atol=1e-12)
