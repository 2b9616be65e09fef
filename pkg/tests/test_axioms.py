import numpy as np
import pytest

from camx import LayerSpec, Network, Tensor, backward, forward
from camx.axioms import (
    axiom_report,
    bias_accumulation,
    conservation_residual,
    decomposition_check,
    evaluate_phi,
    layer_diagnostics,
    mean_defined,
    method_weights,
    sensitivity_residual,
    zeta_per_channel,
)
from camx.cam import CamMethod, per_channel_score_drops, weights_xgrad_cam

from helpers import conv, dense, random_image_net, random_net


@pytest.fixture(scope="module")
def net_trace():
    rng = np.random.default_rng(60)
    net, image = random_image_net(rng)
    while not net.spatial_layers():
        net, image = random_image_net(rng)
    trace = forward(net, image)
    c = int(np.argmax(trace.scores.array))
    return net, trace, c


class TestDecomposition:
    @pytest.mark.parametrize("seed", range(10))
    def test_identity_and_dual_epsilon_agree(self, seed):
        rng = np.random.default_rng(700 + seed)
        net, image = random_net(rng)
        trace = forward(net, image)
        c = int(rng.integers(0, net.num_classes))
        grads = backward(net, trace, c)
        for layer in range(len(net.layers) - 1):
            chk = decomposition_check(net, trace, grads, layer)
            assert chk.identity_residual < 1e-10
            scale = max(abs(chk.score), 1.0)
            assert abs(chk.epsilon_residual - chk.epsilon_bias_traced) < 1e-10 * scale

    def test_bias_free_network_has_zero_epsilon(self):
        rng = np.random.default_rng(710)
        w1 = rng.normal(size=(2, 1, 3, 3))
        w2 = rng.normal(size=(3, 2 * 4 * 4))
        layers = (
            LayerSpec("conv2d", "c", Tensor(w1), Tensor(np.zeros(2)), padding=1),
            LayerSpec("relu", "r"),
            LayerSpec("flatten", "f"),
            LayerSpec("dense", "d", Tensor(w2), Tensor(np.zeros(3))),
        )
        net = Network(layers=layers, input_shape=(1, 4, 4))
        trace = forward(net, Tensor(rng.normal(size=(1, 4, 4))))
        grads = backward(net, trace, 0)
        for layer in range(len(net.layers) - 1):
            chk = decomposition_check(net, trace, grads, layer)
            assert chk.epsilon_bias_traced == 0.0
            assert abs(chk.epsilon_residual) < 1e-12

    def test_epsilon_shrinks_as_layer_rises(self, net_trace):
        # bias accumulation over fewer remaining layers can only lose terms
        net, trace, c = net_trace
        grads = backward(net, trace, c)
        values = [abs(bias_accumulation(net, grads, l)) for l in range(len(net.layers))]
        assert values[-1] == 0.0

    def test_out_of_range_layer(self, net_trace):
        net, trace, c = net_trace
        grads = backward(net, trace, c)
        with pytest.raises(Exception):
            decomposition_check(net, trace, grads, len(net.layers))


class TestZeta:
    @pytest.mark.parametrize("seed", range(6))
    def test_per_channel_expansion_matches_ablation_drop(self, seed):
        rng = np.random.default_rng(720 + seed)
        net, image = random_image_net(rng)
        while not net.spatial_layers():
            net, image = random_image_net(rng)
        trace = forward(net, image)
        c = int(np.argmax(trace.scores.array))
        grads = backward(net, trace, c)
        score = float(trace.scores.array[c])
        for layer in net.spatial_layers():
            zeta = zeta_per_channel(net, trace, grads, layer).array
            drops = per_channel_score_drops(net, trace, layer, c).array
            gf = (grads.gradients[layer].array * trace.outputs[layer].array).sum(axis=(1, 2))
            for k in range(len(zeta)):
                lhs = drops[k]
                rhs = gf[k] + zeta[k]
                assert abs(lhs - rhs) <= 1e-6 * max(abs(score), abs(lhs), 1e-12)

    def test_zeta_vanishes_when_tail_is_linear(self):
        # relu -> flatten -> dense tail: ablation changes no gradients
        rng = np.random.default_rng(730)
        layers = (
            conv(rng, "c", 1, 3),
            LayerSpec("relu", "r"),
            LayerSpec("flatten", "f"),
            dense(rng, "d", 3 * 5 * 5, 2),
        )
        net = Network(layers=layers, input_shape=(1, 5, 5))
        trace = forward(net, Tensor(rng.normal(size=(1, 5, 5))))
        grads = backward(net, trace, 0)
        zeta = zeta_per_channel(net, trace, grads, 1).array
        np.testing.assert_allclose(zeta, 0.0, atol=1e-12)

    def test_rejects_non_spatial_layer(self, net_trace):
        net, trace, c = net_trace
        grads = backward(net, trace, c)
        with pytest.raises(Exception):
            zeta_per_channel(net, trace, grads, len(net.layers) - 1)


class TestResiduals:
    def test_sensitivity_zero_for_ablation_weights(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        drops = per_channel_score_drops(net, trace, layer, c)
        w = method_weights(net, trace, CamMethod.ABLATION_CAM, layer, c, score_drops=drops)
        res = sensitivity_residual(net, trace, w, layer, c, drops)
        assert res is not None and res <= 1e-9

    def test_sensitivity_matches_manual_ratio(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        grads = backward(net, trace, c)
        drops = per_channel_score_drops(net, trace, layer, c)
        w = weights_xgrad_cam(trace, grads, layer)
        got = sensitivity_residual(net, trace, w, layer, c, drops)
        sums = trace.outputs[layer].array.sum(axis=(1, 2))
        want = np.abs(drops.array - w.array * sums).sum() / np.abs(drops.array).sum()
        assert got == pytest.approx(want, rel=1e-12)

    def test_sensitivity_none_when_all_drops_zero(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        zero_drops = Tensor(np.zeros(trace.outputs[layer].shape[0]))
        w = Tensor(np.zeros(trace.outputs[layer].shape[0]))
        assert sensitivity_residual(net, trace, w, layer, c, zero_drops) is None

    def test_conservation_matches_manual_ratio(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        grads = backward(net, trace, c)
        w = weights_xgrad_cam(trace, grads, layer)
        score = float(trace.scores.array[c])
        got = conservation_residual(trace, w, layer, score)
        sums = trace.outputs[layer].array.sum(axis=(1, 2))
        want = abs(score - float(w.array @ sums)) / abs(score)
        assert got == pytest.approx(want, rel=1e-12)

    def test_conservation_none_for_zero_score(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        w = Tensor(np.zeros(trace.outputs[layer].shape[0]))
        assert conservation_residual(trace, w, layer, 0.0) is None

    def test_xgrad_conservation_equals_normalized_epsilon_at_rectified_layer(self, net_trace):
        # at a relu layer, channel sums vanish only for all-zero channels, so
        # the attributed total telescopes to the gradient*activation sum and
        # the residual reduces to |epsilon| / |score|
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        assert net.layers[layer].kind == "relu"
        grads = backward(net, trace, c)
        w = weights_xgrad_cam(trace, grads, layer)
        score = float(trace.scores.array[c])
        got = conservation_residual(trace, w, layer, score)
        eps = bias_accumulation(net, grads, layer)
        assert got == pytest.approx(abs(eps / score), rel=1e-9, abs=1e-12)


class TestPhi:
    def test_phi_is_sensitivity_plus_conservation_mass(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        grads = backward(net, trace, c)
        drops = per_channel_score_drops(net, trace, layer, c)
        w = weights_xgrad_cam(trace, grads, layer)
        got = evaluate_phi(net, trace, w, layer, c, drops)
        sums = trace.outputs[layer].array.sum(axis=(1, 2))
        attributed = w.array * sums
        score = float(trace.scores.array[c])
        want = np.abs(drops.array - attributed).sum() + abs(score - attributed.sum())
        assert got == pytest.approx(want, rel=1e-12)

    def test_zero_weights_phi_equals_total_drop_mass_plus_score(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        drops = per_channel_score_drops(net, trace, layer, c)
        w = Tensor(np.zeros(trace.outputs[layer].shape[0]))
        got = evaluate_phi(net, trace, w, layer, c, drops)
        score = float(trace.scores.array[c])
        assert got == pytest.approx(np.abs(drops.array).sum() + abs(score), rel=1e-12)


class TestReportsAndAggregation:
    def test_report_shares_precomputed_pieces(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        grads = backward(net, trace, c)
        drops = per_channel_score_drops(net, trace, layer, c)
        r1 = axiom_report(net, trace, CamMethod.XGRAD_CAM, layer, c, grads, drops)
        r2 = axiom_report(net, trace, CamMethod.XGRAD_CAM, layer, c)
        assert r1.sensitivity_residual == pytest.approx(r2.sensitivity_residual, rel=1e-12)
        assert r1.phi == pytest.approx(r2.phi, rel=1e-12)
        assert r1.per_channel_score_drop == r2.per_channel_score_drop

    def test_report_zeta_flag(self, net_trace):
        net, trace, c = net_trace
        layer = net.last_spatial_layer()
        r = axiom_report(net, trace, CamMethod.GRAD_CAM, layer, c, include_zeta=True)
        assert r.zeta_per_channel is not None
        assert len(r.zeta_per_channel) == trace.outputs[layer].shape[0]
        r2 = axiom_report(net, trace, CamMethod.GRAD_CAM, layer, c)
        assert r2.zeta_per_channel is None

    def test_mean_defined(self):
        mean, excluded = mean_defined([1.0, None, 3.0])
        assert mean == pytest.approx(2.0)
        assert excluded == 1
        mean, excluded = mean_defined([None, None])
        assert mean is None and excluded == 2

    def test_layer_diagnostics_structure(self, net_trace):
        net, trace, c = net_trace
        diags = layer_diagnostics(net, [trace, trace])
        assert [d.layer for d in diags] == net.spatial_layers()
        for d in diags:
            if d.epsilon_ratio_mean is not None:
                lo, mid, hi = d.epsilon_ratio_quartiles
                assert lo <= mid <= hi

    def test_layer_diagnostics_empty_corpus(self, net_trace):
        net, _, _ = net_trace
        with pytest.raises(ValueError):
            layer_diagnostics(net, [])

    def test_layer_diagnostics_zeta_ratio(self):
        rng = np.random.default_rng(740)
        net, image = random_image_net(rng)
        while not net.spatial_layers():
            net, image = random_image_net(rng)
        trace = forward(net, image)
        diags = layer_diagnostics(net, [trace], include_zeta=True)
        for d in diags:
            assert d.zeta_ratio_mean is None or d.zeta_ratio_mean >= 0.0
