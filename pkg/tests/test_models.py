import numpy as np
import pytest

from core import ops
from core.autodiff import backward
from core.curriculum import EnsembleState, activate_bit
from core.errors import ConfigError, DataError, ShapeError
from core.losses import LossWeights, fdp_loss
from core.models import (
    LayerDef,
    ModelDef,
    activation_maxima,
    build_model,
    calibrate_variant,
    clean_ce,
    cross_entropy,
    forward,
    forward_with_taps,
    predict,
)
from core.quant import QuantSpec, activation_key, weight_key
from core.tensor import GradientTape, const, leaf


@pytest.fixture
def images(rng):
    return rng.uniform(size=(4, 3, 32, 32))


@pytest.fixture
def state(rng, images):
    s = EnsembleState.initialize(build_model("tinycnn-s"), [32, 2], rng)
    activate_bit(s, 32, images)
    activate_bit(s, 2, images)
    return s


def _tiny_net():
    layers = (LayerDef("conv0", "conv", out_channels=1, kernel=1), LayerDef("gap", "gap"), LayerDef("fc", "dense"))
    model = ModelDef("fixture", (1, 2, 2), 2, layers, taps=("conv0",))
    params = {
        "conv0.weight": np.array([[[[0.6]]]]),
        "conv0.bias": np.zeros(1),
        "fc.weight": np.array([[0.3, -0.8]]),
        "fc.bias": np.array([0.1, 0.2]),
    }
    return model, params


class TestModelDef:
    def test_tinycnn_s_layout(self):
        model = build_model("tinycnn-s", num_classes=10)
        shapes = model.param_shapes()
        assert shapes["conv0.weight"] == (16, 3, 3, 3)
        assert shapes["conv1.weight"] == (32, 16, 3, 3)
        assert shapes["conv2.weight"] == (64, 32, 3, 3)
        assert shapes["fc.weight"] == (64, 10)
        assert model.taps == ("conv0", "conv1", "conv2")
        assert model.weight_names == ("conv0.weight", "conv1.weight", "conv2.weight", "fc.weight")
        assert model.activation_sites == ("conv0", "conv1", "conv2", "gap")

    def test_unknown_architecture(self):
        with pytest.raises(ConfigError):
            build_model("resnet-56")

    def test_duplicate_or_unknown_taps(self):
        with pytest.raises(ConfigError):
            build_model("tinycnn-s", taps=["conv0", "conv0"])
        with pytest.raises(ConfigError):
            build_model("tinycnn-s", taps=["fc"])

    def test_init_is_he_normal_with_zero_bias(self, rng):
        params = build_model("tinycnn-m").init_params(rng)
        assert not params["conv3.bias"].any()
        assert params["conv1.weight"].std() == pytest.approx(np.sqrt(2.0 / (32 * 9)), rel=0.1)


class TestForward:
    def test_tap_shapes(self, state, images):
        logits, taps = forward_with_taps(state.handle(2), images)
        assert logits.shape == (4, 4)
        assert {k: v.shape for k, v in taps.items()} == {
            "conv0": (4, 16, 16, 16),
            "conv1": (4, 32, 8, 8),
            "conv2": (4, 64, 8, 8),
        }

    def test_tap_count_does_not_depend_on_bits(self, state, images):
        assert len(forward_with_taps(state.handle(32), images)[1]) == len(forward_with_taps(state.handle(2), images)[1])

    def test_full_precision_variant_is_bit_identical_to_master(self, state, images):
        weights = {n: const(a) for n, a in state.weights.items()}
        master, _ = forward(state.model, weights, const(images), {})
        variant, _ = forward_with_taps(state.handle(32), images)
        np.testing.assert_array_equal(variant.value, master.value)

    def test_low_bit_variant_differs_from_master(self, state, images):
        a, _ = forward_with_taps(state.handle(32), images)
        b, _ = forward_with_taps(state.handle(2), images)
        assert not np.array_equal(a.value, b.value)

    def test_two_bit_forward_matches_hand_execution(self):
        model, params = _tiny_net()
        specs = {
            weight_key("conv0.weight"): QuantSpec(2, 0.5),
            weight_key("fc.weight"): QuantSpec(2, 0.5),
            activation_key("conv0"): QuantSpec(2, 1.0),
            activation_key("gap"): QuantSpec(2, 0.5),
        }
        x = const([[[[1.0, -1.0], [2.0, 3.0]]]])
        logits, taps = forward(model, {n: const(a) for n, a in params.items()}, x, specs)
        # w -> 0.5; relu(conv) = [.5, 0, 1, 1.5] -> [1, 0, 1, 1]; gap .75 -> .5; fc w -> [.5, -.5]
        np.testing.assert_array_equal(taps["conv0"].value, [[[[1.0, 0.0], [1.0, 1.0]]]])
        np.testing.assert_allclose(logits.value, [[0.35, -0.05]], atol=1e-15)

    def test_input_shape_mismatch(self, state):
        with pytest.raises(ShapeError):
            forward_with_taps(state.handle(32), np.zeros((2, 3, 28, 28)))

    def test_shared_weights_couple_all_variants(self, state, images):
        before = {b: forward_with_taps(state.handle(b), images)[0].value for b in (32, 2)}
        state.weights["fc.bias"] = state.weights["fc.bias"] + np.array([1.0, 0.0, 0.0, 0.0])
        after = {b: forward_with_taps(state.handle(b), images)[0].value for b in (32, 2)}
        for b in (32, 2):
            assert not np.array_equal(before[b], after[b])

    def test_taps_carry_gradients_to_weights(self, state, images):
        with GradientTape():
            params = {n: leaf(a) for n, a in state.weights.items()}
            features = {}
            for bits in (32, 2):
                _, taps = forward_with_taps(state.handle(bits), images[:2], params)
                features[(bits, "conv1")] = taps["conv1"]
            grads = backward(fdp_loss(features, LossWeights()), wrt=list(params.values()))
        assert np.abs(grads[params["conv0.weight"]]).sum() > 0


class TestCrossEntropy:
    def test_uniform_logits_over_ten_classes(self):
        ce = cross_entropy(const(np.zeros((3, 10))), np.array([0, 4, 9]))
        assert ce.item() == pytest.approx(np.log(10.0), abs=1e-12)

    def test_confident_correct_logits_tend_to_zero(self):
        ce = cross_entropy(const(np.eye(3) * 50.0), np.array([0, 1, 2]))
        assert ce.item() < 1e-12

    def test_matches_direct_formula(self, rng):
        logits = rng.normal(size=(5, 4))
        y = np.array([0, 3, 1, 1, 2])
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -log_probs[np.arange(5), y].mean()
        assert cross_entropy(const(logits), y).item() == pytest.approx(expected, rel=1e-12)

    def test_label_out_of_range(self, state, images):
        with pytest.raises(DataError):
            clean_ce(state.handle(32), images, np.array([0, 1, 2, 4]))


def test_predict_returns_one_label_per_image(state, images):
    labels = predict(state.handle(2), images, batch_size=3)
    assert labels.shape == (4,)
    assert labels.min() >= 0 and labels.max() < 4


def test_activation_maxima_cover_every_site(state, images):
    maxima = activation_maxima(state.model, state.weights, state.specs[2], images)
    assert set(maxima) == set(state.model.activation_sites)
    assert all(v >= 0.0 for v in maxima.values())


def test_activation_maxima_see_quantized_upstream_activations(state, images):
    sites = state.model.activation_sites
    weight_specs = {k: v for k, v in state.specs[2].items() if k.startswith("w:")}
    layered = activation_maxima(state.model, state.weights_for(2), weight_specs, images, bits=2)
    plain = activation_maxima(state.model, state.weights_for(2), weight_specs, images)
    assert layered[sites[0]] == plain[sites[0]]

    upstream = dict(weight_specs)
    upstream[activation_key(sites[0])] = QuantSpec.from_max(layered[sites[0]], 2)
    assert activation_maxima(state.model, state.weights_for(2), upstream, images)[sites[1]] == layered[sites[1]]


def test_calibrated_activation_scales_follow_layered_maxima(state, images):
    weight_specs = {k: v for k, v in state.specs[2].items() if k.startswith("w:")}
    layered = activation_maxima(state.model, state.weights_for(2), weight_specs, images, bits=2)
    specs = calibrate_variant(state.model, state.weights_for(2), 2, images)
    for site in state.model.activation_sites:
        assert specs[activation_key(site)] == QuantSpec.from_max(layered[site], 2)
