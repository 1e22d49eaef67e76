import numpy as np
import pytest

from core import ops
from core.autodiff import grad_as_node
from core.errors import LossError
from core.gradcheck import check_gradients
from core.losses import (
    LayerTapSet,
    LossWeights,
    PerceptualParams,
    bit_pairs,
    disalignment,
    fdp_loss,
    fdp_term_count,
    gpdp_loss,
    gpdp_pair_count,
    total_loss,
)
from core.perceptual import (
    HogParams,
    SoftBinarizeParams,
    channel_mean,
    cosine_similarity,
    soft_dice,
    soft_edges,
    soft_hog,
)
from core.tensor import GradientTape, const, leaf

# A near-hard threshold so identical continuous maps binarize to exact 0/1 edges.
SHARP = PerceptualParams(binarize=SoftBinarizeParams(85.0, 1e6))
SMOOTH = PerceptualParams(binarize=SoftBinarizeParams(85.0, 5.0))


def _pair_oracle(a, b, w, params):
    ea, eb = soft_edges(channel_mean(a), params.binarize), soft_edges(channel_mean(b), params.binarize)
    ha, hb = soft_hog(channel_mean(a), params.hog), soft_hog(channel_mean(b), params.hog)
    dice = soft_dice(ea, eb).value
    cos = cosine_similarity(ha, hb).value
    return float(np.mean(w.alpha * dice + w.beta * cos))


def test_loss_weight_defaults():
    w = LossWeights()
    assert (w.alpha, w.beta, w.lambda_fdp, w.lambda_gpdp) == (0.5, 1.0, 0.8, 0.5)


def test_negative_loss_weight_rejected():
    with pytest.raises(LossError):
        LossWeights(alpha=-0.1)


def test_bit_pairs_are_unordered_and_canonical():
    assert bit_pairs([2, 32, 4]) == [(32, 4), (32, 2), (4, 2)]
    assert bit_pairs([8]) == []


def test_term_counts():
    assert fdp_term_count(3, 2) == 6
    assert fdp_term_count(5, 3) == 30
    assert gpdp_pair_count(5) == 10
    assert gpdp_pair_count(1) == 0


class TestLayerTapSet:
    def test_duplicates_rejected(self):
        with pytest.raises(LossError):
            LayerTapSet(("conv0", "conv0"))

    def test_resolve_missing_tap(self):
        with GradientTape():
            taps = {"conv0": leaf(np.ones((1, 1, 8, 8)))}
            with pytest.raises(LossError):
                LayerTapSet(("conv0", "conv1")).resolve(taps)

    def test_resolve_keeps_order(self):
        with GradientTape():
            taps = {"b": leaf(np.ones(2)), "a": leaf(np.ones(2))}
            assert list(LayerTapSet(("a", "b")).resolve(taps)) == ["a", "b"]


class TestFdp:
    def test_identical_features_give_alpha_plus_beta(self, rng):
        x = rng.normal(size=(2, 3, 16, 16))
        with GradientTape():
            features = {(32, "conv0"): leaf(x), (8, "conv0"): leaf(x.copy())}
            value = fdp_loss(features, LossWeights(), SHARP).item()
        assert value == pytest.approx(1.5, abs=1e-2)

    def test_three_bits_two_taps_matches_brute_force(self, rng):
        w = LossWeights()
        arrays = {(b, t): rng.normal(size=(2, 2, 8, 8)) for b in (32, 4, 2) for t in ("conv0", "conv1")}
        with GradientTape():
            features = {k: leaf(v) for k, v in arrays.items()}
            value = fdp_loss(features, w).item()
            expected = 0.0
            terms = 0
            for tap in ("conv0", "conv1"):
                for bi, bj in bit_pairs([32, 4, 2]):
                    expected += _pair_oracle(features[(bi, tap)], features[(bj, tap)], w, PerceptualParams())
                    terms += 1
        assert terms == fdp_term_count(3, 2)
        assert value == pytest.approx(expected, rel=1e-10)

    def test_invariant_under_key_order(self, rng):
        arrays = {(b, "conv0"): rng.normal(size=(1, 2, 8, 8)) for b in (32, 4, 2)}
        with GradientTape():
            forward_order = fdp_loss({k: leaf(arrays[k]) for k in arrays}, LossWeights()).item()
            reverse_order = fdp_loss({k: leaf(arrays[k]) for k in reversed(list(arrays))}, LossWeights()).item()
        assert forward_order == reverse_order

    def test_symmetric_in_pair_assignment(self, rng):
        a, b = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(1, 2, 8, 8))
        with GradientTape():
            one = fdp_loss({(32, "t"): leaf(a), (4, "t"): leaf(b)}, LossWeights()).item()
            two = fdp_loss({(32, "t"): leaf(b), (4, "t"): leaf(a)}, LossWeights()).item()
        assert one == pytest.approx(two, rel=1e-12)

    def test_single_bit_rejected(self, rng):
        with GradientTape():
            with pytest.raises(LossError):
                fdp_loss({(32, "conv0"): leaf(rng.normal(size=(1, 1, 8, 8)))}, LossWeights())

    def test_missing_tap_for_one_bit_rejected(self, rng):
        with GradientTape():
            features = {
                (32, "conv0"): leaf(rng.normal(size=(1, 1, 8, 8))),
                (4, "conv0"): leaf(rng.normal(size=(1, 1, 8, 8))),
                (32, "conv1"): leaf(rng.normal(size=(1, 1, 8, 8))),
            }
            with pytest.raises(LossError):
                fdp_loss(features, LossWeights())

    def test_mismatched_shapes_rejected(self, rng):
        with GradientTape():
            with pytest.raises(LossError):
                disalignment({32: leaf(rng.normal(size=(1, 1, 8, 8))), 4: leaf(rng.normal(size=(1, 1, 12, 12)))},
                             LossWeights())

    def test_gradient_matches_finite_differences(self, rng):
        def build(a, b):
            return disalignment({32: a, 2: b}, LossWeights(), SMOOTH)

        errors = check_gradients(build, [rng.uniform(size=(1, 2, 8, 8)), rng.uniform(size=(1, 2, 8, 8))])
        assert max(errors) < 1e-4


class TestGpdp:
    def test_identical_gradients_give_alpha_plus_beta(self, rng):
        g = rng.normal(size=(2, 16, 16))
        with GradientTape():
            value = gpdp_loss({32: leaf(g), 4: leaf(g.copy())}, LossWeights(), SHARP).item()
        assert value == pytest.approx(1.5, abs=1e-2)

    def test_negated_gradient_scores_like_identical(self, rng):
        g = rng.normal(size=(1, 16, 16))
        with GradientTape():
            value = gpdp_loss({32: leaf(g), 4: leaf(-g)}, LossWeights(), SHARP).item()
        assert value == pytest.approx(1.5, abs=1e-2)

    def test_input_gradients_from_the_tape(self, rng):
        x0 = rng.uniform(size=(1, 1, 8, 8))
        w32, w4 = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3))
        with GradientTape():
            x = leaf(x0)
            grads = {}
            for bits, w in ((32, w32), (4, w4)):
                out = ops.reduce_sum(ops.sigmoid(ops.conv2d(x, const(w), padding=1)))
                grads[bits] = grad_as_node(out, x)
            loss = gpdp_loss(grads, LossWeights())
            assert loss.requires_grad
        assert np.isfinite(loss.item())

    def test_requires_active_tape(self, rng):
        with GradientTape():
            a, b = leaf(rng.normal(size=(1, 8, 8))), leaf(rng.normal(size=(1, 8, 8)))
        with pytest.raises(LossError):
            gpdp_loss({32: a, 4: b}, LossWeights())

    def test_off_tape_gradient_rejected(self, rng):
        a, b = leaf(rng.normal(size=(1, 8, 8))), leaf(rng.normal(size=(1, 8, 8)))
        with pytest.raises(LossError):
            gpdp_loss({32: a, 4: b}, LossWeights())


class TestTotalLoss:
    def test_weighted_sum(self):
        w = LossWeights()
        total = total_loss({32: const(1.0), 4: const(1.0)}, const(3.0), const(2.0), w)
        assert total.item() == pytest.approx(2.0 + 0.8 * 3.0 + 0.5 * 2.0)
        assert total.item() == pytest.approx(5.4)

    def test_zero_lambdas_return_clean_exactly(self):
        w = LossWeights(lambda_fdp=0.0, lambda_gpdp=0.0)
        clean = const(0.123456789)
        assert total_loss({32: clean}, const(7.0), const(9.0), w) is clean

    def test_missing_penalties_count_as_zero(self):
        total = total_loss({32: const(1.5), 2: const(0.5)}, None, None, LossWeights())
        assert total.item() == 2.0

    def test_requires_a_clean_term(self):
        with pytest.raises(LossError):
            total_loss({}, const(1.0), const(1.0), LossWeights())
