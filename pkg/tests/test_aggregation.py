import numpy as np
import pytest

from vladpool import (
    EPS_NORM,
    FeatureMap,
    average_pool,
    average_pool_backward,
    build_codebook,
    flatten_l2_normalize,
    intra_normalize,
    max_pool,
    max_pool_backward,
    soft_assign,
    vlad_backward,
    vlad_descriptor,
    vlad_forward,
)
from vladpool.codebook import Codebook
from vladpool.errors import DimensionMismatchError, NonFiniteInputError

from oracles import (
    assert_gradients_close,
    central_difference,
    hard_vlad_reference,
    random_instance,
    soft_assign_reference,
    vlad_forward_reference,
)


class TestSoftAssign:
    def test_single_word_is_certain(self):
        cb = build_codebook(np.array([[3.0, -1.0]]), alpha=7.0)
        assert soft_assign(np.array([100.0, 5.0]), cb).tolist() == [1.0]

    def test_symmetric_distances_split_evenly(self):
        cb = build_codebook(np.array([[1.0, 0.0], [0.0, 1.0]]), alpha=123.0)
        np.testing.assert_allclose(
            soft_assign(np.zeros(2), cb), [0.5, 0.5], rtol=0, atol=1e-15
        )

    def test_closed_form_two_anchors(self):
        # p = (1/(1+e^-3), e^-3/(1+e^-3)) for x=0, anchors at 1 and 2, alpha=1
        cb = build_codebook(np.array([[1.0, 0.0], [2.0, 0.0]]), alpha=1.0)
        probs = soft_assign(np.zeros(2), cb)
        np.testing.assert_allclose(
            probs, [0.9525741268224334, 0.04742587317756679], rtol=0, atol=1e-14
        )

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            _, cb = random_instance(rng, k=4, d=3)
            x = rng.standard_normal(3)
            np.testing.assert_allclose(
                soft_assign(x, cb),
                soft_assign_reference(x, cb.assign_anchors, cb.alpha),
                rtol=0,
                atol=1e-14,
            )

    def test_rows_form_a_simplex(self):
        rng = np.random.default_rng(8)
        for alpha in (0.5, 10.0, 1000.0):
            features, cb = random_instance(rng, t=4, n=5, d=6, k=5, alpha=alpha)
            probs = soft_assign(features.descriptors, cb)
            assert np.all(probs >= 0.0) and np.all(probs <= 1.0)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_huge_alpha_does_not_overflow(self):
        cb = build_codebook(np.array([[0.0, 0.0], [50.0, 50.0]]), alpha=1000.0)
        probs = soft_assign(np.array([0.1, -0.2]), cb)
        assert np.all(np.isfinite(probs))
        assert probs[0] == pytest.approx(1.0, abs=1e-12)

    def test_dimension_mismatch(self):
        cb = build_codebook(np.eye(2), alpha=1.0)
        with pytest.raises(DimensionMismatchError):
            soft_assign(np.zeros(3), cb)

    def test_non_finite_input(self):
        cb = build_codebook(np.eye(2), alpha=1.0)
        with pytest.raises(NonFiniteInputError):
            soft_assign(np.array([np.nan, 0.0]), cb)


class TestForward:
    def test_hard_limit_single_descriptor(self):
        # alpha huge, x nearest the second anchor: column 2 gets the full
        # residual, leakage into the other columns stays below 1e-12
        anchors = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
        cb = build_codebook(anchors, alpha=1e6)
        x = np.array([2.9, 0.2])
        out = vlad_forward(FeatureMap(x.reshape(1, 1, 2)), cb)
        np.testing.assert_allclose(out[:, 1], x - anchors[1], rtol=0, atol=1e-12)
        assert np.abs(out[:, [0, 2]]).max() < 1e-12

    def test_zero_residuals_at_the_anchor(self):
        anchor = np.array([[2.0, -1.0, 0.5]])
        cb = build_codebook(anchor, alpha=3.0)
        data = np.tile(anchor[0], (4, 2, 1))
        out = vlad_forward(FeatureMap(data), cb)
        assert np.abs(out).max() == 0.0

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(42)
        features, cb = random_instance(rng, t=2, n=3, d=4, k=2, alpha=10.0)
        expected = vlad_forward_reference(features, cb)
        np.testing.assert_allclose(vlad_forward(features, cb), expected, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        cb = build_codebook(np.eye(3), alpha=1.0)
        with pytest.raises(DimensionMismatchError):
            vlad_forward(FeatureMap(np.zeros((1, 1, 2))), cb)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        features, cb = random_instance(rng, t=4, n=5, d=3, k=3)
        base = vlad_forward(features, cb)
        shuffled = features.data[rng.permutation(4)][:, rng.permutation(5)]
        np.testing.assert_allclose(
            vlad_forward(FeatureMap(shuffled), cb), base, rtol=0, atol=1e-12
        )

    def test_duplication_doubles_raw_and_keeps_descriptor(self):
        rng = np.random.default_rng(4)
        features, cb = random_instance(rng, t=3, n=2, d=4, k=3)
        doubled = FeatureMap(np.concatenate([features.data, features.data], axis=0))
        np.testing.assert_allclose(
            vlad_forward(doubled, cb), 2.0 * vlad_forward(features, cb), rtol=0, atol=1e-12
        )
        np.testing.assert_allclose(
            vlad_descriptor(doubled, cb), vlad_descriptor(features, cb), rtol=0, atol=1e-12
        )

    def test_hard_assignment_limit_matches_classic_vlad(self):
        rng = np.random.default_rng(5)
        anchors = 10.0 * rng.standard_normal((4, 6))  # separation >> noise scale
        cb = build_codebook(anchors, alpha=1e6)
        picks = rng.integers(0, 4, size=12)
        data = anchors[picks] + 0.3 * rng.standard_normal((12, 6))
        features = FeatureMap(data.reshape(3, 4, 6))
        np.testing.assert_allclose(
            vlad_forward(features, cb), hard_vlad_reference(features, cb), rtol=0, atol=1e-9
        )


class TestNormalization:
    def test_triangle_column(self):
        out = intra_normalize(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(out[:, 0], [0.6, 0.8], rtol=0, atol=1e-15)

    def test_zero_column_stays_zero(self):
        vlad = np.array([[3.0, 0.0], [4.0, 0.0]])
        out = intra_normalize(vlad)
        assert out[:, 1].tolist() == [0.0, 0.0]

    def test_column_norms_are_unit_or_zero(self):
        rng = np.random.default_rng(11)
        vlad = rng.standard_normal((4, 3))
        vlad[:, 1] = 0.0
        norms = np.linalg.norm(intra_normalize(vlad), axis=0)
        for norm in norms:
            assert norm == 0.0 or abs(norm - 1.0) <= 1e-12

    def test_flatten_single_column(self):
        out = flatten_l2_normalize(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(out, [0.0, 1.0], rtol=0, atol=1e-15)

    def test_flatten_layout_blocks_by_cell(self):
        vlad = np.array([[1.0, 3.0], [2.0, 4.0]])  # columns (1,2) and (3,4)
        out = flatten_l2_normalize(vlad)
        np.testing.assert_allclose(out * np.linalg.norm([1, 2, 3, 4]), [1, 2, 3, 4])

    def test_flatten_zero_input(self):
        assert flatten_l2_normalize(np.zeros((3, 2))).tolist() == [0.0] * 6

    def test_flatten_norm_is_one(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            out = flatten_l2_normalize(rng.standard_normal((5, 4)))
            assert abs(np.linalg.norm(out) - 1.0) <= 1e-9

    def test_full_descriptor_norm(self):
        rng = np.random.default_rng(13)
        features, cb = random_instance(rng, t=3, n=3, d=4, k=3)
        assert abs(np.linalg.norm(vlad_descriptor(features, cb)) - 1.0) <= 1e-9


def upstream_loss(weights):
    """Scalar probe loss for gradient checks: <weights, descriptor>."""

    def loss(features, codebook):
        return float(weights @ vlad_descriptor(features, codebook))

    return loss


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(20)
        features, cb = random_instance(rng)
        grads = vlad_backward(features, cb, np.zeros(cb.num_words * cb.dim))
        assert np.abs(grads.features).max() == 0.0
        assert np.abs(grads.residual_anchors).max() == 0.0
        assert np.abs(grads.assign_anchors).max() == 0.0

    def test_single_word_structure(self):
        # K=1: assignment is constant, so each descriptor sees the same linear
        # map of the upstream gradient and the residual anchor sees -T*N of it
        rng = np.random.default_rng(21)
        features = FeatureMap(rng.standard_normal((3, 4, 5)))
        cb = build_codebook(rng.standard_normal((1, 5)), alpha=2.0)
        upstream = rng.standard_normal(5)
        grads = vlad_backward(features, cb, upstream)
        per_descriptor = grads.features.reshape(-1, 5)
        for row in per_descriptor[1:]:
            np.testing.assert_allclose(row, per_descriptor[0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            grads.residual_anchors[0], -12.0 * per_descriptor[0], rtol=1e-12, atol=1e-12
        )
        assert np.abs(grads.assign_anchors).max() == 0.0

    def test_upstream_shape_checked(self):
        rng = np.random.default_rng(22)
        features, cb = random_instance(rng)
        with pytest.raises(DimensionMismatchError):
            vlad_backward(features, cb, np.zeros(cb.num_words * cb.dim + 1))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        features, cb = random_instance(rng, t=3, n=4, d=5, k=3, alpha=5.0)
        upstream = rng.standard_normal(cb.num_words * cb.dim)
        loss = upstream_loss(upstream)
        grads = vlad_backward(features, cb, upstream)

        fd_features = central_difference(
            lambda x: loss(FeatureMap(x), cb), features.data
        )
        assert_gradients_close(grads.features, fd_features, label="features")

        fd_residual = central_difference(
            lambda c: loss(features, Codebook(c, cb.assign_anchors, cb.alpha)),
            cb.residual_anchors,
        )
        assert_gradients_close(grads.residual_anchors, fd_residual, label="residual")

        fd_assign = central_difference(
            lambda a: loss(features, Codebook(cb.residual_anchors, a, cb.alpha)),
            cb.assign_anchors,
        )
        assert_gradients_close(grads.assign_anchors, fd_assign, label="assign")

    def test_decoupled_anchor_gradients_differ(self):
        rng = np.random.default_rng(24)
        features, cb = random_instance(rng, alpha=3.0)
        upstream = rng.standard_normal(cb.num_words * cb.dim)
        grads = vlad_backward(features, cb, upstream)
        assert not np.allclose(grads.residual_anchors, grads.assign_anchors)


class TestPoolingBaselines:
    def test_average_of_identical_descriptors(self):
        u = np.array([3.0, 4.0])
        features = FeatureMap(np.tile(u, (5, 2, 1)))
        np.testing.assert_allclose(average_pool(features), u / 5.0, rtol=0, atol=1e-15)

    def test_average_of_two_unit_vectors(self):
        features = FeatureMap(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
        expected = np.array([0.5, 0.5]) / np.linalg.norm([0.5, 0.5])
        np.testing.assert_allclose(average_pool(features), expected, rtol=0, atol=1e-15)

    def test_average_equals_single_cell_vlad_at_origin(self):
        rng = np.random.default_rng(30)
        features = FeatureMap(rng.standard_normal((3, 4, 5)))
        cb = build_codebook(np.zeros((1, 5)), alpha=1.0)
        raw = vlad_forward(features, cb)[:, 0] / 12.0
        np.testing.assert_allclose(raw, features.descriptors.mean(axis=0), rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            average_pool(features), raw / np.linalg.norm(raw), rtol=0, atol=1e-12
        )

    def test_max_single_descriptor(self):
        x = np.array([1.0, -2.0, 2.0])
        features = FeatureMap(x.reshape(1, 1, 3))
        np.testing.assert_allclose(max_pool(features), x / 3.0, rtol=0, atol=1e-15)

    def test_max_of_two_unit_vectors(self):
        features = FeatureMap(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
        np.testing.assert_allclose(
            max_pool(features), np.ones(2) / np.sqrt(2.0), rtol=0, atol=1e-15
        )

    def test_max_matches_loop_oracle(self):
        rng = np.random.default_rng(31)
        features = FeatureMap(rng.standard_normal((4, 3, 6)))
        best = features.descriptors[0].copy()
        for row in features.descriptors[1:]:
            best = np.maximum(best, row)
        np.testing.assert_allclose(max_pool(features), best / np.linalg.norm(best))

    def test_max_backward_routes_to_first_argmax(self):
        data = np.array([[[1.0, 5.0]], [[1.0, 2.0]]])  # dim 0 ties at 1.0
        features = FeatureMap(data)
        grads = max_pool_backward(features, np.array([1.0, 0.0])).reshape(-1, 2)
        # gradient lands only on rows 0 (first tie winner for dim 0)
        assert np.abs(grads[1]).max() == 0.0

    def test_pool_backwards_match_finite_differences(self):
        rng = np.random.default_rng(32)
        features = FeatureMap(rng.standard_normal((2, 3, 4)))
        upstream = rng.standard_normal(4)

        fd_avg = central_difference(
            lambda x: float(upstream @ average_pool(FeatureMap(x))), features.data
        )
        assert_gradients_close(
            average_pool_backward(features, upstream), fd_avg, label="avg"
        )

        fd_max = central_difference(
            lambda x: float(upstream @ max_pool(FeatureMap(x))), features.data
        )
        assert_gradients_close(max_pool_backward(features, upstream), fd_max, label="max")

    def test_degenerate_all_zero_input(self):
        features = FeatureMap(np.zeros((2, 2, 3)))
        assert average_pool(features).tolist() == [0.0, 0.0, 0.0]
        assert max_pool(features).tolist() == [0.0, 0.0, 0.0]
        cb = build_codebook(np.zeros((2, 3)), alpha=1.0)
        assert vlad_descriptor(features, cb).tolist() == [0.0] * 6
        assert EPS_NORM == 1e-12
