import math

import numpy as np
from django.test import SimpleTestCase

from apps.localization.exceptions import InvalidInputError, ShapeError
from apps.localization.services.geometry import (
    EdgeDistances,
    box_iou_matrix,
    distances_to_target,
)
from apps.localization.services.refinement import (
    EdgeDistributions,
    GFocalSpec,
    apply_residual,
    decode_layer,
    decode_offsets,
    gfocal_decode,
    initial_layer,
    probabilities,
    refine_edges,
    run_pipeline,
)
from apps.localization.services.weighting import bracket_array, build_spec


def one_hot_logits(k, n_bins, index, edges=(0, 1, 2, 3)):
    logits = np.zeros((k, 4, n_bins + 1))
    for edge in edges:
        logits[:, edge, index] = 1000.0
    return EdgeDistributions(logits)


class ProbabilityTests(SimpleTestCase):

    def test_zero_logits_are_uniform(self):
        probs = probabilities(np.zeros((2, 4, 33)))
        np.testing.assert_allclose(probs, 1 / 33, rtol=0, atol=1e-15)

    def test_large_logit_is_one_hot_without_overflow(self):
        logits = np.zeros(33)
        logits[5] = 1000.0
        probs = probabilities(logits)
        self.assertTrue(np.all(np.isfinite(probs)))
        self.assertAlmostEqual(probs[5], 1.0, places=12)

    def test_two_bin_example(self):
        np.testing.assert_allclose(probabilities([0.0, math.log(2)]), [1 / 3, 2 / 3], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        probs = probabilities(rng.normal(0, 5, size=(6, 4, 33)))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_non_finite_logits(self):
        with self.assertRaises(InvalidInputError):
            probabilities([0.0, float('nan')])


class ResidualTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(2)
        self.x = EdgeDistributions(rng.normal(size=(3, 4, 33)))

    def test_zero_delta_is_identity(self):
        out = apply_residual(self.x, EdgeDistributions.zeros(3, 32))
        np.testing.assert_array_equal(out.logits, self.x.logits)

    def test_zero_prior(self):
        out = apply_residual(EdgeDistributions.zeros(3, 32), self.x)
        np.testing.assert_array_equal(out.logits, self.x.logits)

    def test_inverse_delta_gives_uniform(self):
        out = apply_residual(self.x, EdgeDistributions(-self.x.logits))
        np.testing.assert_allclose(out.probabilities(), 1 / 33, atol=1e-15)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            apply_residual(self.x, EdgeDistributions.zeros(2, 32))
        with self.assertRaises(ShapeError):
            EdgeDistributions(np.zeros((3, 33)))


class DecodeTests(SimpleTestCase):

    def setUp(self):
        self.spec = build_spec(0.5, 0.25, 32)

    def test_uniform_distribution_has_zero_offset(self):
        offsets = decode_offsets(EdgeDistributions.zeros(2, 32), self.spec)
        np.testing.assert_allclose(offsets, 0.0, atol=1e-15)

    def test_one_hot_at_last_bin(self):
        offsets = decode_offsets(one_hot_logits(1, 32, 32), self.spec)
        np.testing.assert_allclose(offsets, 1.0, atol=1e-12)

    def test_equal_mass_on_the_outer_bins(self):
        logits = np.full((1, 4, 33), -1000.0)
        logits[..., 0] = 0.0
        logits[..., 32] = 0.0
        offsets = decode_offsets(EdgeDistributions(logits), self.spec)
        np.testing.assert_allclose(offsets, 0.0, atol=1e-15)

    def test_bin_count_mismatch(self):
        with self.assertRaises(ShapeError):
            decode_offsets(EdgeDistributions.zeros(1, 16), self.spec)

    def test_offsets_stay_within_bounds(self):
        rng = np.random.default_rng(6)
        offsets = decode_offsets(EdgeDistributions(rng.normal(0, 10, size=(1000, 4, 33))), self.spec)
        self.assertTrue(np.all(np.abs(offsets) <= 2 * self.spec.a + 1e-12))


class RefineEdgesTests(SimpleTestCase):

    def setUp(self):
        self.spec = build_spec(0.5, 0.25, 32)
        self.d0 = EdgeDistances(t=10, b=10, l=10, r=10, cx=3, cy=4)

    def test_uniform_distributions_leave_edges_unchanged(self):
        d = refine_edges(self.d0, 20, 20, EdgeDistributions.zeros(1, 32), self.spec)
        np.testing.assert_allclose(d.as_array(), [10, 10, 10, 10], atol=1e-12)
        self.assertEqual((d.cx, d.cy), (3, 4))

    def test_one_hot_last_bin_on_every_edge(self):
        d = refine_edges(self.d0, 20, 20, one_hot_logits(1, 32, 32), self.spec)
        np.testing.assert_allclose(d.as_array(), [30, 30, 30, 30], atol=1e-10)

    def test_per_edge_scaling(self):
        d = refine_edges(self.d0, 40, 20, one_hot_logits(1, 32, 32, edges=(2,)), self.spec)
        np.testing.assert_allclose(d.as_array(), [10, 10, 50, 10], atol=1e-10)

    def test_non_positive_reference_size(self):
        with self.assertRaises(InvalidInputError):
            refine_edges(self.d0, 0, 20, EdgeDistributions.zeros(1, 32), self.spec)
        with self.assertRaises(InvalidInputError):
            refine_edges(self.d0, 20, -1, EdgeDistributions.zeros(1, 32), self.spec)

    def test_refined_edges_are_bounded(self):
        rng = np.random.default_rng(9)
        d0 = rng.uniform(1, 50, size=(200, 4))
        w = rng.uniform(1, 40, size=200)
        h = rng.uniform(1, 40, size=200)
        refined = refine_edges(d0, w, h, EdgeDistributions(rng.normal(0, 8, size=(200, 4, 33))), self.spec)
        scale = np.stack([h, h, w, w], axis=-1)
        self.assertTrue(np.all(np.abs(refined - d0) <= 2 * self.spec.a * scale + 1e-9))


class PipelineTests(SimpleTestCase):

    def setUp(self):
        self.spec = build_spec(0.5, 0.25, 32)
        self.reference = np.array([[50.0, 50.0, 20.0, 20.0], [20.0, 30.0, 10.0, 16.0]])

    def test_layer_one_boxes_match_recomputation(self):
        rng = np.random.default_rng(12)
        state = initial_layer(self.reference, EdgeDistributions(rng.normal(size=(2, 4, 33))), self.spec)
        _, boxes = decode_layer(state.reference_boxes, state.distributions, self.spec)
        np.testing.assert_allclose(boxes, state.boxes, rtol=0, atol=1e-10)
        np.testing.assert_array_equal(state.confidences, [1.0, 1.0])

    def test_zero_deltas_keep_layers_bit_identical(self):
        rng = np.random.default_rng(13)
        state = initial_layer(self.reference, EdgeDistributions(rng.normal(size=(2, 4, 33))), self.spec)
        layers = run_pipeline(state, [EdgeDistributions.zeros(2, 32)] * 3, self.spec)
        self.assertEqual([s.layer_index for s in layers], [1, 2, 3, 4])
        for layer in layers[1:]:
            np.testing.assert_array_equal(layer.boxes, layers[0].boxes)

    def test_chained_logits_equal_the_direct_sum(self):
        rng = np.random.default_rng(14)
        first = EdgeDistributions(rng.normal(size=(2, 4, 33)))
        deltas = [EdgeDistributions(rng.normal(size=(2, 4, 33))) for _ in range(4)]
        layers = run_pipeline(initial_layer(self.reference, first, self.spec), deltas, self.spec)
        direct = first.logits + sum(d.logits for d in deltas)
        np.testing.assert_allclose(layers[-1].distributions.logits, direct, rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            layers[1].distributions.probabilities(), probabilities(first.logits + deltas[0].logits), atol=1e-15,
        )

    def test_delta_toward_target_improves_iou(self):
        reference = self.reference[:1]
        target = np.array([[52.0, 49.0, 24.0, 18.0]])
        d0 = np.array([[10.0, 10.0, 10.0, 10.0]])
        scale = np.array([[20.0, 20.0, 20.0, 20.0]])
        phi = (distances_to_target(reference[:, :2], target) - d0) / scale
        n_left, w_left, w_right = bracket_array(self.spec, phi)

        delta = np.full((1, 4, 33), -40.0)
        for edge in range(4):
            n = n_left[0, edge]
            delta[0, edge, n] = math.log(max(w_left[0, edge], 1e-18))
            delta[0, edge, n + 1] = math.log(max(w_right[0, edge], 1e-18))

        layers = run_pipeline(
            initial_layer(reference, EdgeDistributions.zeros(1, 32), self.spec),
            [EdgeDistributions(delta)],
            self.spec,
        )
        first_iou = box_iou_matrix(layers[0].boxes, target)[0, 0]
        second_iou = box_iou_matrix(layers[1].boxes, target)[0, 0]
        self.assertGreaterEqual(second_iou, first_iou)
        self.assertAlmostEqual(second_iou, 1.0, places=6)

    def test_pipeline_must_start_at_layer_one(self):
        state = initial_layer(self.reference, EdgeDistributions.zeros(2, 32), self.spec)
        layers = run_pipeline(state, [EdgeDistributions.zeros(2, 32)], self.spec)
        with self.assertRaises(InvalidInputError):
            run_pipeline(layers[1], [], self.spec)

    def test_initial_layer_validation(self):
        with self.assertRaises(ShapeError):
            initial_layer(self.reference, EdgeDistributions.zeros(3, 32), self.spec)
        with self.assertRaises(ShapeError):
            initial_layer(self.reference, EdgeDistributions.zeros(2, 32), self.spec, confidences=[0.5])


class GFocalTests(SimpleTestCase):

    def setUp(self):
        self.gspec = GFocalSpec(d_max=16, n_bins=32)

    def test_uniform_distribution(self):
        self.assertAlmostEqual(gfocal_decode(np.full(33, 1 / 33), self.gspec), 8.0, places=12)

    def test_one_hot_extremes(self):
        self.assertEqual(gfocal_decode(np.eye(33)[0], self.gspec), 0.0)
        self.assertEqual(gfocal_decode(np.eye(33)[32], self.gspec), 16.0)

    def test_unnormalized_input(self):
        with self.assertRaises(InvalidInputError):
            gfocal_decode(np.full(33, 0.5), self.gspec)
        with self.assertRaises(InvalidInputError):
            GFocalSpec(d_max=0, n_bins=32)

    def test_weighting_grid_quantizes_small_offsets_more_finely(self):
        knots = build_spec(0.5, 0.25, 32).knots
        uniform = np.linspace(-1.0, 1.0, 33)
        phi = np.linspace(-0.02, 0.02, 401)
        w_error = np.min(np.abs(phi[:, None] - knots[None, :]), axis=1)
        uniform_error = np.min(np.abs(phi[:, None] - uniform[None, :]), axis=1)
        self.assertLess(w_error.max(), uniform_error.max())
        self.assertTrue(np.all(w_error <= uniform_error + 1e-15))
