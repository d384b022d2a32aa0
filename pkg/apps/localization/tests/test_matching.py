import itertools
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.localization.exceptions import (
    BinIndexError,
    CostMatrixParseError,
    InvalidInputError,
)
from apps.localization.services.geometry import box_edge_distances, xyxy_to_cxcywh
from apps.localization.services.matching import (
    Assignment,
    CostMatrix,
    detr_cost,
    hungarian,
    select_targets,
    union_set,
)
from apps.localization.services.refinement import EdgeDistributions, LayerState


def brute_force_cost(entries):
    k, g = entries.shape
    if k > g:
        return brute_force_cost(entries.T)
    return min(
        sum(entries[row, col] for row, col in zip(range(k), cols))
        for cols in itertools.permutations(range(g), k)
    )


def make_layer(boxes_xyxy, confidences):
    boxes = xyxy_to_cxcywh(np.asarray(boxes_xyxy, dtype=np.float64))
    return LayerState(
        layer_index=1,
        reference_boxes=boxes,
        edge_distances=box_edge_distances(boxes),
        boxes=boxes,
        distributions=EdgeDistributions.zeros(boxes.shape[0], 8),
        confidences=np.asarray(confidences, dtype=np.float64),
    )


class HungarianTests(SimpleTestCase):

    def test_two_by_two(self):
        result = hungarian(np.array([[1, 2], [2, 1]]))
        self.assertEqual(result.pairs, ((0, 0), (1, 1)))
        self.assertEqual(result.total_cost, 2.0)

    def test_three_by_three(self):
        result = hungarian(np.array([[4, 1, 3], [2, 0, 5], [3, 2, 2]]))
        self.assertEqual(result.pairs, ((0, 1), (1, 0), (2, 2)))
        self.assertEqual(result.total_cost, 5.0)

    def test_single_cell(self):
        result = hungarian(CostMatrix([[7.0]]))
        self.assertEqual(result.to_dict(), {'pairs': [[0, 0]], 'total_cost': 7.0})

    def test_empty_matrices(self):
        self.assertEqual(len(hungarian(np.zeros((3, 0)))), 0)
        self.assertEqual(hungarian(np.zeros((0, 0))).total_cost, 0.0)

    def test_non_finite_entries(self):
        with self.assertRaises(InvalidInputError):
            hungarian(np.array([[1.0, np.inf]]))

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            k, g = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            if trial % 2:
                entries = rng.integers(0, 10, size=(k, g)).astype(np.float64)
                self.assertEqual(hungarian(entries).total_cost, brute_force_cost(entries))
            else:
                entries = rng.uniform(-5, 5, size=(k, g))
                self.assertAlmostEqual(hungarian(entries).total_cost, brute_force_cost(entries), delta=1e-9)

    def test_rectangular_assignment_size_and_injectivity(self):
        rng = np.random.default_rng(1)
        for shape in ((2, 5), (6, 3), (4, 4)):
            result = hungarian(rng.uniform(size=shape))
            self.assertEqual(len(result), min(shape))
            preds, gts = zip(*result.pairs)
            self.assertEqual(len(set(preds)), len(preds))
            self.assertEqual(len(set(gts)), len(gts))

    def test_row_shift_keeps_the_pairing(self):
        rng = np.random.default_rng(2)
        entries = rng.uniform(size=(5, 5))
        shifted = entries.copy()
        shifted[3] += 10.0
        base, moved = hungarian(entries), hungarian(shifted)
        self.assertEqual(base.pairs, moved.pairs)
        self.assertAlmostEqual(moved.total_cost, base.total_cost + 10.0, places=9)


def lowest_index_optimum(entries):
    k, g = entries.shape
    if k <= g:
        candidates = [tuple(zip(range(k), cols)) for cols in itertools.permutations(range(g), k)]
    else:
        candidates = [tuple(sorted(zip(rows, range(g)))) for rows in itertools.permutations(range(k), g)]
    costs = [sum(entries[r, c] for r, c in pairs) for pairs in candidates]
    best = min(costs)
    optima = [pairs for pairs, cost in zip(candidates, costs) if cost == best]
    return min(optima, key=lambda pairs: (tuple(r for r, _ in pairs), tuple(c for _, c in pairs)))


class HungarianTieBreakTests(SimpleTestCase):

    def test_lowest_predictions_are_matched_first(self):
        result = hungarian(np.array([[0, 0], [0, 1], [2, 0]]))
        self.assertEqual(result.pairs, ((0, 1), (1, 0)))
        self.assertEqual(result.total_cost, 0.0)

    def test_constant_matrices_pair_along_the_diagonal(self):
        self.assertEqual(hungarian(np.zeros((2, 2))).pairs, ((0, 0), (1, 1)))
        self.assertEqual(hungarian(np.ones((3, 2))).pairs, ((0, 0), (1, 1)))
        self.assertEqual(hungarian(np.ones((2, 3))).pairs, ((0, 0), (1, 1)))

    def test_each_prediction_takes_the_lowest_optimal_gt(self):
        result = hungarian(np.array([[1, 1, 5], [1, 1, 5]]))
        self.assertEqual(result.pairs, ((0, 0), (1, 1)))

    def test_matches_exhaustive_lowest_index_optimum(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            k, g = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            entries = rng.integers(0, 3, size=(k, g)).astype(np.float64)
            expected = lowest_index_optimum(entries)
            result = hungarian(entries)
            self.assertEqual(result.pairs, expected, msg=str(entries.tolist()))
            self.assertEqual(result.total_cost, sum(entries[r, c] for r, c in expected))


class CostMatrixCsvTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _write(self, text):
        path = Path(self.tmp.name) / 'cost.csv'
        path.write_text(text)
        return path

    def test_parses_numeric_rows(self):
        cost = CostMatrix.from_csv(self._write('4,1,3\n2,0,5\n3,2,2\n'))
        self.assertEqual(cost.shape, (3, 3))
        self.assertEqual(hungarian(cost).total_cost, 5.0)

    def test_rejects_bad_content(self):
        for text in ('1,x\n', '1,2\n3\n', '1\n2,3\n', ''):
            with self.assertRaises(CostMatrixParseError, msg=repr(text)):
                CostMatrix.from_csv(self._write(text))

    def test_missing_file(self):
        with self.assertRaises(OSError):
            CostMatrix.from_csv(Path(self.tmp.name) / 'absent.csv')


class DetrCostTests(SimpleTestCase):

    def test_identical_box_with_full_confidence(self):
        layer = make_layer([[0, 0, 1, 1]], [1.0])
        cost = detr_cost(layer, xyxy_to_cxcywh(np.array([[0.0, 0.0, 1.0, 1.0]])), scene_size=3)
        self.assertAlmostEqual(cost.entries[0, 0], 0.0, places=12)

    def test_zero_confidence_costs_the_class_term(self):
        layer = make_layer([[0, 0, 1, 1]], [0.0])
        cost = detr_cost(layer, xyxy_to_cxcywh(np.array([[0.0, 0.0, 1.0, 1.0]])), scene_size=3)
        self.assertAlmostEqual(cost.entries[0, 0], 1.0, places=12)

    def test_disjoint_boxes(self):
        layer = make_layer([[0, 0, 1, 1]], [1.0])
        cost = detr_cost(layer, xyxy_to_cxcywh(np.array([[2.0, 2.0, 3.0, 3.0]])), scene_size=3)
        self.assertAlmostEqual(cost.entries[0, 0], 47 / 9, places=12)

    def test_per_class_confidences(self):
        layer = make_layer([[0, 0, 1, 1]], [[0.25, 0.75]])
        gts = xyxy_to_cxcywh(np.array([[0.0, 0.0, 1.0, 1.0]] * 2))
        cost = detr_cost(layer, gts, scene_size=3, gt_labels=[1, 0])
        np.testing.assert_allclose(cost.entries, [[0.25, 0.75]], atol=1e-12)

    def test_empty_ground_truth(self):
        layer = make_layer([[0, 0, 1, 1], [1, 1, 2, 2]], [1.0, 0.5])
        cost = detr_cost(layer, np.zeros((0, 4)), scene_size=3)
        self.assertEqual(cost.shape, (2, 0))
        self.assertEqual(len(hungarian(cost)), 0)

    def test_invalid_scene_size(self):
        with self.assertRaises(InvalidInputError):
            detr_cost(make_layer([[0, 0, 1, 1]], [1.0]), np.zeros((0, 4)), scene_size=0)


class UnionSetTests(SimpleTestCase):

    def test_union_of_two_layers(self):
        union = union_set([
            Assignment(pairs=((0, 0), (2, 1)), total_cost=0.0),
            Assignment(pairs=((1, 0), (2, 1)), total_cost=0.0),
        ], k=3)
        self.assertEqual(union.matched_pairs, ((0, 0), (1, 0), (2, 1)))
        self.assertEqual(union.matched_predictions, (0, 1, 2))
        self.assertEqual(union.unmatched_predictions, ())

    def test_identical_layers_are_idempotent(self):
        layer = Assignment(pairs=((1, 0), (3, 1)), total_cost=1.0)
        self.assertEqual(union_set([layer] * 4, k=5), union_set([layer], k=5))

    def test_empty_assignments(self):
        union = union_set([Assignment(pairs=(), total_cost=0.0)], k=5)
        self.assertEqual(union.matched_predictions, ())
        self.assertEqual(union.unmatched_predictions, (0, 1, 2, 3, 4))

    def test_adding_a_layer_never_shrinks_the_matched_set(self):
        rng = np.random.default_rng(3)
        layers = [hungarian(rng.uniform(size=(6, 2))) for _ in range(5)]
        previous = set()
        for n in range(1, 6):
            union = union_set(layers[:n], k=6, num_gts=2)
            self.assertTrue(previous <= set(union.matched_predictions))
            self.assertEqual(set(union.matched_predictions) | set(union.unmatched_predictions), set(range(6)))
            previous = set(union.matched_predictions)

    def test_index_overflow(self):
        with self.assertRaises(BinIndexError):
            union_set([Assignment(pairs=((3, 0),), total_cost=0.0)], k=3)
        with self.assertRaises(BinIndexError):
            union_set([Assignment(pairs=((0, 2),), total_cost=0.0)], k=3, num_gts=2)

    def test_select_targets_prefers_the_final_layer(self):
        union = union_set([
            Assignment(pairs=((0, 0), (1, 1)), total_cost=0.0),
            Assignment(pairs=((0, 1), (2, 1)), total_cost=0.0),
        ], k=3)
        final = Assignment(pairs=((1, 0), (2, 1)), total_cost=0.0)
        ious = np.array([[0.2, 0.6], [0.1, 0.9], [0.0, 0.3]])
        self.assertEqual(select_targets(union, final, ious), {0: 1, 1: 0, 2: 1})

        tied = np.array([[0.5, 0.5], [0.1, 0.9], [0.0, 0.3]])
        self.assertEqual(select_targets(union, final, tied)[0], 0)
