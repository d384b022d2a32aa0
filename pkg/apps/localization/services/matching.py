"""
Matching Service
Per-layer Hungarian assignment of predictions to ground truths, the DETR-style
matching cost, and the union of matches across decoder layers.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from apps.localization.exceptions import (
    BinIndexError,
    CostMatrixParseError,
    InvalidInputError,
    ShapeError,
)
from apps.localization.services.geometry import BoxCxCyWH, generalized_box_iou_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """K predictions x G ground truths, finite entries"""
    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ShapeError(f"Cost matrix must be 2-D, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise InvalidInputError("Cost matrix entries must be finite")
        object.__setattr__(self, 'entries', entries)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'CostMatrix':
        """
        Parse a headerless numeric CSV, one row per prediction.

        Raises:
            CostMatrixParseError: empty, ragged or non-numeric content
            OSError: unreadable path
        """
        try:
            frame = pd.read_csv(path, header=None, skip_blank_lines=True)
        except pd.errors.EmptyDataError:
            raise CostMatrixParseError(f"Cost matrix CSV {path} is empty") from None
        except pd.errors.ParserError as e:
            raise CostMatrixParseError(f"Cost matrix CSV {path} is ragged: {e}") from None
        except UnicodeDecodeError as e:
            raise CostMatrixParseError(f"Cost matrix CSV {path} is not valid UTF-8: {e}") from None

        try:
            entries = frame.to_numpy(dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise CostMatrixParseError(f"Cost matrix CSV {path} has non-numeric cells: {e}") from None
        if np.isnan(entries).any():
            raise CostMatrixParseError(f"Cost matrix CSV {path} is ragged or has empty cells")
        if not np.all(np.isfinite(entries)):
            raise CostMatrixParseError(f"Cost matrix CSV {path} has non-finite cells")
        return cls(entries)


@dataclass(frozen=True)
class Assignment:
    """Partial injective prediction -> gt mapping, pairs sorted by prediction index"""
    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float

    def __len__(self):
        return len(self.pairs)

    def gt_for(self) -> Dict[int, int]:
        return dict(self.pairs)

    def to_dict(self) -> Dict:
        return {
            'pairs': [[int(r), int(c)] for r, c in self.pairs],
            'total_cost': float(self.total_cost),
        }


@dataclass(frozen=True)
class UnionSet:
    """Deduplicated matches over every layer and the induced prediction partition"""
    matched_pairs: Tuple[Tuple[int, int], ...]
    matched_predictions: Tuple[int, ...]
    unmatched_predictions: Tuple[int, ...]


@dataclass(frozen=True)
class MatcherWeights:
    """Matching cost weights: class, L1 box and GIoU terms"""
    class_weight: float = 1.0
    bbox_weight: float = 5.0
    giou_weight: float = 2.0


TIE_TOLERANCE = 1e-9


def _solve_square(square: np.ndarray) -> Optional[Tuple[float, np.ndarray]]:
    """Optimal cost and column per row, or None when the constraints are infeasible"""
    try:
        rows, cols = linear_sum_assignment(square)
    except ValueError:
        return None
    return float(square[rows, cols].sum()), cols


def _lowest_index_columns(entries: np.ndarray) -> np.ndarray:
    """
    Column chosen by each row of the zero-padded square problem.

    Among equal-cost optima the matched prediction set is the lowest in index
    order, then each prediction in turn takes the lowest gt index still optimal.
    Columns >= G are padding and mean the prediction is unmatched.
    """
    k, g = entries.shape
    n = max(k, g)
    square = np.zeros((n, n))
    square[:k, :g] = entries
    best, cols = _solve_square(square)
    tolerance = TIE_TOLERANCE * max(1.0, abs(best))

    def still_optimal(trial):
        solved = _solve_square(trial)
        if solved is not None and solved[0] <= best + tolerance:
            return solved[1]
        return None

    if k > g:
        for i in range(k):
            if cols[i] >= g:
                trial = square.copy()
                trial[i, g:] = np.inf
                found = still_optimal(trial)
                if found is not None:
                    square, cols = trial, found
            if cols[i] < g:
                square[i, g:] = np.inf
            else:
                square[i, :g] = np.inf

    for i in range(k):
        if cols[i] >= g:
            continue
        for j in range(int(cols[i])):
            if not np.isfinite(square[i, j]):
                continue
            trial = square.copy()
            trial[i, :] = np.inf
            trial[:, j] = np.inf
            trial[i, j] = square[i, j]
            found = still_optimal(trial)
            if found is not None:
                square, cols = trial, found
                break
        j = int(cols[i])
        kept = square[i, j]
        square[i, :] = np.inf
        square[:, j] = np.inf
        square[i, j] = kept
    return cols


def hungarian(cost: Union[CostMatrix, np.ndarray]) -> Assignment:
    """
    Minimum-cost assignment of size min(K, G).

    Ties between equal-cost optima go to the lowest prediction indices first,
    then to the lowest gt index for each prediction in order.
    """
    if not isinstance(cost, CostMatrix):
        cost = CostMatrix(cost)
    entries = cost.entries
    if entries.size == 0:
        return Assignment(pairs=(), total_cost=0.0)

    g = entries.shape[1]
    cols = _lowest_index_columns(entries)
    pairs = tuple((r, int(c)) for r, c in enumerate(cols[:entries.shape[0]]) if c < g)
    total = float(sum(entries[r, c] for r, c in pairs))
    logger.debug(f"Hungarian {entries.shape[0]}x{entries.shape[1]}: {len(pairs)} pairs, cost {total:.6g}")
    return Assignment(pairs=pairs, total_cost=total)


def _gt_array(gt_boxes) -> np.ndarray:
    if len(gt_boxes) and isinstance(gt_boxes[0], BoxCxCyWH):
        return np.stack([box.as_array() for box in gt_boxes])
    return np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)


def detr_cost(
    layer,
    gt_boxes,
    scene_size: float,
    gt_labels: Optional[Sequence[int]] = None,
    weights: MatcherWeights = MatcherWeights(),
) -> CostMatrix:
    """
    cost(k, g) = 1 * (1 - conf) + 5 * L1 + 2 * (1 - GIoU).

    Args:
        layer: LayerState whose boxes and confidences are matched
        gt_boxes: (G, 4) cxcywh array or list of BoxCxCyWH
        scene_size: Normalizer for the L1 term
        gt_labels: Class index per gt; required when confidences are (K, C)
        weights: Term weights

    Returns:
        (K, G) CostMatrix; G = 0 gives a valid empty-column matrix
    """
    if not scene_size > 0:
        raise InvalidInputError(f"scene_size must be > 0, got {scene_size}")
    boxes = np.asarray(layer.boxes, dtype=np.float64)
    gts = _gt_array(gt_boxes)
    k, g = boxes.shape[0], gts.shape[0]

    confidences = np.asarray(layer.confidences, dtype=np.float64)
    if confidences.ndim == 1:
        class_prob = np.broadcast_to(confidences[:, None], (k, g))
    else:
        if gt_labels is None or len(gt_labels) != g:
            raise ShapeError("Per-class confidences need one label per ground truth")
        class_prob = confidences[:, np.asarray(gt_labels, dtype=np.int64)]

    l1 = np.abs(boxes[:, None, :] - gts[None, :, :]).mean(axis=-1) / scene_size
    giou = generalized_box_iou_matrix(boxes, gts) if g else np.zeros((k, 0))
    entries = (
        weights.class_weight * (1.0 - class_prob)
        + weights.bbox_weight * l1
        + weights.giou_weight * (1.0 - giou)
    )
    return CostMatrix(entries.reshape(k, g))


def union_set(assignments: Sequence[Assignment], k: int, num_gts: Optional[int] = None) -> UnionSet:
    """
    Union of all layers' pairs; a prediction matched in any layer counts as matched.

    Args:
        assignments: One Assignment per layer
        k: Prediction count
        num_gts: Ground-truth count, when known, to range-check gt indices
    """
    pairs = set()
    for assignment in assignments:
        for pred, gt in assignment.pairs:
            if not 0 <= pred < k:
                raise BinIndexError(f"Prediction index {pred} outside 0..{k - 1}")
            if gt < 0 or (num_gts is not None and gt >= num_gts):
                raise BinIndexError(f"Ground-truth index {gt} out of range")
            pairs.add((int(pred), int(gt)))

    matched = sorted({pred for pred, _ in pairs})
    unmatched = sorted(set(range(k)) - set(matched))
    return UnionSet(
        matched_pairs=tuple(sorted(pairs)),
        matched_predictions=tuple(matched),
        unmatched_predictions=tuple(unmatched),
    )


def select_targets(union: UnionSet, final_assignment: Assignment, iou_matrix: np.ndarray) -> Dict[int, int]:
    """
    One gt per matched prediction: its final-layer gt when it has one, otherwise
    the best-IoU gt among its pairs (lowest gt index on ties).

    Args:
        iou_matrix: (K, G) IoU of the final-layer boxes against every gt
    """
    final = final_assignment.gt_for()
    candidates: Dict[int, list] = {}
    for pred, gt in union.matched_pairs:
        candidates.setdefault(pred, []).append(gt)

    targets = {}
    for pred in union.matched_predictions:
        if pred in final:
            targets[pred] = final[pred]
        else:
            gts = sorted(candidates[pred])
            targets[pred] = max(gts, key=lambda gt: (iou_matrix[pred, gt], -gt))
    return targets
