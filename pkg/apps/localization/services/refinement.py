"""
Distribution Refinement Service
Residual logit updates, expected-offset decoding and layer-by-layer edge refinement.

Every layer l keeps logits over N+1 bins per edge. Layer 1 starts from an implicit
zero prior; layer l adds a residual to layer l-1. The expected offset under each
edge's softmax, scaled by the reference box height/width, moves that edge away
from its reference distance. The reference box (and its center) never changes.

The uniform-grid decoder used by earlier distribution heads is kept for comparison.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from apps.localization.exceptions import InvalidInputError, ShapeError
from apps.localization.services.geometry import (
    EdgeDistances,
    box_edge_distances,
    distances_to_boxes,
)
from apps.localization.services.weighting import WeightingSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EdgeDistributions:
    """Per-prediction logits, shape (K, 4 edges, N+1 bins), edges in (t, b, l, r) order"""
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[1] != 4:
            raise ShapeError(f"Edge logits must be shaped (K, 4, N+1), got {logits.shape}")
        object.__setattr__(self, 'logits', logits)

    @classmethod
    def zeros(cls, num_predictions: int, n_bins: int) -> 'EdgeDistributions':
        return cls(np.zeros((num_predictions, 4, n_bins + 1)))

    @property
    def num_predictions(self) -> int:
        return self.logits.shape[0]

    @property
    def num_bins(self) -> int:
        """Bin count along the last axis (N + 1)"""
        return self.logits.shape[2]

    def probabilities(self) -> np.ndarray:
        return probabilities(self.logits)


@dataclass(frozen=True, eq=False)
class LayerState:
    """
    One decoder layer's view of the K predictions.

    reference_boxes are the layer-1 input boxes b0 shared by every layer; the
    edge distances are anchored at their centers.
    """
    layer_index: int
    reference_boxes: np.ndarray
    edge_distances: np.ndarray
    boxes: np.ndarray
    distributions: EdgeDistributions
    confidences: np.ndarray

    @property
    def num_predictions(self) -> int:
        return self.boxes.shape[0]


@dataclass(frozen=True)
class GFocalSpec:
    """Uniform-grid decoder: distance = d_max * sum (n/N) P(n)"""
    d_max: float
    n_bins: int

    def __post_init__(self):
        if not (math.isfinite(self.d_max) and self.d_max > 0):
            raise InvalidInputError(f"d_max must be finite and > 0, got {self.d_max}")
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise InvalidInputError(f"n_bins must be a positive integer, got {self.n_bins}")


def _logits_of(value) -> np.ndarray:
    if isinstance(value, EdgeDistributions):
        return value.logits
    return np.asarray(value, dtype=np.float64)


def probabilities(logits) -> np.ndarray:
    """Softmax over the bin (last) axis, max-shifted"""
    logits = _logits_of(logits)
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("Logits must be finite")
    return softmax(logits, axis=-1)


def apply_residual(prev_logits: EdgeDistributions, delta_logits: EdgeDistributions) -> EdgeDistributions:
    """logits^l = logits^(l-1) + delta^l; layer 1 passes an all-zero prev"""
    if prev_logits.logits.shape != delta_logits.logits.shape:
        raise ShapeError(
            f"Residual shape {delta_logits.logits.shape} does not match {prev_logits.logits.shape}"
        )
    return EdgeDistributions(prev_logits.logits + delta_logits.logits)


def decode_offsets(dist: EdgeDistributions, spec: WeightingSpec) -> np.ndarray:
    """Expected offset sum_n W(n) Pr(n) per edge -> (K, 4), each within [-2a, 2a]"""
    if dist.num_bins != spec.n_bins + 1:
        raise ShapeError(f"Distribution has {dist.num_bins} bins, spec expects {spec.n_bins + 1}")
    return dist.probabilities() @ spec.knots


def refine_edges(d0, init_w, init_h, dist: EdgeDistributions, spec: WeightingSpec):
    """
    d^l = d^0 + {H, H, W, W} * expected offset.

    Args:
        d0: EdgeDistances (single prediction) or (K, 4) array in (t, b, l, r) order
        init_w: Reference box width(s), scalar or (K,)
        init_h: Reference box height(s), scalar or (K,)
        dist: Layer distributions, K predictions
        spec: Weighting spec the distributions are expressed in

    Returns:
        Refined distances, same form as d0; the anchor center is unchanged
    """
    init_w = np.asarray(init_w, dtype=np.float64)
    init_h = np.asarray(init_h, dtype=np.float64)
    if not (np.all(np.isfinite(init_w)) and np.all(np.isfinite(init_h))):
        raise InvalidInputError("Reference width/height must be finite")
    if np.any(init_w <= 0) or np.any(init_h <= 0):
        raise InvalidInputError("Reference width/height must be positive")

    single = isinstance(d0, EdgeDistances)
    base = d0.as_array()[None, :] if single else np.asarray(d0, dtype=np.float64)
    if base.shape != (dist.num_predictions, 4):
        raise ShapeError(f"Edge distances {base.shape} do not match {dist.num_predictions} predictions")

    offsets = decode_offsets(dist, spec)
    scale = np.stack(np.broadcast_arrays(init_h, init_h, init_w, init_w), axis=-1)
    refined = base + scale * offsets
    if single:
        t, b, l, r = (float(v) for v in refined[0])  # noqa: E741
        return EdgeDistances(t=t, b=b, l=l, r=r, cx=d0.cx, cy=d0.cy)
    return refined


def decode_layer(reference_boxes: np.ndarray, dist: EdgeDistributions, spec: WeightingSpec):
    """
    Boxes implied by one layer's distributions.

    Returns:
        Tuple of (edge_distances (K, 4), boxes (K, 4) cxcywh)
    """
    reference_boxes = np.asarray(reference_boxes, dtype=np.float64)
    d0 = box_edge_distances(reference_boxes)
    distances = refine_edges(d0, reference_boxes[:, 2], reference_boxes[:, 3], dist, spec)
    boxes = distances_to_boxes(reference_boxes[:, :2], distances)
    return distances, boxes


def initial_layer(
    reference_boxes: np.ndarray,
    logits: EdgeDistributions,
    spec: WeightingSpec,
    confidences: Optional[Sequence[float]] = None,
) -> LayerState:
    """Layer 1: raw logits on top of an implicit zero prior"""
    reference_boxes = np.asarray(reference_boxes, dtype=np.float64)
    if reference_boxes.ndim != 2 or reference_boxes.shape[1] != 4:
        raise ShapeError(f"Reference boxes must be shaped (K, 4), got {reference_boxes.shape}")
    if np.any(reference_boxes[:, 2:] <= 0):
        raise InvalidInputError("Reference boxes need positive width and height")
    k = reference_boxes.shape[0]
    if logits.num_predictions != k:
        raise ShapeError(f"{logits.num_predictions} logit rows for {k} reference boxes")

    if confidences is None:
        confidences = np.ones(k)
    confidences = np.asarray(confidences, dtype=np.float64)
    if confidences.shape[0] != k:
        raise ShapeError(f"{confidences.shape[0]} confidences for {k} predictions")

    dist = apply_residual(EdgeDistributions.zeros(k, spec.n_bins), logits)
    distances, boxes = decode_layer(reference_boxes, dist, spec)
    return LayerState(
        layer_index=1,
        reference_boxes=reference_boxes,
        edge_distances=distances,
        boxes=boxes,
        distributions=dist,
        confidences=confidences,
    )


def run_pipeline(
    initial: LayerState,
    deltas: Sequence[EdgeDistributions],
    spec: WeightingSpec,
) -> List[LayerState]:
    """
    Chain residual updates through L layers.

    Args:
        initial: Layer-1 state
        deltas: L-1 residual logit tensors, one per subsequent layer
        spec: Weighting spec

    Returns:
        L layer states; layer l's logits equal layer 1's plus the first l-1 deltas
    """
    if initial.layer_index != 1:
        raise InvalidInputError(f"Pipeline must start at layer 1, got {initial.layer_index}")

    states = [initial]
    for delta in deltas:
        prev = states[-1]
        dist = apply_residual(prev.distributions, delta)
        distances, boxes = decode_layer(initial.reference_boxes, dist, spec)
        states.append(replace(
            prev,
            layer_index=prev.layer_index + 1,
            edge_distances=distances,
            boxes=boxes,
            distributions=dist,
        ))
    logger.debug(f"Refined {initial.num_predictions} predictions through {len(states)} layers")
    return states


def gfocal_decode(dist, gspec: GFocalSpec) -> np.ndarray:
    """
    Uniform-grid expected distance d_max * sum_n (n/N) P(n).

    Args:
        dist: Normalized distribution(s) over N+1 bins on the last axis

    Returns:
        Distance(s) in [0, d_max]
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[-1] != gspec.n_bins + 1:
        raise ShapeError(f"Distribution has {dist.shape[-1]} bins, expected {gspec.n_bins + 1}")
    if not np.all(np.isfinite(dist)) or np.any(np.abs(dist.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidInputError("Distribution rows must be finite and sum to 1")
    grid = np.arange(gspec.n_bins + 1) / gspec.n_bins
    return gspec.d_max * (dist @ grid)
