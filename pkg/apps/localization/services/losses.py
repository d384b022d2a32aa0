"""
Localization Loss Service
FGL (IoU-weighted two-bin cross-entropy) and DDF (decoupled, temperature-scaled KL
self-distillation) with closed-form gradients w.r.t. logits, plus the central
finite-difference oracle used to verify them.

All reductions are plain sums over layers, predictions and edges, in index order.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.special import log_softmax

from apps.localization.exceptions import (
    BinIndexError,
    ConfigurationError,
    InvalidInputError,
    ShapeError,
)
from apps.localization.services.geometry import box_edge_distances, distances_to_target
from apps.localization.services.refinement import EdgeDistributions
from apps.localization.services.weighting import Bracket, WeightingSpec, bracket_array

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
LOG_FLOOR = math.log(PROBABILITY_FLOOR)

KL_DIRECTIONS = ('teacher_student', 'student_teacher')


class LossDiagnostics:
    """Counts probability-floor hits across loss evaluations"""

    def __init__(self):
        self.floored = 0

    def record_floor(self, count: int, source: str):
        if count <= 0:
            return
        self.floored += int(count)
        logger.warning(f"⚠️ {source}: {count} probabilities floored at {PROBABILITY_FLOOR:g} (total {self.floored})")


class LossResult(NamedTuple):
    value: float
    grads: List[np.ndarray]
    per_layer: List[float]


@dataclass(frozen=True, eq=False)
class FGLTargets:
    """
    Bracketed regression targets for one layer, arrays shaped (K, 4) except iou (K,).

    n_right is always n_left + 1.
    """
    phi: np.ndarray
    n_left: np.ndarray
    w_left: np.ndarray
    w_right: np.ndarray
    iou: np.ndarray

    def __post_init__(self):
        for name in ('phi', 'w_left', 'w_right', 'iou'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, 'n_left', np.asarray(self.n_left, dtype=np.int64))
        k = self.iou.shape[0]
        for name in ('phi', 'n_left', 'w_left', 'w_right'):
            if getattr(self, name).shape != (k, 4):
                raise ShapeError(f"FGL target field {name} must be shaped ({k}, 4), got {getattr(self, name).shape}")
        if np.any(self.iou < 0) or np.any(self.iou > 1):
            raise InvalidInputError("IoU weights must lie in [0, 1]")

    @property
    def num_predictions(self) -> int:
        return self.iou.shape[0]

    def bracket(self, k: int, edge: int) -> Bracket:
        n_left = int(self.n_left[k, edge])
        return Bracket(
            n_left=n_left,
            n_right=n_left + 1,
            w_left=float(self.w_left[k, edge]),
            w_right=float(self.w_right[k, edge]),
        )


@dataclass(frozen=True, eq=False)
class DDFWeights:
    """Per-prediction distillation weights: alpha for matched, beta for unmatched predictions"""
    k_matched: int
    k_unmatched: int
    alpha: np.ndarray
    beta: np.ndarray
    temperature: float

    def __post_init__(self):
        object.__setattr__(self, 'alpha', np.asarray(self.alpha, dtype=np.float64).reshape(-1))
        object.__setattr__(self, 'beta', np.asarray(self.beta, dtype=np.float64).reshape(-1))
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigurationError(f"Temperature must be > 0, got {self.temperature}")
        if self.alpha.shape[0] != self.k_matched or self.beta.shape[0] != self.k_unmatched:
            raise ShapeError(
                f"Expected {self.k_matched} alpha and {self.k_unmatched} beta weights, "
                f"got {self.alpha.shape[0]} and {self.beta.shape[0]}"
            )


def _decoupling_scales(k_matched: int, k_unmatched: int):
    root_m, root_u = math.sqrt(k_matched), math.sqrt(k_unmatched)
    total = root_m + root_u
    if total == 0:
        return 0.0, 0.0
    return root_m / total, root_u / total


def build_ddf_weights(matched_ious, unmatched_confidences, temperature: float = 5.0) -> DDFWeights:
    """
    Decoupled weights for DDF.

    Args:
        matched_ious: IoU_k of each matched prediction's teacher box with its gt
        unmatched_confidences: Conf_k of each unmatched prediction
        temperature: Distillation temperature T > 0

    Returns:
        DDFWeights with alpha = IoU * sqrt(Km)/(sqrt(Km)+sqrt(Ku)) and
        beta = Conf * sqrt(Ku)/(sqrt(Km)+sqrt(Ku))
    """
    ious = np.asarray(matched_ious, dtype=np.float64).reshape(-1)
    confs = np.asarray(unmatched_confidences, dtype=np.float64).reshape(-1)
    if np.any((ious < 0) | (ious > 1)) or np.any((confs < 0) | (confs > 1)):
        raise InvalidInputError("IoU and confidence weights must lie in [0, 1]")
    matched_scale, unmatched_scale = _decoupling_scales(ious.shape[0], confs.shape[0])
    return DDFWeights(
        k_matched=ious.shape[0],
        k_unmatched=confs.shape[0],
        alpha=ious * matched_scale,
        beta=confs * unmatched_scale,
        temperature=temperature,
    )


def build_fgl_targets(reference_boxes, target_boxes, ious, spec: WeightingSpec) -> FGLTargets:
    """
    Bracket each edge's relative offset phi = (d_gt - d0) / {H, H, W, W}.

    Args:
        reference_boxes: (K, 4) cxcywh reference boxes (anchor centers and scale)
        target_boxes: (K, 4) cxcywh gt box assigned to each prediction
        ious: (K,) IoU_k weights
        spec: Weighting spec

    Returns:
        FGLTargets with phi clamped into [W(0), W(N)]
    """
    reference_boxes = np.asarray(reference_boxes, dtype=np.float64).reshape(-1, 4)
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    if reference_boxes.shape != target_boxes.shape:
        raise ShapeError(f"{reference_boxes.shape[0]} reference boxes for {target_boxes.shape[0]} targets")

    d0 = box_edge_distances(reference_boxes)
    d_gt = distances_to_target(reference_boxes[:, :2], target_boxes)
    h, w = reference_boxes[:, 3:4], reference_boxes[:, 2:3]
    scale = np.concatenate([h, h, w, w], axis=1)
    phi = np.clip((d_gt - d0) / scale, spec.knots[0], spec.knots[-1])
    n_left, w_left, w_right = bracket_array(spec, phi)
    return FGLTargets(phi=phi, n_left=n_left, w_left=w_left, w_right=w_right, iou=ious)


def _as_layers(value, kind):
    if isinstance(value, kind):
        return [value]
    return list(value)


def fgl_loss(
    dists: Union[EdgeDistributions, Sequence[EdgeDistributions]],
    targets: Union[FGLTargets, Sequence[FGLTargets]],
    spec: WeightingSpec,
    diagnostics: Optional[LossDiagnostics] = None,
) -> LossResult:
    """
    Fine-grained localization loss summed over layers, predictions and edges.

    Each edge contributes IoU_k * (w_left * -log Pr(n_left) + w_right * -log Pr(n_right)).

    Returns:
        LossResult; grads[l] has the shape of dists[l].logits
    """
    dists = _as_layers(dists, EdgeDistributions)
    targets = _as_layers(targets, FGLTargets)
    if len(dists) != len(targets):
        raise ShapeError(f"{len(dists)} layers of distributions for {len(targets)} layers of targets")

    total, grads, per_layer, floored = 0.0, [], [], 0
    for dist, target in zip(dists, targets):
        if dist.num_bins != spec.n_bins + 1:
            raise ShapeError(f"Distribution has {dist.num_bins} bins, spec expects {spec.n_bins + 1}")
        if target.num_predictions != dist.num_predictions:
            raise ShapeError(f"{target.num_predictions} targets for {dist.num_predictions} predictions")
        if np.any(target.n_left < 0) or np.any(target.n_left >= spec.n_bins):
            raise BinIndexError(f"Target bins outside 0..{spec.n_bins}")
        if not np.all(np.isfinite(dist.logits)):
            raise InvalidInputError("Logits must be finite")

        log_p = log_softmax(dist.logits, axis=-1)
        probs = np.exp(log_p)
        n_left = target.n_left[..., None]
        log_left = np.take_along_axis(log_p, n_left, axis=-1)[..., 0]
        log_right = np.take_along_axis(log_p, n_left + 1, axis=-1)[..., 0]

        weighted = target.iou[:, None] > 0
        floored += int(np.sum((log_left < LOG_FLOOR) & (target.w_left > 0) & weighted))
        floored += int(np.sum((log_right < LOG_FLOOR) & (target.w_right > 0) & weighted))
        edge_loss = -(target.w_left * np.maximum(log_left, LOG_FLOOR)
                      + target.w_right * np.maximum(log_right, LOG_FLOOR))
        value = float(np.sum(target.iou[:, None] * edge_loss))

        pull = np.zeros_like(probs)
        np.put_along_axis(pull, n_left, target.w_left[..., None], axis=-1)
        np.put_along_axis(pull, n_left + 1, target.w_right[..., None], axis=-1)
        mass = (target.w_left + target.w_right)[..., None]
        grad = target.iou[:, None, None] * (mass * probs - pull)

        total += value
        per_layer.append(value)
        grads.append(grad)

    if diagnostics is not None:
        diagnostics.record_floor(floored, 'FGL')
    return LossResult(value=total, grads=grads, per_layer=per_layer)


def _validate_indices(matched_idx, unmatched_idx, k: int):
    matched = np.asarray(matched_idx, dtype=np.int64).reshape(-1)
    unmatched = np.asarray(unmatched_idx, dtype=np.int64).reshape(-1)
    for idx in (matched, unmatched):
        if np.any(idx < 0) or np.any(idx >= k):
            raise BinIndexError(f"Prediction index outside 0..{k - 1}")
    if np.intersect1d(matched, unmatched).size or np.unique(matched).size != matched.size \
            or np.unique(unmatched).size != unmatched.size:
        raise InvalidInputError("Matched and unmatched index sets must be disjoint and duplicate-free")
    return matched, unmatched


def ddf_loss(
    student_layers: Sequence[EdgeDistributions],
    teacher: EdgeDistributions,
    weights: DDFWeights,
    matched_idx,
    unmatched_idx,
    direction: str = 'teacher_student',
    diagnostics: Optional[LossDiagnostics] = None,
) -> LossResult:
    """
    Decoupled distillation loss of student layers against the final layer.

    Args:
        student_layers: Distributions of layers 1..L-1
        teacher: Layer-L distributions, treated as constants
        weights: alpha for matched_idx (same order), beta for unmatched_idx
        direction: 'teacher_student' computes KL(teacher || student);
            'student_teacher' computes KL(student || teacher)

    Returns:
        LossResult with one gradient per student layer; the teacher gets none
    """
    if direction not in KL_DIRECTIONS:
        raise ConfigurationError(f"Unknown KL direction {direction!r}; choose from {KL_DIRECTIONS}")
    temperature = weights.temperature
    if not (math.isfinite(temperature) and temperature > 0):
        raise ConfigurationError(f"Temperature must be > 0, got {temperature}")

    k = teacher.num_predictions
    matched, unmatched = _validate_indices(matched_idx, unmatched_idx, k)
    if matched.size != weights.k_matched or unmatched.size != weights.k_unmatched:
        raise ShapeError(
            f"{matched.size}/{unmatched.size} indices for {weights.k_matched}/{weights.k_unmatched} weights"
        )

    per_prediction = np.zeros(k)
    per_prediction[matched] = weights.alpha
    per_prediction[unmatched] = weights.beta

    teacher_log = log_softmax(teacher.logits / temperature, axis=-1)
    teacher_p = np.exp(teacher_log)

    total, grads, per_layer, floored = 0.0, [], [], 0
    for student in student_layers:
        if student.logits.shape != teacher.logits.shape:
            raise ShapeError(f"Student logits {student.logits.shape} vs teacher {teacher.logits.shape}")
        student_log = log_softmax(student.logits / temperature, axis=-1)
        student_p = np.exp(student_log)
        active = per_prediction[:, None, None] != 0

        if direction == 'teacher_student':
            floored += int(np.sum(active & (teacher_p > 0) & (student_log < LOG_FLOOR)))
            terms = np.where(
                teacher_p > 0, teacher_p * (teacher_log - np.maximum(student_log, LOG_FLOOR)), 0.0,
            )
            edge_kl = terms.sum(axis=-1)
            edge_grad = student_p - teacher_p
        else:
            floored += int(np.sum(active & (student_p > 0) & (teacher_log < LOG_FLOOR)))
            log_ratio = student_log - np.maximum(teacher_log, LOG_FLOOR)
            terms = np.where(student_p > 0, student_p * log_ratio, 0.0)
            edge_kl = terms.sum(axis=-1)
            edge_grad = student_p * (log_ratio - edge_kl[..., None])

        value = float(temperature ** 2 * np.sum(per_prediction[:, None] * edge_kl))
        total += value
        per_layer.append(value)
        grads.append(temperature * per_prediction[:, None, None] * edge_grad)

    if diagnostics is not None:
        diagnostics.record_floor(floored, 'DDF')
    return LossResult(value=total, grads=grads, per_layer=per_layer)


def kl_divergence(p, q, diagnostics: Optional[LossDiagnostics] = None) -> float:
    """
    KL(p || q) = sum p * log(p / q) over the last axis, summed over any leading axes.

    q is floored at 1e-12 inside the log; entries with p = 0 contribute nothing.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"Distribution shapes differ: {p.shape} vs {q.shape}")
    for name, dist in (('p', p), ('q', q)):
        if not np.all(np.isfinite(dist)) or np.any(dist < 0) \
                or np.any(np.abs(dist.sum(axis=-1) - 1.0) > 1e-6):
            raise InvalidInputError(f"{name} must be a normalized distribution")

    floored = int(np.sum((p > 0) & (q < PROBABILITY_FLOOR)))
    if diagnostics is not None:
        diagnostics.record_floor(floored, 'KL')
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, PROBABILITY_FLOOR))), 0.0)
    return float(terms.sum())


def finite_difference_check(
    loss_fn: Callable[[np.ndarray], tuple],
    logits,
    epsilon: float = 1e-5,
) -> float:
    """
    Compare a closure's analytic gradient to central differences.

    Args:
        loss_fn: Maps a logits array to (value, gradient of the same shape)
        logits: Point to check at
        epsilon: Step size in [1e-7, 1e-3]

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ConfigurationError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")

    point = np.array(logits, dtype=np.float64)
    analytic = np.asarray(loss_fn(point.copy())[1], dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError(f"Gradient shape {analytic.shape} does not match logits {point.shape}")

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + epsilon
        f_plus = float(loss_fn(point.copy())[0])
        flat[i] = original - epsilon
        f_minus = float(loss_fn(point.copy())[0])
        flat[i] = original

        numeric = 0.5 * (f_plus - f_minus) / epsilon
        error = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, error)
    return worst

