"""
Toy Trainer Service
Desk-scale optimizer for the refinement losses. Free parameters (layer-1 logits plus
one residual tensor per later layer) are fitted by plain gradient descent so that K
queries localize G synthetic ground-truth boxes.

Matching, FGL targets and DDF weights are refreshed every `rematch_every` steps
and held fixed in between.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from apps.localization.exceptions import ConfigurationError, DivergenceError, ShapeError
from apps.localization.services.geometry import box_iou_matrix, paired_iou
from apps.localization.services.losses import (
    KL_DIRECTIONS,
    DDFWeights,
    LossDiagnostics,
    build_ddf_weights,
    build_fgl_targets,
    ddf_loss,
    fgl_loss,
)
from apps.localization.services.matching import (
    Assignment,
    detr_cost,
    hungarian,
    select_targets,
    union_set,
)
from apps.localization.services.refinement import (
    EdgeDistributions,
    LayerState,
    initial_layer,
    run_pipeline,
)
from apps.localization.services.weighting import WeightingSpec, build_spec

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ['step', 'layer', 'mean_iou', 'fgl', 'ddf']

MATCHED_CONFIDENCE = 0.9
DISTRACTOR_CONFIDENCE = 0.1
MIN_BOX_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class ToyProblem:
    """Synthetic scene: gts, K initial boxes (jittered gts first, then distractors), cxcywh"""
    scene_size: float
    gt_boxes: np.ndarray
    initial_boxes: np.ndarray
    confidences: np.ndarray
    layers: int
    seed: int

    @property
    def num_queries(self) -> int:
        return self.initial_boxes.shape[0]

    @property
    def num_gts(self) -> int:
        return self.gt_boxes.shape[0]

    def to_dict(self) -> Dict:
        return {
            'scene_size': float(self.scene_size),
            'gt_boxes': self.gt_boxes.tolist(),
            'initial_boxes': self.initial_boxes.tolist(),
            'confidences': self.confidences.tolist(),
            'layers': int(self.layers),
            'seed': int(self.seed),
        }


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    learning_rate: float = 0.5
    a: float = 0.5
    c: float = 0.25
    n_bins: int = 32
    temperature: float = 5.0
    w_fgl: float = 0.15
    w_ddf: float = 1.5
    distill_enabled: bool = True
    rematch_every: int = 10
    kl_direction: str = 'teacher_student'

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.w_fgl < 0 or self.w_ddf < 0:
            raise ConfigurationError("Loss weights must be >= 0")
        if self.rematch_every < 1:
            raise ConfigurationError(f"rematch_every must be >= 1, got {self.rematch_every}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigurationError(f"Unknown KL direction {self.kl_direction!r}")

    def weighting_spec(self) -> WeightingSpec:
        return build_spec(self.a, self.c, self.n_bins)


@dataclass(eq=False)
class ToyParameters:
    """Layer-1 logits and the L-1 residual tensors, each (K, 4, N+1)"""
    initial: np.ndarray
    deltas: List[np.ndarray]

    @classmethod
    def zeros(cls, num_queries: int, layers: int, n_bins: int) -> 'ToyParameters':
        shape = (num_queries, 4, n_bins + 1)
        return cls(initial=np.zeros(shape), deltas=[np.zeros(shape) for _ in range(layers - 1)])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.initial)) and all(np.all(np.isfinite(d)) for d in self.deltas))

    def max_abs(self) -> float:
        return float(max([np.max(np.abs(self.initial))] + [np.max(np.abs(d)) for d in self.deltas]))


@dataclass(eq=False)
class TrainReport:
    records: pd.DataFrame
    final_assignment: Assignment
    final_iou_per_layer: List[Optional[float]]
    final_states: List[LayerState]
    parameters: ToyParameters
    wall_clock_seconds: float
    floored: int = 0

    def summary(self, problem: ToyProblem, config: TrainConfig) -> Dict:
        """JSON-ready summary; wall clock excluded so that files stay byte-stable"""
        return {
            'distill': bool(config.distill_enabled),
            'final_iou_per_layer': list(self.final_iou_per_layer),
            'final_pairs': [[int(p), int(g)] for p, g in self.final_assignment.pairs],
            'floored_probabilities': int(self.floored),
            'seed': int(problem.seed),
            'steps': int(config.steps),
        }


@dataclass(eq=False)
class _MatchState:
    """Supervision held fixed between rematch events"""
    assignment: Assignment
    fgl_targets: list
    ddf_weights: DDFWeights
    matched: np.ndarray
    unmatched: np.ndarray
    matched_set: tuple = field(default=())


def _clip_to_scene(boxes: np.ndarray, scene_size: float) -> np.ndarray:
    """Keep sizes in [1% of the scene, scene] and centers so that boxes stay inside"""
    boxes = boxes.copy()
    boxes[:, 2:] = np.clip(boxes[:, 2:], MIN_BOX_FRACTION * scene_size, scene_size)
    for axis in (0, 1):
        half = boxes[:, axis + 2] / 2
        boxes[:, axis] = np.clip(boxes[:, axis], half, scene_size - half)
    return boxes


def _random_boxes(rng: np.random.Generator, count: int, scene_size: float, low: float, high: float) -> np.ndarray:
    sizes = rng.uniform(low, high, size=(count, 2)) * scene_size
    centers = rng.uniform(0.0, 1.0, size=(count, 2)) * (scene_size - sizes) + sizes / 2
    return _clip_to_scene(np.concatenate([centers, sizes], axis=1), scene_size)


def generate_problem(
    seed: int,
    k: int,
    g: int,
    scene_size: float = 100.0,
    noise: float = 0.05,
    layers: int = 3,
) -> ToyProblem:
    """
    Seeded synthetic scene.

    Args:
        seed: Non-negative integer seed; identical seeds give bit-identical problems
        k: Query count (k >= g)
        g: Ground-truth count (g >= 1)
        scene_size: Side of the square scene
        noise: Gaussian jitter of the first g queries, as a fraction of scene_size
        layers: Decoder layer count L >= 2

    Returns:
        ToyProblem; with noise = 0 the first g initial boxes equal the gts
    """
    if isinstance(seed, bool) or int(seed) != seed or seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")
    if g < 1 or k < g:
        raise ConfigurationError(f"Need k >= g >= 1, got k={k}, g={g}")
    if not (math.isfinite(noise) and noise >= 0):
        raise ConfigurationError(f"noise must be >= 0, got {noise}")
    if not (math.isfinite(scene_size) and scene_size > 0):
        raise ConfigurationError(f"scene_size must be > 0, got {scene_size}")
    if layers < 2:
        raise ConfigurationError(f"layers must be >= 2, got {layers}")

    rng = np.random.default_rng(int(seed))
    gt_boxes = _random_boxes(rng, g, scene_size, 0.15, 0.35)
    jitter = rng.normal(0.0, noise * scene_size, size=(g, 4))
    jittered = _clip_to_scene(gt_boxes + jitter, scene_size)
    distractors = _random_boxes(rng, k - g, scene_size, 0.05, 0.3)

    confidences = np.concatenate([
        np.full(g, MATCHED_CONFIDENCE),
        np.full(k - g, DISTRACTOR_CONFIDENCE),
    ])
    return ToyProblem(
        scene_size=float(scene_size),
        gt_boxes=gt_boxes,
        initial_boxes=np.concatenate([jittered, distractors], axis=0),
        confidences=confidences,
        layers=int(layers),
        seed=int(seed),
    )


def forward(problem: ToyProblem, params: ToyParameters, spec: WeightingSpec) -> List[LayerState]:
    """Decode every layer from the current parameters"""
    first = initial_layer(problem.initial_boxes, EdgeDistributions(params.initial), spec, problem.confidences)
    return run_pipeline(first, [EdgeDistributions(d) for d in params.deltas], spec)


def evaluate(states: Sequence[LayerState], gt_boxes, assignment: Assignment) -> List[Optional[float]]:
    """
    Mean IoU over the assignment's pairs, for every layer.

    Returns:
        One value per layer; None for every layer when the assignment is empty
    """
    if not assignment.pairs:
        return [None for _ in states]
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    preds = np.array([p for p, _ in assignment.pairs])
    gt_idx = np.array([g for _, g in assignment.pairs])
    return [float(np.mean(paired_iou(state.boxes[preds], gts[gt_idx]))) for state in states]


def _rematch(problem: ToyProblem, states: List[LayerState], spec: WeightingSpec, config: TrainConfig) -> _MatchState:
    k = problem.num_queries
    assignments = [hungarian(detr_cost(state, problem.gt_boxes, problem.scene_size)) for state in states]
    union = union_set(assignments, k, problem.num_gts)
    teacher = states[-1]
    teacher_ious = box_iou_matrix(teacher.boxes, problem.gt_boxes)
    targets = select_targets(union, assignments[-1], teacher_ious)

    matched = np.array(union.matched_predictions, dtype=np.int64)
    unmatched = np.array(union.unmatched_predictions, dtype=np.int64)
    # Unmatched predictions aim at their own reference box with zero weight
    target_boxes = problem.initial_boxes.copy()
    for pred, gt in targets.items():
        target_boxes[pred] = problem.gt_boxes[gt]

    fgl_targets = []
    for state in states:
        ious = np.zeros(k)
        if matched.size:
            ious[matched] = paired_iou(state.boxes[matched], target_boxes[matched])
        fgl_targets.append(build_fgl_targets(problem.initial_boxes, target_boxes, ious, spec))

    matched_ious = np.array([teacher_ious[p, targets[p]] for p in matched]) if matched.size else np.zeros(0)
    ddf_weights = build_ddf_weights(matched_ious, teacher.confidences[unmatched], config.temperature)
    return _MatchState(
        assignment=assignments[-1],
        fgl_targets=fgl_targets,
        ddf_weights=ddf_weights,
        matched=matched,
        unmatched=unmatched,
        matched_set=union.matched_pairs,
    )


def train(problem: ToyProblem, config: TrainConfig) -> TrainReport:
    """
    Fit the toy parameters by plain gradient descent.

    The DDF loss is always computed and recorded; its gradient is applied only when
    config.distill_enabled. The teacher (layer L) never receives a DDF gradient.

    Raises:
        DivergenceError: the loss or the parameters stopped being finite
    """
    spec = config.weighting_spec()
    layers = problem.layers
    params = ToyParameters.zeros(problem.num_queries, layers, config.n_bins)
    diagnostics = LossDiagnostics()
    rows = []
    match: Optional[_MatchState] = None

    logger.info(
        f"🚀 Training toy problem seed={problem.seed} K={problem.num_queries} G={problem.num_gts} "
        f"L={layers} steps={config.steps} distill={config.distill_enabled}"
    )
    start = time.time()

    for step in range(config.steps):
        states = forward(problem, params, spec)
        if step % config.rematch_every == 0:
            previous = match.matched_set if match else None
            match = _rematch(problem, states, spec, config)
            if previous is not None and previous != match.matched_set:
                logger.info(f"🔄 Step {step}: union set changed to {list(match.matched_set)}")

        fgl = fgl_loss([s.distributions for s in states], match.fgl_targets, spec, diagnostics)
        ddf = ddf_loss(
            [s.distributions for s in states[:-1]],
            states[-1].distributions,
            match.ddf_weights,
            match.matched,
            match.unmatched,
            direction=config.kl_direction,
            diagnostics=diagnostics,
        )

        ious = evaluate(states, problem.gt_boxes, match.assignment)
        ddf_per_layer = ddf.per_layer + [0.0]
        for index in range(layers):
            rows.append({
                'step': step,
                'layer': index + 1,
                'mean_iou': ious[index],
                'fgl': fgl.per_layer[index],
                'ddf': ddf_per_layer[index],
            })

        total = config.w_fgl * fgl.value + (config.w_ddf * ddf.value if config.distill_enabled else 0.0)
        if not math.isfinite(total):
            raise DivergenceError(
                f"Non-finite loss at step {step}",
                diagnostics={
                    'step': step,
                    'fgl_per_layer': [float(v) for v in fgl.per_layer],
                    'ddf_per_layer': [float(v) for v in ddf_per_layer],
                    'max_abs_logit': params.max_abs(),
                    'floored_probabilities': diagnostics.floored,
                },
            )
        logger.debug(f"Step {step}: loss={total:.6g} fgl={fgl.value:.6g} ddf={ddf.value:.6g}")

        layer_grads = [config.w_fgl * g for g in fgl.grads]
        if config.distill_enabled:
            for index, grad in enumerate(ddf.grads):
                layer_grads[index] = layer_grads[index] + config.w_ddf * grad
        params = _descend(params, layer_grads, config.learning_rate)

        if not params.is_finite():
            raise DivergenceError(
                f"Parameters became non-finite after step {step}",
                diagnostics={'step': step, 'last_loss': total, 'floored_probabilities': diagnostics.floored},
            )

    final_states = forward(problem, params, spec)
    final_assignment = hungarian(detr_cost(final_states[-1], problem.gt_boxes, problem.scene_size))
    final_ious = evaluate(final_states, problem.gt_boxes, final_assignment)
    elapsed = time.time() - start

    logger.info(f"✅ Training finished in {elapsed:.2f}s, final IoU per layer {final_ious}")
    return TrainReport(
        records=pd.DataFrame(rows, columns=RECORD_COLUMNS),
        final_assignment=final_assignment,
        final_iou_per_layer=final_ious,
        final_states=final_states,
        parameters=params,
        wall_clock_seconds=elapsed,
        floored=diagnostics.floored,
    )


def _descend(params: ToyParameters, layer_grads: List[np.ndarray], learning_rate: float) -> ToyParameters:
    """
    Chain rule through the residual sums: layer l's logits are the initial logits plus
    deltas 2..l, so the initial logits collect every layer's gradient and delta j
    collects the gradients of layers j..L.
    """
    if len(layer_grads) != len(params.deltas) + 1:
        raise ShapeError(f"{len(layer_grads)} layer gradients for {len(params.deltas) + 1} layers")
    suffix = np.cumsum(np.stack(layer_grads[::-1]), axis=0)[::-1]
    return ToyParameters(
        initial=params.initial - learning_rate * suffix[0],
        deltas=[delta - learning_rate * suffix[j + 1] for j, delta in enumerate(params.deltas)],
    )
