"""
Ablation Service
Sweeps one hyperparameter family over the toy problem for several seeds and
collects the final per-layer IoU of every run.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from apps.localization.exceptions import ConfigurationError, DivergenceError
from apps.localization.services.run_config import RunConfig
from apps.localization.services.toytrain import generate_problem, train

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ['family', 'value', 'seed', 'layer', 'final_iou']

# "1e9" stands in for the c -> infinity (linear interior) limit
ABLATION_FAMILIES = {
    'ac': [(0.25, 0.25), (0.5, 1e9), (0.5, 0.25), (0.5, 0.125), (1.0, 0.25)],
    'bins': [4, 8, 16, 32, 64],
    'temperature': [1.0, 2.5, 5.0, 7.5, 10.0, 20.0],
}


def _label(family: str, value) -> str:
    if family == 'ac':
        a, c = value
        return f"{a:g}/{c:g}"
    return f"{value:g}"


def apply_ablation_value(base: RunConfig, family: str, value) -> RunConfig:
    """Copy of base with one family value substituted"""
    if family == 'ac':
        a, c = value
        return base.model_copy(update={'weighting': base.weighting.model_copy(update={'a': a, 'c': c})})
    if family == 'bins':
        return base.model_copy(update={'weighting': base.weighting.model_copy(update={'n_bins': int(value)})})
    if family == 'temperature':
        return base.model_copy(update={'temperature': float(value)})
    raise ConfigurationError(f"Unknown ablation family {family!r}; choose from {sorted(ABLATION_FAMILIES)}")


def run_ablation(
    base: RunConfig,
    family: str,
    seeds: Sequence[int],
    values: Optional[Sequence] = None,
) -> Tuple[pd.DataFrame, Dict]:
    """
    Train every (value, seed) cell of one family.

    Args:
        base: Configuration every cell starts from
        family: 'ac', 'bins' or 'temperature'
        seeds: Problem seeds; each cell runs once per seed
        values: Subset of the family's values (defaults to the whole family)

    Returns:
        Tuple of (per-layer rows DataFrame, summary with the seed-averaged
        final-layer IoU per value). Diverged cells get an empty IoU.
    """
    if family not in ABLATION_FAMILIES:
        raise ConfigurationError(f"Unknown ablation family {family!r}; choose from {sorted(ABLATION_FAMILIES)}")
    if not seeds:
        raise ConfigurationError("At least one seed is required")
    values = list(ABLATION_FAMILIES[family] if values is None else values)

    rows: List[Dict] = []
    summary_values = []
    logger.info(f"🧪 Ablation '{family}': {len(values)} values x {len(seeds)} seeds")

    for value in values:
        cell_config = apply_ablation_value(base, family, value)
        train_config = cell_config.to_train_config()
        label = _label(family, value)
        final_layer_ious = []

        for seed in seeds:
            problem = generate_problem(
                seed,
                cell_config.data.num_queries,
                cell_config.data.num_gt,
                cell_config.data.scene_size,
                cell_config.data.noise,
                cell_config.layers,
            )
            try:
                ious = train(problem, train_config).final_iou_per_layer
            except DivergenceError as e:
                logger.warning(f"⚠️ Ablation cell {family}={label} seed={seed} diverged: {e}")
                ious = [None] * cell_config.layers

            for layer, iou in enumerate(ious, start=1):
                rows.append({'family': family, 'value': label, 'seed': seed, 'layer': layer, 'final_iou': iou})
            if ious[-1] is not None:
                final_layer_ious.append(ious[-1])

        summary_values.append({
            'value': label,
            'mean_final_iou': float(np.mean(final_layer_ious)) if final_layer_ious else None,
            'completed_runs': len(final_layer_ious),
        })

    summary = {
        'family': family,
        'seeds': [int(s) for s in seeds],
        'steps': base.train.steps,
        'values': summary_values,
    }
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS), summary
