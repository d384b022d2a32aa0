"""
Target Gating Service
Two sigmoid gates over [previous query, cross-attention output]; the output is
g1 * x1 + g2 * x2 with scalar gates broadcast over the feature vector.

Inputs may carry leading batch dimensions (..., D); parameter gradients are summed
over them.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from apps.localization.exceptions import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GateParams:
    """weight: (2, 2D), bias: (2,)"""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] != 2 or weight.shape[1] % 2:
            raise ShapeError(f"Gate weight must be shaped (2, 2D), got {weight.shape}")
        if bias.shape != (2,):
            raise ShapeError(f"Gate bias must be shaped (2,), got {bias.shape}")
        object.__setattr__(self, 'weight', weight)
        object.__setattr__(self, 'bias', bias)

    @property
    def dim(self) -> int:
        return self.weight.shape[1] // 2


@dataclass(frozen=True, eq=False)
class GateGradients:
    x1: np.ndarray
    x2: np.ndarray
    weight: np.ndarray
    bias: np.ndarray


def init_gate_params(dim: int) -> GateParams:
    """Neutral gate: W = 0, b = 0, so both gates start at 0.5"""
    return GateParams(weight=np.zeros((2, 2 * dim)), bias=np.zeros(2))


def _check_inputs(x1, x2, params: GateParams):
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ShapeError(f"Gate inputs differ in shape: {x1.shape} vs {x2.shape}")
    if x1.ndim == 0 or x1.shape[-1] != params.dim:
        raise ShapeError(f"Gate expects feature size {params.dim}, got {x1.shape}")
    return x1, x2


def gate_values(x1, x2, params: GateParams) -> np.ndarray:
    """g = sigmoid([x1, x2] W^T + b), shape (..., 2)"""
    x1, x2 = _check_inputs(x1, x2, params)
    joined = np.concatenate([x1, x2], axis=-1)
    return expit(joined @ params.weight.T + params.bias)


def gate_forward(x1, x2, params: GateParams) -> np.ndarray:
    x1, x2 = _check_inputs(x1, x2, params)
    gates = gate_values(x1, x2, params)
    return gates[..., 0:1] * x1 + gates[..., 1:2] * x2


def gate_backward(x1, x2, params: GateParams, upstream_grad) -> GateGradients:
    """
    Gradients of <upstream_grad, gate_forward(x1, x2, params)>.

    Args:
        upstream_grad: dL/d(output), same shape as x1

    Returns:
        GateGradients for x1, x2, weight and bias
    """
    x1, x2 = _check_inputs(x1, x2, params)
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if upstream.shape != x1.shape:
        raise ShapeError(f"Upstream gradient {upstream.shape} does not match inputs {x1.shape}")

    joined = np.concatenate([x1, x2], axis=-1)
    gates = expit(joined @ params.weight.T + params.bias)
    d_gates = np.stack([np.sum(upstream * x1, axis=-1), np.sum(upstream * x2, axis=-1)], axis=-1)
    d_pre = d_gates * gates * (1.0 - gates)

    d_joined = d_pre @ params.weight
    dim = params.dim
    return GateGradients(
        x1=gates[..., 0:1] * upstream + d_joined[..., :dim],
        x2=gates[..., 1:2] * upstream + d_joined[..., dim:],
        weight=d_pre.reshape(-1, 2).T @ joined.reshape(-1, 2 * dim),
        bias=d_pre.reshape(-1, 2).sum(axis=0),
    )
