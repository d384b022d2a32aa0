"""
Weighting Function Service
Non-uniform knot table W(0..N) mapping bin index -> relative edge offset, and the
two-knot bracketing that the FGL loss interpolates against.

Knots are fine near zero (small corrections) and coarse near +/-2a (large ones).
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from apps.localization.exceptions import BinIndexError, ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)

# (a, c) per model size; all sizes use N = 32
WEIGHTING_PRESETS = {
    'x': (0.5, 0.125),
    'l': (0.5, 0.25),
    'm': (0.5, 0.25),
    's': (0.5, 0.25),
}


@dataclass(frozen=True, eq=False)
class WeightingSpec:
    """Coordinate system of every edge distribution: (a, c, N) and the knot table"""
    a: float
    c: float
    n_bins: int
    knots: np.ndarray = field(repr=False)

    @property
    def upper_bound(self) -> float:
        """Largest representable offset, 2a"""
        return float(self.knots[-1])


@dataclass(frozen=True)
class Bracket:
    """Adjacent knots around an offset and their linear interpolation weights"""
    n_left: int
    n_right: int
    w_left: float
    w_right: float


def _knot_table(a: float, c: float, n_bins: int) -> np.ndarray:
    n = np.arange(n_bins + 1)
    base = a / c + 1.0
    # |N - 2n| makes both branches share one power, so W(n) = -W(N - n) bit for bit
    power = base ** (np.abs(n_bins - 2 * n) / (n_bins - 2))
    knots = np.where(2 * n < n_bins, c - c * power, -c + c * power)
    knots[0] = -2.0 * a
    knots[n_bins] = 2.0 * a
    knots.setflags(write=False)
    return knots


def build_spec(a: float = 0.5, c: float = 0.25, n_bins: int = 32) -> WeightingSpec:
    """
    Build a weighting spec and precompute its knot table.

    Args:
        a: Half-scale of the offset bound; knots span [-2a, 2a]
        c: Curvature; very large c approaches an evenly spaced interior
        n_bins: N, even and >= 4 (the exponent divides by N - 2)

    Returns:
        WeightingSpec with N + 1 strictly increasing knots
    """
    if isinstance(n_bins, bool) or int(n_bins) != n_bins:
        raise ConfigurationError(f"n_bins must be an integer, got {n_bins!r}")
    n_bins = int(n_bins)
    if n_bins < 4 or n_bins % 2:
        raise ConfigurationError(f"n_bins must be even and >= 4, got {n_bins}")
    if not (math.isfinite(a) and a > 0):
        raise ConfigurationError(f"a must be finite and > 0, got {a}")
    if not (math.isfinite(c) and c > 0):
        raise ConfigurationError(f"c must be finite and > 0, got {c}")

    knots = _knot_table(float(a), float(c), n_bins)
    logger.debug(f"Built knot table a={a} c={c} N={n_bins}")
    if not np.all(np.diff(knots) > 0):
        raise ConfigurationError(f"Knot table is not strictly increasing for a={a}, c={c}, N={n_bins}")
    return WeightingSpec(a=float(a), c=float(c), n_bins=n_bins, knots=knots)


def build_spec_from_preset(name: str, n_bins: int = 32) -> WeightingSpec:
    """Spec for a named model size ('x', 'l', 'm', 's')"""
    try:
        a, c = WEIGHTING_PRESETS[name.lower()]
    except KeyError:
        raise ConfigurationError(
            f"Unknown weighting preset {name!r}; choose from {sorted(WEIGHTING_PRESETS)}"
        ) from None
    return build_spec(a, c, n_bins)


def eval_w(spec: WeightingSpec, n: int) -> float:
    """W(n) read from the knot table"""
    if isinstance(n, bool) or int(n) != n or not 0 <= int(n) <= spec.n_bins:
        raise BinIndexError(f"Bin index {n!r} outside 0..{spec.n_bins}")
    return float(spec.knots[int(n)])


def bracket(spec: WeightingSpec, phi: float) -> Bracket:
    """
    Adjacent knots around phi (clamped into [W(0), W(N)]) and interpolation weights.

    An exact knot hit m < N returns (m, m+1, 1, 0); phi = W(N) returns (N-1, N, 0, 1).
    """
    if not math.isfinite(phi):
        raise InvalidInputError(f"Offset must be finite, got {phi}")
    n_left, w_left, w_right = bracket_array(spec, np.array([phi], dtype=np.float64))
    return Bracket(
        n_left=int(n_left[0]),
        n_right=int(n_left[0]) + 1,
        w_left=float(w_left[0]),
        w_right=float(w_right[0]),
    )


def bracket_array(spec: WeightingSpec, phi: np.ndarray):
    """
    Vectorised bracket over an array of offsets.

    Returns:
        Tuple of (n_left, w_left, w_right) arrays shaped like phi; n_right = n_left + 1
    """
    phi = np.asarray(phi, dtype=np.float64)
    if not np.all(np.isfinite(phi)):
        raise InvalidInputError("Offsets must be finite")
    knots = spec.knots
    clamped = np.clip(phi, knots[0], knots[-1])
    n_left = np.searchsorted(knots, clamped, side='right') - 1
    n_left = np.clip(n_left, 0, spec.n_bins - 1)
    k_left = knots[n_left]
    k_right = knots[n_left + 1]
    span = k_right - k_left
    w_left = np.abs(clamped - k_right) / span
    w_right = np.abs(clamped - k_left) / span
    return n_left, w_left, w_right


def dump_knots(spec: WeightingSpec):
    """Knot table as a DataFrame with columns n, w"""
    return pd.DataFrame({'n': np.arange(spec.n_bins + 1), 'w': np.asarray(spec.knots)})
