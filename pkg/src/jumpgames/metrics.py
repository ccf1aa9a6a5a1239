"""Relative L2 error metrics over simulated paths.

Arrays are laid out [L, M] for scalars and [L, M, m] for vector controls,
where row n holds the M samples at grid node t_n, n = 0..L-1.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DegenerateMetric, InvalidArgument


def _as_nodes(approx, exact) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(approx, dtype=float)
    e = np.asarray(exact, dtype=float)
    if a.shape != e.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {e.shape}")
    if a.ndim != 2:
        raise InvalidArgument(f"expected [L, M] arrays, got shape {a.shape}")
    return a, e


def _ratios(approx, exact) -> np.ndarray:
    a, e = _as_nodes(approx, exact)
    num = ((a - e) ** 2).sum(axis=1)
    den = (e**2).sum(axis=1)
    out = np.full(a.shape[0], np.nan)
    ok = den > 0
    out[ok] = np.sqrt(num[ok] / den[ok])
    return out


def per_time_l2_errors(approx, exact) -> np.ndarray:
    """e_{t_n} per node; nodes with zero denominator are NaN (absent).

    Vector controls ([L, M, m]) yield the per-node average over dimensions.
    """
    a = np.asarray(approx, dtype=float)
    if a.ndim == 3:
        e = np.asarray(exact, dtype=float)
        if e.shape != a.shape:
            raise InvalidArgument(f"shape mismatch {a.shape} vs {e.shape}")
        return np.mean([_ratios(a[..., k], e[..., k]) for k in range(a.shape[2])], axis=0)
    return _ratios(a, exact)


def error_value(approx, exact, dt: float) -> float:
    """sum_n dt * sqrt(sum_j (v^ - v)^2 / sum_j v^2)."""
    r = _ratios(approx, exact)
    if np.isnan(r).any():
        raise DegenerateMetric(f"zero denominator at node {int(np.flatnonzero(np.isnan(r))[0])}")
    return float(dt * r.sum())


def error_control(approx, exact, dt: float) -> float:
    """error_value per control dimension, averaged over dimensions."""
    a = np.asarray(approx, dtype=float)
    e = np.asarray(exact, dtype=float)
    if a.ndim == 2:
        return error_value(a, e, dt)
    if a.shape != e.shape or a.ndim != 3:
        raise InvalidArgument(f"expected matching [L, M, m] arrays, got {a.shape} and {e.shape}")
    return float(np.mean([error_value(a[..., k], e[..., k], dt) for k in range(a.shape[2])]))


def error_game(value_errors: Sequence[float], control_errors: Sequence[float]) -> tuple[float, float]:
    if len(value_errors) < 1 or len(value_errors) != len(control_errors):
        raise InvalidArgument("need one value and one control error per agent")
    return float(np.mean(value_errors)), float(np.mean(control_errors))
