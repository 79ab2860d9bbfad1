"""Uniform-grid time waveforms, the unit of exchange between the two scales."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TimeRangeError(ValueError):
    """Requested time lies outside the waveform's grid."""


class GridNestingError(ValueError):
    """Fine time grid does not contain the coarse samples."""


@dataclass
class Waveform:
    """Samples on a uniform time grid, endpoints included.

    ``values`` has one row per sample; rows may be DOF vectors, per-element
    fields or scalars (shape (n_samples, ...)).
    """

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.t.ndim != 1 or len(self.t) < 2:
            raise ValueError("waveform needs at least two time samples")
        if self.values.shape[0] != len(self.t):
            raise ValueError("one value row per time sample required")
        steps = np.diff(self.t)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("waveform time grid must be uniform")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    def sample(self, tq: float) -> np.ndarray:
        """Linear interpolation at one time inside the grid."""
        t0, t1 = self.t[0], self.t[-1]
        tol = 1e-9 * (t1 - t0)
        if tq < t0 - tol or tq > t1 + tol:
            raise TimeRangeError(f"t={tq!r} outside [{t0!r}, {t1!r}]")
        s = np.clip((tq - t0) / self.dt, 0.0, self.n_steps)
        k = min(int(s), self.n_steps - 1)
        w = s - k
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def index_of(self, tq: float) -> int:
        """Index of the grid sample coinciding with tq (rejects off-grid times)."""
        s = (tq - self.t[0]) / self.dt
        k = int(round(s))
        if k < 0 or k > self.n_steps or abs(s - k) > 1e-6:
            raise GridNestingError(f"t={tq!r} is not a grid sample of this waveform")
        return k


def constant_waveform(t_grid: np.ndarray, value: np.ndarray) -> Waveform:
    """Constant-in-time extrapolation of one state over a grid."""
    value = np.asarray(value, dtype=float)
    reps = (len(t_grid),) + (1,) * value.ndim
    return Waveform(np.asarray(t_grid, dtype=float), np.tile(value, reps))


def time_grid(t0: float, t1: float, n_steps: int) -> np.ndarray:
    if n_steps < 1 or t1 <= t0:
        raise ValueError(f"need t1 > t0 and n_steps >= 1, got ({t0}, {t1}, {n_steps})")
    return np.linspace(t0, t1, n_steps + 1)


def require_nested(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Indices of the coarse samples inside the fine grid (must coincide)."""
    fine = np.asarray(fine, dtype=float)
    coarse = np.asarray(coarse, dtype=float)
    dt = fine[1] - fine[0]
    pos = (coarse - fine[0]) / dt
    idx = np.round(pos).astype(int)
    if np.any(idx < 0) or np.any(idx >= len(fine)) or np.any(np.abs(pos - idx) > 1e-6):
        raise GridNestingError("coarse grid samples do not lie on the fine grid")
    return idx
