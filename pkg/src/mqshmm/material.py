"""Isotropic magnetic constitutive laws h(b) with consistent tangents.

Laws are vectorized over trailing flux-density axes shaped (..., 2) so the
assembly kernels can evaluate whole meshes at once.  The saturating law is
the single-valued exponential model h = (alpha + beta*exp(gamma |b|^2)) b,
with coefficients in reluctivity units (A m / V s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MU0 = 4.0e-7 * math.pi
NU0 = 1.0 / MU0

#: largest gamma*|b|^2 accepted before exp() would drown in overflow
_EXP_ARG_MAX = 700.0


class NumericDomainError(ValueError):
    """Flux density outside the law's overflow-safe evaluation range."""


@dataclass(frozen=True)
class Linear:
    """h = nu * b."""

    nu: float

    def __post_init__(self):
        if self.nu <= 0.0:
            raise ValueError(f"reluctivity must be positive, got {self.nu}")

    def h_of_b(self, b: np.ndarray) -> np.ndarray:
        return self.nu * np.asarray(b, dtype=float)

    def dh_db(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        out = np.zeros(b.shape[:-1] + (2, 2))
        out[..., 0, 0] = self.nu
        out[..., 1, 1] = self.nu
        return out

    def coenergy_density(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return 0.5 * self.nu * np.sum(b * b, axis=-1)


@dataclass(frozen=True)
class Brauer:
    """Exponentially saturating law h = (alpha + beta e^{gamma |b|^2}) b.

    The tangent is nu(|b|^2) I + 2 beta gamma e^{gamma |b|^2} (b x b), which
    is symmetric positive definite for alpha > 0, beta, gamma >= 0, so Newton
    tangents assembled from it stay SPD.
    """

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if self.alpha <= 0.0 or self.beta < 0.0 or self.gamma < 0.0:
            raise ValueError(
                f"need alpha > 0, beta >= 0, gamma >= 0, got "
                f"({self.alpha}, {self.beta}, {self.gamma})")

    def _exp_term(self, b2: np.ndarray) -> np.ndarray:
        arg = self.gamma * b2
        if np.any(arg > _EXP_ARG_MAX):
            raise NumericDomainError(
                f"gamma*|b|^2 up to {np.max(arg):.3g} exceeds the safe range")
        return np.exp(arg)

    def h_of_b(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        b2 = np.sum(b * b, axis=-1)
        nu = self.alpha + self.beta * self._exp_term(b2)
        return nu[..., None] * b

    def dh_db(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        b2 = np.sum(b * b, axis=-1)
        e = self._exp_term(b2)
        nu = self.alpha + self.beta * e
        out = np.zeros(b.shape[:-1] + (2, 2))
        out[..., 0, 0] = nu
        out[..., 1, 1] = nu
        dyad = 2.0 * self.beta * self.gamma * e
        out += dyad[..., None, None] * (b[..., :, None] * b[..., None, :])
        return out

    def coenergy_density(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        b2 = np.sum(b * b, axis=-1)
        if self.gamma == 0.0:
            return 0.5 * (self.alpha + self.beta) * b2
        e = self._exp_term(b2)
        return 0.5 * self.alpha * b2 + self.beta / (2.0 * self.gamma) * (e - 1.0)
