"""Kahler class arithmetic with constant-coefficient representatives.

On a flat torus every harmonic (1,1)-form has constant coefficients, so a class
is just a constant Hermitian matrix and ``[omega](t) = A0 - t B``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass(frozen=True, eq=False)
class ClassVector:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=complex))
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"class matrix must be square, got {m.shape}")
        if np.max(np.abs(m - m.conj().T)) > 1e-13 * max(1.0, np.max(np.abs(m))):
            raise ValueError("class matrix is not Hermitian")
        object.__setattr__(self, "matrix", 0.5 * (m + m.conj().T))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])


def class_at(t: float, a0: ClassVector, b: ClassVector) -> ClassVector:
    return ClassVector(a0.matrix - t * b.matrix)


def max_existence_time(a0: ClassVector, b: ClassVector) -> float:
    """Supremum of ``t > 0`` with ``A0 - t B`` positive definite.

    The crossing is ``1 / mu_max`` for the largest generalized eigenvalue of
    ``B v = mu A0 v``; if no ``mu`` is positive the class never degenerates.
    """
    if a0.n != b.n:
        raise ValueError("class dimensions differ")
    lam0 = a0.min_eigenvalue()
    if lam0 <= 0:
        raise ValueError(f"initial class is not positive: eigenvalue {lam0:.6g}")
    mu = scipy.linalg.eigh(b.matrix, a0.matrix, eigvals_only=True)
    top = float(mu[-1])
    if top <= 0:
        return float("inf")
    return 1.0 / top


def bisect_existence_time(a0: ClassVector, b: ClassVector, t_max: float = 1e6,
                          tol: float = 1e-13) -> float:
    """Reference value of :func:`max_existence_time` by bisection on positivity.

    Only uses the smallest eigenvalue of ``A0 - t B``; returns ``inf`` when
    the class is still positive at ``t_max``.
    """
    def positive(t):
        return class_at(t, a0, b).min_eigenvalue() > 0

    if not positive(0.0):
        raise ValueError("initial class is not positive")
    if positive(t_max):
        return float("inf")
    lo, hi = 0.0, t_max
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
