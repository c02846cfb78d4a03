"""Flat complex tori, sampled fields, and pointwise Hermitian algebra.

Real coordinates are ordered ``(x1, y1, x2, y2)`` with ``z^i = x^i + i y^i``.
A Hermitian field stores ``H[..., i, j] = g_{i jbar}`` in full (both
triangles) so that every pointwise formula below can be written with plain
matrix indexing.  Only complex dimensions 1 and 2 are supported; all
determinants, inverses and eigenvalues are closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HERMITIAN_TOL = 1e-13
DEGENERATE_DET = 1e-12


class DegenerateMetric(ArithmeticError):
    """A field expected to be positive definite is not.

    ``location`` is the multi-index of the worst grid point and ``value`` the
    smallest eigenvalue (or determinant) found there.
    """

    def __init__(self, message: str, location=None, value: float | None = None):
        super().__init__(message)
        self.location = location
        self.value = value


def _is_pow2(k: int) -> bool:
    return k > 0 and (k & (k - 1)) == 0


@dataclass(frozen=True)
class TorusDomain:
    """Rectangular flat torus C^n / Lambda sampled on a uniform grid.

    ``grid`` and ``periods`` hold one entry per *real* direction, i.e. ``2n``
    entries. Scalars are broadcast.
    """

    n: int
    grid: tuple[int, ...]
    periods: tuple[float, ...] = ()

    def __post_init__(self):
        n = int(self.n)
        if n not in (1, 2):
            raise ValueError(f"complex dimension must be 1 or 2, got {n}")
        grid = self.grid
        if np.isscalar(grid):
            grid = (int(grid),) * (2 * n)
        grid = tuple(int(g) for g in grid)
        if len(grid) == n:
            grid = tuple(g for g in grid for _ in range(2))
        if len(grid) != 2 * n:
            raise ValueError(f"need {2 * n} grid counts, got {len(grid)}")
        for g in grid:
            if g < 8 or g % 2:
                raise ValueError(f"grid counts must be even and >= 8, got {g}")
            if not _is_pow2(g):
                raise ValueError(f"grid must be a power of two, got {g}")
        periods = self.periods
        if periods is None or (not np.isscalar(periods) and len(periods) == 0):
            periods = 1.0
        if np.isscalar(periods):
            periods = (float(periods),) * (2 * n)
        periods = tuple(float(p) for p in periods)
        if len(periods) != 2 * n or any(p <= 0 for p in periods):
            raise ValueError(f"need {2 * n} positive periods, got {periods}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "periods", periods)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grid

    @property
    def size(self) -> int:
        return int(np.prod(self.grid))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(p / g for p, g in zip(self.periods, self.grid))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.periods))

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per real direction."""
        out = []
        for d, (g, p) in enumerate(zip(self.grid, self.periods)):
            shape = [1] * len(self.grid)
            shape[d] = g
            out.append((np.arange(g) * (p / g)).reshape(shape))
        return out


@dataclass(frozen=True, eq=False)
class ScalarField:
    domain: TorusDomain
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.domain.shape:
            if v.size != self.domain.size:
                raise ValueError(
                    f"expected {self.domain.size} samples, got {v.size}")
            v = v.reshape(self.domain.shape)
        object.__setattr__(self, "values", v)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.values)

    def real(self) -> "ScalarField":
        v = self.values
        if np.iscomplexobj(v):
            im = np.max(np.abs(v.imag)) if v.size else 0.0
            if im > 1e-10 * max(1.0, np.max(np.abs(v.real))):
                raise ValueError(f"field has imaginary part of size {im:.3e}")
            v = v.real.copy()
        return ScalarField(self.domain, v)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def _wrap(self, other):
        if isinstance(other, ScalarField):
            _check_same(self.domain, other.domain)
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.domain, self.values + self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.domain, self.values - self._wrap(other))

    def __rsub__(self, other):
        return ScalarField(self.domain, self._wrap(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.domain, self.values * self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.domain, -self.values)


@dataclass(frozen=True, eq=False)
class HermitianField:
    domain: TorusDomain
    entries: np.ndarray
    metric: bool = field(default=False)

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=complex)
        n = self.domain.n
        if e.shape != self.domain.shape + (n, n):
            raise ValueError(
                f"entries shape {e.shape} does not match grid {self.domain.shape} x {n}x{n}")
        object.__setattr__(self, "entries", e)

    @property
    def n(self) -> int:
        return self.domain.n

    def hermitian_defect(self) -> float:
        e = self.entries
        return float(np.max(np.abs(e - np.conj(np.swapaxes(e, -1, -2)))))

    def __add__(self, other: "HermitianField") -> "HermitianField":
        _check_same(self.domain, other.domain)
        return HermitianField(self.domain, symmetrize(self.entries + other.entries))

    def __sub__(self, other: "HermitianField") -> "HermitianField":
        _check_same(self.domain, other.domain)
        return HermitianField(self.domain, symmetrize(self.entries - other.entries))

    def scale(self, c: float) -> "HermitianField":
        return HermitianField(self.domain, self.entries * c, self.metric and c > 0)


def _check_same(a: TorusDomain, b: TorusDomain) -> None:
    if a != b:
        raise ValueError(f"domain mismatch: {a} vs {b}")


def symmetrize(e: np.ndarray) -> np.ndarray:
    return 0.5 * (e + np.conj(np.swapaxes(e, -1, -2)))


# -- raw pointwise kernels on (..., n, n) arrays ------------------------------

def det_array(e: np.ndarray) -> np.ndarray:
    n = e.shape[-1]
    if n == 1:
        return e[..., 0, 0].real
    if n == 2:
        a = e[..., 0, 0].real
        d = e[..., 1, 1].real
        b = e[..., 0, 1]
        return a * d - (b.real ** 2 + b.imag ** 2)
    raise ValueError("only n <= 2 is supported")


def adjugate_array(e: np.ndarray) -> np.ndarray:
    """Pointwise adjugate, so that ``e @ adj = det * I``."""
    n = e.shape[-1]
    if n == 1:
        return np.ones_like(e)
    out = np.empty_like(e)
    out[..., 0, 0] = e[..., 1, 1]
    out[..., 1, 1] = e[..., 0, 0]
    out[..., 0, 1] = -e[..., 0, 1]
    out[..., 1, 0] = -e[..., 1, 0]
    return out


def min_eig_array(e: np.ndarray) -> np.ndarray:
    n = e.shape[-1]
    if n == 1:
        return e[..., 0, 0].real
    a = e[..., 0, 0].real
    d = e[..., 1, 1].real
    b = e[..., 0, 1]
    half_gap = np.sqrt((0.5 * (a - d)) ** 2 + b.real ** 2 + b.imag ** 2)
    return 0.5 * (a + d) - half_gap


def max_eig_array(e: np.ndarray) -> np.ndarray:
    n = e.shape[-1]
    if n == 1:
        return e[..., 0, 0].real
    a = e[..., 0, 0].real
    d = e[..., 1, 1].real
    b = e[..., 0, 1]
    return 0.5 * (a + d) + np.sqrt((0.5 * (a - d)) ** 2 + b.real ** 2 + b.imag ** 2)


def trace_product_array(p: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``sum_ij p[j, i] a[i, j]``, i.e. ``tr(p @ a)``, real part."""
    n = p.shape[-1]
    return sum((p[..., j, i] * a[..., i, j]).real for i in range(n) for j in range(n))


def relative_eigs_array(g0: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Extreme eigenvalues of ``g0^{-1} g`` (both Hermitian, g0 positive)."""
    n = g.shape[-1]
    if n == 1:
        r = g[..., 0, 0].real / g0[..., 0, 0].real
        return r, r
    tau = trace_product_array(adjugate_array(g0), g) / det_array(g0)
    delta = det_array(g) / det_array(g0)
    disc = np.sqrt(np.maximum(0.25 * tau * tau - delta, 0.0))
    return 0.5 * tau - disc, 0.5 * tau + disc


def _worst(values: np.ndarray):
    idx = np.unravel_index(np.argmin(values), values.shape)
    return tuple(int(i) for i in idx), float(values[idx])


# -- public operations ---------------------------------------------------------

def make_flat_metric(domain: TorusDomain, coeff) -> HermitianField:
    """Constant metric ``coeff`` on ``domain``; rejects non-positive matrices."""
    c = np.atleast_2d(np.asarray(coeff, dtype=complex))
    n = domain.n
    if c.shape != (n, n):
        raise ValueError(f"coefficient must be {n}x{n}, got shape {c.shape}")
    if np.max(np.abs(c - c.conj().T)) > 1e-12:
        raise ValueError("coefficient matrix is not Hermitian")
    c = 0.5 * (c + c.conj().T)
    eigs = np.linalg.eigvalsh(c)
    if eigs[0] <= 0:
        raise DegenerateMetric(
            f"background coefficient is not positive definite: eigenvalue {eigs[0]:.6g}",
            value=float(eigs[0]))
    entries = np.broadcast_to(c, domain.shape + (n, n)).copy()
    return HermitianField(domain, entries, metric=True)


def perturb_metric(g: HermitianField, psi: ScalarField) -> HermitianField:
    """``g + ddbar psi``. Positivity is left to the caller."""
    from .spectral import complex_hessian

    _check_same(g.domain, psi.domain)
    hess = complex_hessian(psi)
    return HermitianField(g.domain, symmetrize(g.entries + hess.entries))


def det_field(h: HermitianField) -> ScalarField:
    return ScalarField(h.domain, det_array(h.entries))


def inverse_field(h: HermitianField) -> HermitianField:
    det = det_array(h.entries)
    if np.min(np.abs(det)) < DEGENERATE_DET:
        loc, val = _worst(np.abs(det))
        raise DegenerateMetric(
            f"field is singular at grid point {loc}: |det| = {val:.3e}", loc, val)
    inv = adjugate_array(h.entries) / det[..., None, None]
    return HermitianField(h.domain, symmetrize(inv), metric=h.metric)


def min_eigenvalue_field(h: HermitianField) -> ScalarField:
    return ScalarField(h.domain, min_eig_array(h.entries))


def check_positive(h: HermitianField, what: str = "metric") -> float:
    """Raise DegenerateMetric unless ``h`` is positive definite everywhere."""
    lam = min_eig_array(h.entries)
    loc, val = _worst(lam)
    if not val > 0:
        raise DegenerateMetric(
            f"{what} lost positivity at grid point {loc}: min eigenvalue {val:.6g}",
            loc, val)
    return val


def trace_pair(alpha: HermitianField, g: HermitianField) -> ScalarField:
    """``g^{i jbar} alpha_{i jbar}``."""
    _check_same(alpha.domain, g.domain)
    inv = inverse_field(g)
    return ScalarField(g.domain, trace_product_array(inv.entries, alpha.entries))


def integrate(phi: ScalarField, density: ScalarField | None = None) -> float | complex:
    """Rectangle-rule integral of ``phi * density`` over the torus."""
    v = phi.values
    if density is not None:
        _check_same(phi.domain, density.domain)
        v = v * density.values
    total = np.sum(v) * phi.domain.cell_volume
    return complex(total) if np.iscomplexobj(total) else float(total)


def fourier_modes_field(domain: TorusDomain, modes: Sequence) -> ScalarField:
    """Real trigonometric polynomial ``sum A cos(2 pi k.x/L + phase)``.

    ``modes`` is a sequence of ``(k, amplitude, phase)`` with ``k`` an integer
    vector of length ``2n``.
    """
    xs = domain.coords()
    out = np.zeros(domain.shape)
    for k, amp, phase in modes:
        k = tuple(int(v) for v in k)
        if len(k) != 2 * domain.n:
            raise ValueError(f"mode index {k} needs {2 * domain.n} entries")
        arg = float(phase)
        for kd, x, p in zip(k, xs, domain.periods):
            arg = arg + 2 * np.pi * kd * x / p
        out = out + float(amp) * np.cos(arg)
    return ScalarField(domain, out)
