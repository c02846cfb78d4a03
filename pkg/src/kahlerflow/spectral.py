"""Pseudospectral differentiation on the periodic grid.

Complex derivatives are assembled from real-direction derivatives:
``d/dz = (d/dx - i d/dy)/2`` and ``d/dzbar = (d/dx + i d/dy)/2``.  An
operator with complex coefficients acting on a real field is stored as a pair
``(re, im)`` of real-coefficient symbols, so that each part can go through a
real inverse FFT:  ``P u = irfft(re * uhat) + 1j * irfft(im * uhat)``.

First-derivative tables have the Nyquist entry zeroed; every higher operator is
built as a product of first-derivative tables so the convention propagates.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .torus import (
    HermitianField,
    ScalarField,
    TorusDomain,
    _check_same,
    det_array,
    inverse_field,
    trace_product_array,
)


class SpectralWorkspace:
    """Wavenumber tables, operator symbols and the dealias mask for a domain.

    Treat instances as read-only; :func:`workspace` caches one per domain.
    """

    def __init__(self, domain: TorusDomain):
        self.domain = domain
        shape = domain.shape
        ndim = len(shape)
        self.axes = tuple(range(ndim))
        self.wavenumbers = []      # 2 pi k / L on the half spectrum
        self.mode_index = []       # integer k on the half spectrum
        d1 = []
        for d, (g, p) in enumerate(zip(shape, domain.periods)):
            if d == ndim - 1:
                k = np.fft.rfftfreq(g, 1.0 / g)
            else:
                k = np.fft.fftfreq(g, 1.0 / g)
            bshape = [1] * ndim
            bshape[d] = k.size
            kk = (2 * np.pi / p) * k
            self.mode_index.append(k.reshape(bshape))
            self.wavenumbers.append(kk.reshape(bshape))
            sym = 1j * kk
            sym[np.abs(k) == g // 2] = 0.0
            d1.append(sym.reshape(bshape))
        self.d1 = d1
        mask = True
        for d, m in enumerate(self.mode_index):
            mask = mask & (np.abs(m) <= shape[d] // 3)
        self.dealias_mask = np.broadcast_to(mask, self._half_shape()).copy()

        n = domain.n
        # (re, im) pairs for d/dz_i and d/dzbar_i
        self.dz = [(0.5 * d1[2 * i], -0.5 * d1[2 * i + 1]) for i in range(n)]
        self.dzbar = [(0.5 * d1[2 * i], 0.5 * d1[2 * i + 1]) for i in range(n)]
        self.hessian = {}
        for i in range(n):
            for j in range(i, n):
                re, im = _mul(self.dz[i], self.dzbar[j])
                re = np.broadcast_to(re, self._half_shape()).copy()
                im = np.broadcast_to(im, self._half_shape()).copy()
                self.hessian[(i, j)] = (re, None if not np.any(im) else im)
        # -(Laplacian symbol)/4 summed over all real directions, used for
        # stability bounds: |symbol of d_i dbar_i| summed over i.
        band = self.dealias_mask
        lap = sum(-(self.hessian[(i, i)][0]).real for i in range(n))
        self.max_hessian_symbol = float(np.max(lap))
        self.max_hessian_symbol_dealiased = float(np.max(np.where(band, lap, 0.0)))

    def _half_shape(self):
        s = list(self.domain.shape)
        s[-1] = s[-1] // 2 + 1
        return tuple(s)

    def forward(self, u: np.ndarray) -> np.ndarray:
        return sfft.rfftn(u, axes=self.axes)

    def inverse(self, uhat: np.ndarray) -> np.ndarray:
        return sfft.irfftn(uhat, s=self.domain.shape, axes=self.axes)

    def apply(self, op, uhat: np.ndarray) -> np.ndarray:
        """Apply a ``(re, im)`` operator to the spectrum of a real field."""
        re, im = op
        out = self.inverse(re * uhat)
        if im is None:
            return out
        return out + 1j * self.inverse(im * uhat)

    def hessian_entries(self, uhat: np.ndarray) -> np.ndarray:
        """Raw ``(..., n, n)`` complex Hessian ``u_{i jbar}`` from a spectrum."""
        n = self.domain.n
        out = np.empty(self.domain.shape + (n, n), dtype=complex)
        for i in range(n):
            for j in range(i, n):
                v = self.apply(self.hessian[(i, j)], uhat)
                out[..., i, j] = v
                if i != j:
                    out[..., j, i] = np.conj(v)
        return out

    def dealias_real(self, u: np.ndarray) -> np.ndarray:
        return self.inverse(self.dealias_mask * self.forward(u))


def _mul(a, b):
    """Product of two (re, im) operator pairs."""
    ar, ai = a
    br, bi = b
    return ar * br - ai * bi, ar * bi + ai * br


@lru_cache(maxsize=32)
def workspace(domain: TorusDomain) -> SpectralWorkspace:
    return SpectralWorkspace(domain)


def _real_values(u: ScalarField) -> np.ndarray:
    v = u.values
    if np.iscomplexobj(v):
        v = u.real().values
    return v


def complex_hessian(u: ScalarField) -> HermitianField:
    """``u_{i jbar} = d^2 u / dz^i dzbar^j`` for a real field ``u``."""
    ws = workspace(u.domain)
    return HermitianField(u.domain, ws.hessian_entries(ws.forward(_real_values(u))))


def gradient_dz(u: ScalarField) -> np.ndarray:
    """Stack ``(..., n)`` of ``du/dz^i``."""
    ws = workspace(u.domain)
    uhat = ws.forward(_real_values(u))
    return np.stack([ws.apply(op, uhat) for op in ws.dz], axis=-1)


def laplacian(u: ScalarField, g: HermitianField) -> ScalarField:
    """``g^{i jbar} u_{i jbar}``."""
    _check_same(u.domain, g.domain)
    inv = inverse_field(g)
    return ScalarField(u.domain, trace_product_array(inv.entries, complex_hessian(u).entries))


def gradient_norm_sq(u: ScalarField, g: HermitianField) -> ScalarField:
    """``g^{i jbar} u_i u_jbar`` (a quarter of the real gradient norm for g = I)."""
    _check_same(u.domain, g.domain)
    p = inverse_field(g).entries
    du = gradient_dz(u)
    n = u.domain.n
    val = sum((p[..., j, i] * du[..., i] * np.conj(du[..., j])).real
              for i in range(n) for j in range(n))
    return ScalarField(u.domain, val)


def mean_normalize(u: ScalarField, density: ScalarField | None = None) -> ScalarField:
    """Subtract the density-weighted mean so that the result integrates to 0."""
    v = u.values
    if density is None:
        return ScalarField(u.domain, v - np.mean(v))
    _check_same(u.domain, density.domain)
    w = density.values
    return ScalarField(u.domain, v - np.sum(v * w) / np.sum(w))


def third_order_derivatives(u: ScalarField) -> np.ndarray:
    """``T[..., i, j, k] = d/dz^k u_{i jbar}``."""
    ws = workspace(u.domain)
    n = u.domain.n
    uhat = ws.forward(_real_values(u))
    out = np.empty(u.domain.shape + (n, n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            hij = _mul(ws.dz[i], ws.dzbar[j])
            for k in range(n):
                out[..., i, j, k] = ws.apply(_mul(hij, ws.dz[k]), uhat)
    return out


def third_order_S(u: ScalarField, g_tilde: HermitianField) -> ScalarField:
    """Calabi's third-order quantity: the g_tilde norm of ``u_{i jbar k}``."""
    _check_same(u.domain, g_tilde.domain)
    p = inverse_field(g_tilde).entries
    t = third_order_derivatives(u)
    n = u.domain.n
    rng = range(n)
    w = {(r, j, k): sum(p[..., r, i] * t[..., i, j, k] for i in rng)
         for r in rng for j in rng for k in rng}
    w = {(r, s, k): sum(p[..., j, s] * w[r, j, k] for j in rng)
         for r in rng for s in rng for k in rng}
    total = 0.0
    for (r, s, k), v in w.items():
        for tt in rng:
            total = total + (p[..., tt, k] * v * np.conj(t[..., r, s, tt])).real
    return ScalarField(u.domain, total)


def dealias(u: ScalarField) -> ScalarField:
    """Zero every Fourier mode above two thirds of the Nyquist index."""
    ws = workspace(u.domain)
    v = u.values
    if np.iscomplexobj(v):
        full = np.ones(u.domain.shape, bool)
        for d, m in enumerate(u.domain.shape):
            k = np.fft.fftfreq(m, 1.0 / m)
            shape = [1] * len(u.domain.shape)
            shape[d] = m
            full = full & (np.abs(k) <= m // 3).reshape(shape)
        return ScalarField(u.domain, sfft.ifftn(full * sfft.fftn(v)))
    return ScalarField(u.domain, ws.dealias_real(v))


def hessian_volume_density(u: ScalarField, g: HermitianField) -> ScalarField:
    """``det(g + ddbar u)``; convenience for weighted means."""
    return ScalarField(u.domain, det_array(g.entries + complex_hessian(u).entries))
