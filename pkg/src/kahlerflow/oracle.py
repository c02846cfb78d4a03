"""Stationary solvers used as independent references for the flow limits.

Nothing here touches :mod:`kahlerflow.spectral` or the flow code.  The
derivative symbols are rebuilt from scratch on the *full* complex spectrum
(the integrator works on the real half spectrum and zeroes first-derivative
Nyquist entries), so the two paths share only the FFT itself.

Equations, with ``gt = g0 + ddbar u``:

* ``"n1"``:    log(gt / g0) + f - c = 0                      (n = 1, linear in u_zzbar)
* ``"ma"``:    log det gt - log det g0 - F - c = 0,  mean u = 0
* ``"aubin"``: log det gt - log det g0 - u + f = 0
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import LinearOperator, cg, gmres

from .torus import DegenerateMetric, HermitianField, ScalarField, TorusDomain

log = logging.getLogger(__name__)


class NonConvergence(RuntimeError):
    def __init__(self, message: str, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


@dataclass
class NewtonConfig:
    max_iter: int = 30
    tol: float = 1e-11
    max_halvings: int = 30
    inner_tol: float = 1e-4
    inner_maxiter: int = 500

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.max_halvings < 0 or not self.inner_tol > 0:
            raise ValueError("bad damping or inner tolerance setting")


@dataclass
class NewtonResult:
    u: ScalarField
    c: float
    residuals: list = field(default_factory=list)
    iterations: int = 0
    linear_iterations: list = field(default_factory=list)


# -- private spectral helpers (full complex spectrum) -----------------------------

class _Symbols:
    def __init__(self, dom: TorusDomain):
        self.dom = dom
        k = []
        for d, (g, p) in enumerate(zip(dom.shape, dom.periods)):
            shape = [1] * len(dom.shape)
            shape[d] = g
            k.append((2 * np.pi / p * np.fft.fftfreq(g, 1.0 / g)).reshape(shape))
        n = dom.n
        # symbol of d/dz_i is (i kx + ky)/2, of d/dzbar_j is (i kx - ky)/2
        dz = [0.5 * (1j * k[2 * i] + k[2 * i + 1]) for i in range(n)]
        dzb = [0.5 * (1j * k[2 * i] - k[2 * i + 1]) for i in range(n)]
        self.hess = [[np.broadcast_to(dz[i] * dzb[j], dom.shape) for j in range(n)]
                     for i in range(n)]
        self.lap = sum(self.hess[i][i].real for i in range(n))   # -(|k|^2)/4 summed

    def fwd(self, v):
        return sfft.fftn(v)

    def inv(self, vh):
        return sfft.ifftn(vh)

    def hessian(self, v):
        """List-of-lists ``H[i][j] = v_{i jbar}`` (complex arrays)."""
        vh = self.fwd(v)
        n = self.dom.n
        return [[self.inv(self.hess[i][j] * vh) for j in range(n)] for i in range(n)]


_SYMBOL_CACHE: dict = {}


def _symbols(dom: TorusDomain) -> _Symbols:
    s = _SYMBOL_CACHE.get(dom)
    if s is None:
        s = _SYMBOL_CACHE[dom] = _Symbols(dom)
    return s


def _entries(g0: HermitianField):
    e = g0.entries
    n = g0.domain.n
    return [[e[..., i, j] for j in range(n)] for i in range(n)]


def _metric(g0, hess):
    n = len(hess)
    return [[g0[i][j] + hess[i][j] for j in range(n)] for i in range(n)]


def _det(m):
    if len(m) == 1:
        return m[0][0].real
    return (m[0][0] * m[1][1] - m[0][1] * m[1][0]).real


def _adj(m):
    if len(m) == 1:
        return [[np.ones_like(m[0][0])]]
    return [[m[1][1], -m[0][1]], [-m[1][0], m[0][0]]]


def _min_eig(m):
    if len(m) == 1:
        return m[0][0].real
    a, d = m[0][0].real, m[1][1].real
    b2 = np.abs(m[0][1]) ** 2
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + b2)


def _trace(adj, hess):
    """``sum_ij adj^{j i} h_{i jbar}``, the contraction used by the linearisation."""
    n = len(adj)
    return sum(adj[j][i] * hess[i][j] for i in range(n) for j in range(n)).real


def _as_scalar(u, dom):
    return u.values.real if isinstance(u, ScalarField) else np.asarray(u, float)


# -- n = 1: direct Poisson inversion ----------------------------------------------

def solve_stationary_n1(f: ScalarField, g0) -> tuple[ScalarField, float]:
    """Solve ``log(1 + u_zzbar / g0) + f = c`` on a one-dimensional complex torus.

    ``c`` is fixed by requiring ``e^{c - f} - 1`` to integrate to zero, then
    ``u`` is the mean-zero spectral solution of ``u_zzbar = g0 (e^{c-f} - 1)``.
    ``g0`` is a positive constant or a constant 1x1 metric field.
    """
    dom = f.domain
    if dom.n != 1:
        raise ValueError("solve_stationary_n1 needs complex dimension 1")
    if isinstance(g0, HermitianField):
        vals = g0.entries[..., 0, 0].real
        if np.ptp(vals) > 1e-14 * abs(vals.flat[0]):
            raise ValueError("g0 must have constant coefficients")
        g0 = float(vals.flat[0])
    g0 = float(g0)
    if not g0 > 0:
        raise ValueError(f"g0 must be positive, got {g0}")
    fv = _as_scalar(f, dom)
    # stable log-mean-exp of -f
    m = float(np.max(-fv))
    c = -(m + math.log(float(np.mean(np.exp(-fv - m)))))
    rhs = g0 * np.expm1(c - fv)
    rhs = rhs - np.mean(rhs)
    s = _symbols(dom)
    sym = s.lap.copy()
    sym.flat[0] = 1.0
    uh = s.fwd(rhs) / sym
    uh.flat[0] = 0.0
    return ScalarField(dom, s.inv(uh).real), c


# -- residuals ----------------------------------------------------------------------

def _ma_constant(g0e, gt, F):
    """Solvability constant: equal volumes of ``gt`` and ``e^{F+c} g0``."""
    d0 = _det(g0e)
    return math.log(float(np.sum(_det(gt))) / float(np.sum(np.exp(F) * d0)))


def residual_sup(u: ScalarField, equation: str, g0: HermitianField | float,
                 f: ScalarField | None = None, c: float | None = None) -> float:
    """Sup norm of a stationary equation at ``u``.

    ``equation`` is ``"n1"`` (``f`` is the flow forcing), ``"ma"`` (``f`` is
    the right-hand side ``F``) or ``"aubin"``.  When ``c`` is omitted for
    ``"n1"``/``"ma"`` the solvability constant implied by ``u`` is used.
    """
    dom = u.domain
    s = _symbols(dom)
    uv = _as_scalar(u, dom)
    if not isinstance(g0, HermitianField):
        from .torus import make_flat_metric
        g0 = make_flat_metric(dom, [[g0]] if dom.n == 1 else g0)
    g0e = _entries(g0)
    fv = np.zeros(dom.shape) if f is None else _as_scalar(f, dom)
    gt = _metric(g0e, s.hessian(uv))
    lam = _min_eig(gt)
    if not np.min(lam) > 0:
        raise DegenerateMetric(f"g0 + ddbar u is not positive: min eigenvalue {np.min(lam):.6g}",
                               value=float(np.min(lam)))
    lr = np.log(_det(gt)) - np.log(_det(g0e))
    if equation == "aubin":
        return float(np.max(np.abs(lr - uv + fv)))
    if equation == "n1":
        if c is None:
            c = _ma_constant(g0e, gt, -fv)
        return float(np.max(np.abs(lr + fv - c)))
    if equation == "ma":
        if c is None:
            c = _ma_constant(g0e, gt, fv)
        return float(np.max(np.abs(lr - fv - c)))
    raise ValueError(f"unknown equation {equation!r}; expected 'n1', 'ma' or 'aubin'")


# -- damped Newton-Krylov -----------------------------------------------------------

class _Newton:
    def __init__(self, g0: HermitianField, rhs: ScalarField, aubin: bool, cfg: NewtonConfig):
        self.dom = g0.domain
        self.s = _symbols(self.dom)
        self.g0e = _entries(g0)
        lam0 = float(np.min(_min_eig(self.g0e)))
        if not lam0 > 0:
            raise DegenerateMetric("background metric is not positive", value=lam0)
        self.logdet0 = np.log(_det(self.g0e))
        self.rhs = _as_scalar(rhs, self.dom)
        self.aubin = aubin
        self.cfg = cfg

    def evaluate(self, u, c):
        gt = _metric(self.g0e, self.s.hessian(u))
        lam = float(np.min(_min_eig(gt)))
        if not lam > 0:
            return gt, lam, None
        lr = np.log(_det(gt)) - self.logdet0
        if self.aubin:
            G = lr - u + self.rhs
        else:
            G = lr - self.rhs - c
        return gt, lam, G

    def solve_linear(self, gt, G, rtol):
        """Solve the det-weighted linearisation for the Newton update."""
        dom, s = self.dom, self.s
        shape = dom.shape
        det = _det(gt)
        adj = _adj(gt)
        n = dom.n
        if self.aubin:
            b = det * G
            dc = 0.0
        else:
            dc = float(np.sum(det * G) / np.sum(det))
            b = det * (G - dc)
            b = b - np.mean(b)

        def matvec(x):
            x = x.reshape(shape)
            hess = s.hessian(x)
            y = -_trace(adj, hess)
            if self.aubin:
                y = y + det * x
            else:
                y = y - np.mean(y)
            return y.ravel()

        # frozen mean-coefficient operator as preconditioner
        sym = -sum(np.mean(adj[j][i]) * s.hess[i][j] for i in range(n) for j in range(n)).real
        if self.aubin:
            sym = sym + np.mean(det)
        else:
            sym = sym.copy()
            sym.flat[0] = 1.0

        def precond(r):
            rh = s.fwd(r.reshape(shape)) / sym
            if not self.aubin:
                rh.flat[0] = 0.0
            return s.inv(rh).real.ravel()

        N = int(np.prod(shape))
        A = LinearOperator((N, N), matvec=matvec, dtype=float)
        M = LinearOperator((N, N), matvec=precond, dtype=float)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = cg(A, b.ravel(), rtol=rtol, atol=0.0, maxiter=self.cfg.inner_maxiter,
                     M=M, callback=cb)
        if info != 0:
            log.info("CG did not reach rtol=%.1e (info=%d); retrying with GMRES", rtol, info)
            x, info = gmres(A, b.ravel(), x0=x, rtol=rtol, atol=0.0, restart=60,
                            maxiter=self.cfg.inner_maxiter, M=M, callback=cb,
                            callback_type="pr_norm")
        x = x.reshape(shape)
        if not self.aubin:
            x = x - np.mean(x)
        return x, dc, count[0]

    def run(self) -> NewtonResult:
        cfg = self.cfg
        u = np.zeros(self.dom.shape)
        if self.aubin:
            c = 0.0
        else:
            c = _ma_constant(self.g0e, self.g0e, self.rhs)
        gt, lam, G = self.evaluate(u, c)
        if G is None:
            raise DegenerateMetric("background metric is not positive", value=lam)
        r = float(np.max(np.abs(G)))
        history, inner = [r], []
        it = 0
        while r > cfg.tol:
            if it >= cfg.max_iter:
                raise NonConvergence(
                    f"Newton stopped after {it} iterations with residual {r:.3e}", history)
            rtol = max(1e-14, min(cfg.inner_tol, 0.1 * r))
            du, dc, nlin = self.solve_linear(gt, G, rtol)
            inner.append(nlin)
            alpha = 1.0
            for _ in range(cfg.max_halvings + 1):
                u_try = u + alpha * du
                c_try = c + alpha * dc
                gt_try, lam_try, G_try = self.evaluate(u_try, c_try)
                if G_try is not None and lam_try >= 0.5 * lam:
                    r_try = float(np.max(np.abs(G_try)))
                    if r_try < r:
                        break
                alpha *= 0.5
            else:
                if G_try is None or lam_try < 0.5 * lam:
                    raise DegenerateMetric(
                        f"damping could not keep g0 + ddbar u positive (min eigenvalue "
                        f"{lam_try:.3e}) at iteration {it}", value=lam_try)
                raise NonConvergence(
                    f"no residual decrease after {cfg.max_halvings} halvings at iteration {it} "
                    f"(residual {r:.3e})", history)
            u, c, gt, lam, G, r = u_try, c_try, gt_try, lam_try, G_try, r_try
            history.append(r)
            it += 1
            log.debug("newton %d: residual %.3e alpha %.3g inner %d", it, r, alpha, nlin)
        return NewtonResult(ScalarField(self.dom, u), float(c), history, it, inner)


def solve_ma(g0: HermitianField, F: ScalarField, cfg: NewtonConfig | None = None) -> NewtonResult:
    """``det(g0 + ddbar u) = e^{F + c} det g0`` with mean-zero ``u``; full history."""
    return _Newton(g0, F, aubin=False, cfg=cfg or NewtonConfig()).run()


def solve_aubin(g0: HermitianField, f: ScalarField, cfg: NewtonConfig | None = None) -> NewtonResult:
    """``log det(g0 + ddbar u) - log det g0 - u + f = 0``; full history."""
    return _Newton(g0, f, aubin=True, cfg=cfg or NewtonConfig()).run()


def newton_ma(g0: HermitianField, F: ScalarField, cfg: NewtonConfig | None = None) -> ScalarField:
    return solve_ma(g0, F, cfg).u


def newton_aubin(g0: HermitianField, f: ScalarField, cfg: NewtonConfig | None = None) -> ScalarField:
    return solve_aubin(g0, f, cfg).u
