"""Time integration of the scalar Kahler-Ricci flows.

Three right-hand sides are supported:

* ``calabi_yau``:   u_t = log det(g0 + ddbar u) - log det g0 + f
* ``negative_ke``:  u_t = log det(g0 + ddbar u) - log det g0 - u + f
* ``reference``:    phi_t = log( det(w_t + ddbar phi) / Omega ),
  with ``w_t = ((T' - t) w0 + t eta) / T'``

Stepping uses the classical RK4 weights with an embedded third-order
companion (FSAL, four evaluations per accepted step).  The step is also capped
by a frozen-coefficient bound on the spectral radius of the linearised
operator, because the flows are parabolic and an error controller alone would
park the highest resolved modes at tolerance-sized noise.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .spectral import workspace
from .torus import (
    DegenerateMetric,
    HermitianField,
    ScalarField,
    _check_same,
    adjugate_array,
    check_positive,
    det_array,
    min_eig_array,
    symmetrize,
    trace_product_array,
)

log = logging.getLogger(__name__)

# real-axis stability limit of classical RK4
RK4_REAL_STABILITY = 2.785
DT_UNDERFLOW = 1e-12


class Variant(str, enum.Enum):
    CALABI_YAU = "calabi_yau"
    NEGATIVE_KE = "negative_ke"
    REFERENCE = "reference"


class Termination(str, enum.Enum):
    CONVERGED = "Converged"
    TIME_LIMIT = "TimeLimit"
    STIFFNESS_FAILURE = "StiffnessFailure"
    DEGENERATE_METRIC = "DegenerateMetric"


class StiffnessFailure(RuntimeError):
    def __init__(self, message: str, record=None, state=None):
        super().__init__(message)
        self.record = record
        self.state = state


@dataclass(eq=False)
class FlowProblem:
    """Data of one flow.  For the reference variant ``g0`` is ``omega_0``."""

    variant: Variant
    g0: HermitianField
    f: ScalarField | None = None
    eta: HermitianField | None = None
    t_prime: float | None = None
    omega: ScalarField | None = None
    gauge_shift: float = 0.0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        dom = self.g0.domain
        check_positive(self.g0, "background metric")
        if self.variant in (Variant.CALABI_YAU, Variant.NEGATIVE_KE):
            if self.f is None:
                self.f = ScalarField(dom, np.zeros(dom.shape))
            _check_same(dom, self.f.domain)
            self.f = self.f.real()
        else:
            if self.eta is None or self.t_prime is None or self.omega is None:
                raise ValueError("reference flow needs eta, t_prime and omega")
            if not self.t_prime > 0:
                raise ValueError("t_prime must be positive")
            _check_same(dom, self.eta.domain)
            _check_same(dom, self.omega.domain)
            check_positive(self.eta, "eta")
            if np.min(self.omega.values) <= 0:
                raise ValueError("volume density omega must be positive")
        self._logdet0 = np.log(det_array(self.g0.entries))
        self._g0_inv = adjugate_array(self.g0.entries) / det_array(self.g0.entries)[..., None, None]
        if self.omega is not None:
            self._log_omega = np.log(self.omega.values)

    @property
    def domain(self):
        return self.g0.domain

    def sup_f(self) -> float:
        return self.f.sup() if self.f is not None else float("nan")


@dataclass
class StepperConfig:
    dt0: float = 1e-4
    safety: float = 0.9
    dt_max: float = 0.05
    tol: float = 1e-8
    dealias: bool = True
    max_steps: int = 2_000_000
    t_end: float = 50.0
    t_min: float = 0.0
    converge_tol: float = 1e-8
    stability: float = 0.9
    record_every: float = 0.05

    def __post_init__(self):
        if not (self.dt0 > 0 and self.dt_max > 0 and self.tol > 0):
            raise ValueError("dt0, dt_max and tol must be positive")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")
        if not 0 < self.stability <= 1:
            raise ValueError("stability must lie in (0, 1]")


@dataclass(eq=False)
class FlowState:
    t: float
    u: ScalarField
    g_tilde: HermitianField
    F: ScalarField
    dt: float = 1e-4
    min_eig: float = float("nan")
    uhat: np.ndarray | None = field(default=None, repr=False)
    Fhat: np.ndarray | None = field(default=None, repr=False)


# -- right-hand sides ----------------------------------------------------------

def reference_form(t: float, prob: FlowProblem) -> HermitianField:
    tp = prob.t_prime
    if tp is None or prob.eta is None:
        raise ValueError("problem has no reference path")
    if t < -1e-14 or t > tp * (1 + 1e-14):
        raise ValueError(f"t={t} outside [0, {tp}]")
    e = ((tp - t) * prob.g0.entries + t * prob.eta.entries) / tp
    return HermitianField(prob.domain, symmetrize(e), metric=True)


class _Evaluator:
    """Right-hand side acting on half spectra; remembers the last g_tilde."""

    def __init__(self, prob: FlowProblem, dealias: bool):
        self.prob = prob
        self.ws = workspace(prob.domain)
        self.mask = self.ws.dealias_mask if dealias else None
        self.n = prob.domain.n
        self.fhat = None
        v = prob.variant
        if v is Variant.REFERENCE:
            self.fhat = self.ws.forward(-prob._log_omega)
        else:
            self.fhat = self.ws.forward(prob.f.values - prob._logdet0)
        self.gt = None
        self.lam = None

    def base(self, t: float) -> np.ndarray:
        if self.prob.variant is Variant.REFERENCE:
            return reference_form(t, self.prob).entries
        return self.prob.g0.entries

    def __call__(self, t: float, yhat: np.ndarray) -> np.ndarray:
        ws = self.ws
        base = self.base(t)
        if self.n == 1:
            g = base[..., 0, 0].real + ws.apply(ws.hessian[(0, 0)], yhat)
            lam = det = g
        else:
            # components of [[a, b], [conj b, d]] kept as separate real arrays
            a = base[..., 0, 0].real + ws.apply(ws.hessian[(0, 0)], yhat)
            d = base[..., 1, 1].real + ws.apply(ws.hessian[(1, 1)], yhat)
            re, im = ws.hessian[(0, 1)]
            br = base[..., 0, 1].real + ws.inverse(re * yhat)
            bi = base[..., 0, 1].imag + ws.inverse(im * yhat)
            b2 = br * br + bi * bi
            det = a * d - b2
            half = 0.5 * (a - d)
            lam = 0.5 * (a + d) - np.sqrt(half * half + b2)
            g = (a, d, br, bi)
        lam_min = float(np.min(lam))
        if not lam_min > 0:
            loc = tuple(int(i) for i in np.unravel_index(np.argmin(lam), lam.shape))
            raise DegenerateMetric(
                f"g_tilde lost positivity at t={t:.6g}, grid point {loc}: "
                f"min eigenvalue {lam_min:.6g}", loc, lam_min)
        self.gt, self.lam = g, lam_min
        Fhat = ws.forward(np.log(det)) + self.fhat
        if self.prob.variant is Variant.NEGATIVE_KE:
            Fhat = Fhat - yhat
        if self.mask is not None:
            Fhat = Fhat * self.mask
        return Fhat

    def gtilde_field(self) -> HermitianField:
        if self.n == 1:
            e = self.gt.astype(complex)[..., None, None]
        else:
            a, d, br, bi = self.gt
            e = np.empty(a.shape + (2, 2), dtype=complex)
            e[..., 0, 0] = a
            e[..., 1, 1] = d
            e[..., 0, 1] = br + 1j * bi
            e[..., 1, 0] = br - 1j * bi
        return HermitianField(self.prob.domain, e, metric=True)


def _rhs_raw(prob: FlowProblem, t: float, u: np.ndarray, dealias: bool):
    """Return ``(F, g_tilde entries, min eigenvalue of g_tilde)`` in physical space."""
    ev = _Evaluator(prob, dealias)
    Fhat = ev(t, ev.ws.forward(u))
    return ev.ws.inverse(Fhat), ev.gtilde_field().entries, ev.lam


def _as_real(u: ScalarField, prob: FlowProblem) -> np.ndarray:
    _check_same(u.domain, prob.domain)
    return u.real().values


def rhs_calabi_yau(u: ScalarField, prob: FlowProblem, dealias: bool = False) -> ScalarField:
    if prob.variant is not Variant.CALABI_YAU:
        prob = replace(prob, variant=Variant.CALABI_YAU)
    F, _, _ = _rhs_raw(prob, 0.0, _as_real(u, prob), dealias)
    return ScalarField(prob.domain, F)


def rhs_negative_ke(u: ScalarField, prob: FlowProblem, dealias: bool = False) -> ScalarField:
    if prob.variant is not Variant.NEGATIVE_KE:
        prob = replace(prob, variant=Variant.NEGATIVE_KE)
    F, _, _ = _rhs_raw(prob, 0.0, _as_real(u, prob), dealias)
    return ScalarField(prob.domain, F)


def rhs_reference(phi: ScalarField, t: float, prob: FlowProblem, dealias: bool = False) -> ScalarField:
    if prob.variant is not Variant.REFERENCE:
        raise ValueError("rhs_reference needs a reference-flow problem")
    F, _, _ = _rhs_raw(prob, t, _as_real(phi, prob), dealias)
    return ScalarField(prob.domain, F)


def gauge_fix(prob: FlowProblem) -> FlowProblem:
    """Shift f so that ``(1/Vol) int e^f dV = 1`` (Calabi-Yau variant only)."""
    if prob.variant is not Variant.CALABI_YAU:
        raise ValueError("gauge_fix applies to the calabi_yau variant")
    dv = det_array(prob.g0.entries)
    mean = float(np.sum(np.exp(prob.f.values) * dv) / np.sum(dv))
    shift = -math.log(mean)
    if shift == 0.0:
        return prob
    return replace(prob, f=prob.f + shift, gauge_shift=prob.gauge_shift + shift)


def is_gauge_fixed(prob: FlowProblem, tol: float = 1e-12) -> bool:
    dv = det_array(prob.g0.entries)
    mean = float(np.sum(np.exp(prob.f.values) * dv) / np.sum(dv))
    return abs(mean - 1.0) <= tol


# -- stepping ------------------------------------------------------------------

def initial_state(prob: FlowProblem, cfg: StepperConfig, u0: ScalarField | None = None,
                  t0: float = 0.0) -> FlowState:
    dom = prob.domain
    u = np.zeros(dom.shape) if u0 is None else _as_real(u0, prob).copy()
    if prob.variant is Variant.REFERENCE:
        check_positive(reference_form(t0, prob), "reference form")
    ev = _Evaluator(prob, cfg.dealias)
    uhat = ev.ws.forward(u)
    Fhat = ev(t0, uhat)
    return FlowState(t0, ScalarField(dom, u), ev.gtilde_field(),
                     ScalarField(dom, ev.ws.inverse(Fhat)), dt=cfg.dt0, min_eig=ev.lam,
                     uhat=uhat, Fhat=Fhat)


def stable_dt(state: FlowState, prob: FlowProblem, cfg: StepperConfig) -> float:
    """Largest step keeping every resolved mode inside RK4's stability interval."""
    ws = workspace(prob.domain)
    sym = ws.max_hessian_symbol_dealiased if cfg.dealias else ws.max_hessian_symbol
    rho = sym / state.min_eig
    if prob.variant is Variant.NEGATIVE_KE:
        rho += 1.0
    if rho <= 0:
        return math.inf
    return cfg.stability * RK4_REAL_STABILITY / rho


def rk43_step(fun: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray,
              k1: np.ndarray, h: float):
    """One RK4 step with the embedded order-3 estimate.

    The third-order companion uses weights (1/6, 1/3, 1/3, 0, 1/6) with the
    fifth stage ``f(t+h, y_new)``, so the estimate is ``h/6 (k5 - k4)`` and
    ``k5`` is reused as the next ``k1``.
    """
    k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = fun(t + h, y + h * k3)
    y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    k5 = fun(t + h, y_new)
    err = (h / 6.0) * (k5 - k4)
    return y_new, k5, err


def _spectra(state: FlowState, prob: FlowProblem, ev: "_Evaluator"):
    uhat = state.uhat if state.uhat is not None else ev.ws.forward(state.u.values)
    Fhat = state.Fhat if state.Fhat is not None else ev.ws.forward(state.F.values)
    return uhat, Fhat


def step(state: FlowState, prob: FlowProblem, cfg: StepperConfig,
         t_stop: float | None = None, stats: dict | None = None,
         evaluator: "_Evaluator | None" = None) -> FlowState:
    """Advance one accepted step; ``state.dt`` is the proposed step size.

    A stage that loses positivity halves the step; an error estimate above
    tolerance shrinks it by the usual fourth-root rule.
    """
    dom = prob.domain
    ev = evaluator or _Evaluator(prob, cfg.dealias)
    ws = ev.ws
    y, k1 = _spectra(state, prob, ev)

    h = min(state.dt, cfg.dt_max, stable_dt(state, prob, cfg))
    clipped = False
    if t_stop is not None and state.t + h >= t_stop - 1e-13:
        h = t_stop - state.t
        clipped = True
    while True:
        if h < DT_UNDERFLOW:
            raise StiffnessFailure(
                f"step size underflow ({h:.3e}) at t={state.t:.6g}", state=state)
        try:
            y_new, k5, err_hat = rk43_step(ev, state.t, y, k1, h)
        except DegenerateMetric as exc:
            log.debug("stage lost positivity (%s); halving dt", exc)
            if stats is not None:
                stats["rejected"] = stats.get("rejected", 0) + 1
            h *= 0.5
            clipped = False
            continue
        u_new = ws.inverse(y_new)
        scale = cfg.tol * (1.0 + float(np.max(np.abs(u_new))))
        ratio = float(np.max(np.abs(ws.inverse(err_hat)))) / scale
        if ratio <= 1.0:
            break
        if stats is not None:
            stats["rejected"] = stats.get("rejected", 0) + 1
        h *= max(0.2, cfg.safety * ratio ** -0.25)
        clipped = False
    if clipped:
        dt_next = max(state.dt, h)
        t_new = t_stop
    else:
        grow = 5.0 if ratio == 0 else min(5.0, cfg.safety * ratio ** -0.25)
        dt_next = h * max(grow, 0.2)
        t_new = state.t + h
    if prob.variant is Variant.REFERENCE:
        check_positive(reference_form(t_new, prob), "reference form")
    if stats is not None:
        stats["steps"] = stats.get("steps", 0) + 1
    return FlowState(t_new, ScalarField(dom, u_new), ev.gtilde_field(),
                     ScalarField(dom, ws.inverse(k5)), dt=dt_next, min_eig=ev.lam,
                     uhat=y_new, Fhat=k5)


# -- driver ----------------------------------------------------------------------

def convergence_residual(state: FlowState, prob: FlowProblem) -> float:
    F = state.F.values
    if prob.variant is Variant.NEGATIVE_KE:
        return float(np.max(np.abs(F)))
    return float(np.max(np.abs(F - np.mean(F))))


@dataclass(eq=False)
class RunResult:
    problem: FlowProblem
    state: FlowState
    records: list
    termination: Termination
    steps: int = 0
    rejected: int = 0
    min_eig_seen: float = float("inf")
    min_trace_seen: float = float("inf")
    wall_time: float = 0.0
    message: str = ""


def run(prob: FlowProblem, cfg: StepperConfig,
        hooks: Sequence[Callable] = (),
        u0: ScalarField | None = None,
        t0: float = 0.0,
        checkpoint_every: float | None = None,
        on_checkpoint: Callable[[FlowState], None] | None = None,
        monitor: Callable | None = None) -> RunResult:
    """Integrate until convergence, ``t_end``, or failure.

    ``hooks`` are called as ``hook(state, record)`` after every diagnostics
    record; ``on_checkpoint(state)`` at multiples of ``checkpoint_every``.
    """
    if monitor is None:
        from .monitor import snapshot as monitor
    if prob.variant is Variant.CALABI_YAU and not is_gauge_fixed(prob):
        prob = gauge_fix(prob)
    if prob.variant is Variant.REFERENCE and cfg.t_end > prob.t_prime:
        raise ValueError(f"t_end={cfg.t_end} exceeds T'={prob.t_prime}")

    wall0 = time.perf_counter()
    records = []
    stats: dict = {}
    eps = 1e-12
    try:
        state = initial_state(prob, cfg, u0, t0)
    except DegenerateMetric as exc:
        return RunResult(prob, None, records, Termination.DEGENERATE_METRIC,
                         wall_time=time.perf_counter() - wall0, message=str(exc))

    evaluator = _Evaluator(prob, cfg.dealias)
    g0_inv = prob._g0_inv
    min_eig = state.min_eig
    min_trace = float(np.min(trace_product_array(g0_inv, state.g_tilde.entries)))

    def emit(s):
        rec = monitor(s, prob)
        records.append(rec)
        for hook in hooks:
            hook(s, rec)

    emit(state)
    next_record = t0 + cfg.record_every
    next_ckpt = t0 + checkpoint_every if checkpoint_every else math.inf
    termination = None
    message = ""
    while True:
        if state.t >= cfg.t_min - eps and convergence_residual(state, prob) <= cfg.converge_tol:
            termination = Termination.CONVERGED
            break
        if state.t >= cfg.t_end - eps or stats.get("steps", 0) >= cfg.max_steps:
            termination = Termination.TIME_LIMIT
            break
        t_stop = min(next_record, next_ckpt, cfg.t_end)
        try:
            state = step(state, prob, cfg, t_stop, stats, evaluator)
        except StiffnessFailure as exc:
            termination, message = Termination.STIFFNESS_FAILURE, str(exc)
            exc.record = monitor(state, prob)
            break
        except DegenerateMetric as exc:
            termination, message = Termination.DEGENERATE_METRIC, str(exc)
            break
        min_eig = min(min_eig, state.min_eig)
        min_trace = min(min_trace, float(np.min(
            trace_product_array(g0_inv, state.g_tilde.entries))))
        if state.t >= next_record - eps:
            emit(state)
            while next_record <= state.t + eps:
                next_record += cfg.record_every
        if state.t >= next_ckpt - eps:
            if on_checkpoint is not None:
                on_checkpoint(state)
            while next_ckpt <= state.t + eps:
                next_ckpt += checkpoint_every
    if records and records[-1].t != state.t:
        emit(state)
    return RunResult(prob, state, records, termination,
                     steps=stats.get("steps", 0), rejected=stats.get("rejected", 0),
                     min_eig_seen=min_eig, min_trace_seen=min_trace,
                     wall_time=time.perf_counter() - wall0, message=message)
