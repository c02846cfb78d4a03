"""Diagnostics records and the a-priori-estimate checks run over them.

The constants in the estimates being monitored come out of compactness
arguments and are not computable, so every check tests the *shape* of an
estimate (boundedness, monotonicity, an exponential rate) and reports the
constants it fitted.  All checks are pure functions of the record series.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .flow import FlowProblem, FlowState, Variant
from .spectral import third_order_S
from .torus import (
    adjugate_array,
    det_array,
    min_eig_array,
    relative_eigs_array,
    trace_product_array,
)

OSC_FLOOR = 1e-12
ENERGY_FLOOR = OSC_FLOOR ** 2


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    sup_abs_F: float
    osc_F: float
    energy_E: float
    min_eig_gtilde: float
    volume_gtilde: float
    sup_S: float
    trace_lo: float
    trace_hi: float
    sup_abs_u: float
    pinch_lo: float
    pinch_hi: float
    sup_F: float = 0.0
    inf_F: float = 0.0
    mean_F: float = 0.0
    cotrace_hi: float = 1.0
    density_lo: float = 1.0
    density_hi: float = 1.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecayFit:
    t_a: float
    t_b: float
    rate: float
    amplitude: float
    residual: float

    @classmethod
    def fit(cls, t, y) -> "DecayFit":
        """Least squares for ``log y = log C - a t``; residual is the RMS in log space."""
        t = np.asarray(t, float)
        ly = np.log(np.asarray(y, float))
        if t.size < 2:
            raise ValueError("need at least two points for a decay fit")
        slope, icept = np.polyfit(t, ly, 1)
        res = ly - (slope * t + icept)
        return cls(float(t[0]), float(t[-1]), float(-slope), float(math.exp(icept)),
                   float(np.sqrt(np.mean(res ** 2))))


@dataclass
class CheckReport:
    name: str
    verdict: str                     # "pass" | "fail" | "indeterminate"
    margin: float = float("nan")
    constants: dict = field(default_factory=dict)
    fit: DecayFit | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> dict:
        out = {"name": self.name, "verdict": self.verdict, "margin": _jsonable(self.margin),
               "constants": {k: _jsonable(v) for k, v in self.constants.items()}}
        if self.fit is not None:
            out["constants"].update({f"fit_{k}": _jsonable(v) for k, v in asdict(self.fit).items()})
        return out


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


# -- snapshot -----------------------------------------------------------------------

def snapshot(state: FlowState, prob: FlowProblem) -> DiagnosticsRecord:
    dom = prob.domain
    cell = dom.cell_volume
    F = state.F.values
    gt = state.g_tilde.entries
    dvt = det_array(gt)
    vol = float(np.sum(dvt) * cell)
    phi = F - np.sum(F * dvt) / np.sum(dvt)
    energy = 0.5 * float(np.sum(phi * phi * dvt) * cell)

    g0 = prob.g0.entries
    g0_det = det_array(g0)
    g0_inv = adjugate_array(g0) / g0_det[..., None, None]
    tr = trace_product_array(g0_inv, gt)
    gt_inv = adjugate_array(gt) / dvt[..., None, None]
    cotr = trace_product_array(gt_inv, g0)
    lo, hi = relative_eigs_array(g0, gt)
    if prob.variant is Variant.REFERENCE:
        dens = dvt / prob.omega.values
    else:
        dens = dvt / g0_det
    u = state.u.values
    v = u - np.sum(u * g0_det) / np.sum(g0_det)
    S = third_order_S(state.u, state.g_tilde).values
    return DiagnosticsRecord(
        t=float(state.t),
        sup_abs_F=float(np.max(np.abs(F))),
        osc_F=float(np.max(F) - np.min(F)),
        energy_E=energy,
        min_eig_gtilde=float(np.min(min_eig_array(gt))),
        volume_gtilde=vol,
        sup_S=float(np.max(S)),
        trace_lo=float(np.min(tr)),
        trace_hi=float(np.max(tr)),
        sup_abs_u=float(np.max(np.abs(v))),
        pinch_lo=float(np.min(lo)),
        pinch_hi=float(np.max(hi)),
        sup_F=float(np.max(F)),
        inf_F=float(np.min(F)),
        mean_F=float(np.mean(F)),
        cotrace_hi=float(np.max(cotr)),
        density_lo=float(np.min(dens)),
        density_hi=float(np.max(dens)),
    )


def _col(records, name) -> np.ndarray:
    return np.array([getattr(r, name) for r in records], dtype=float)


# -- checks --------------------------------------------------------------------------

def check_max_principle(records: Sequence[DiagnosticsRecord], sup_f: float,
                        bound_tol: float = 1e-8, mono_tol: float = 1e-9) -> CheckReport:
    F = _col(records, "sup_abs_F")
    t = _col(records, "t")
    over = np.nonzero(F > sup_f + bound_tol)[0]
    jumps = np.diff(F)
    up = np.nonzero(jumps > mono_tol)[0]
    worst_increase = float(np.max(jumps)) if jumps.size else 0.0
    consts = {"sup_f": sup_f, "max_sup_abs_F": float(np.max(F)),
              "worst_increase": worst_increase}
    verdict = "pass"
    if over.size or up.size:
        verdict = "fail"
        first = min(over[0] if over.size else len(F), up[0] + 1 if up.size else len(F))
        consts["fail_index"] = int(first)
        consts["fail_t"] = float(t[first])
    return CheckReport("max_principle", verdict, sup_f - float(np.max(F)), consts)


def check_extrema_monotone(records: Sequence[DiagnosticsRecord], tol: float = 1e-9) -> CheckReport:
    """``sup F`` and ``-inf F`` are each nonincreasing along the flow."""
    hi = _col(records, "sup_F")
    lo = -_col(records, "inf_F")
    worst = max(float(np.max(np.diff(hi), initial=-np.inf)),
                float(np.max(np.diff(lo), initial=-np.inf)))
    worst = worst if math.isfinite(worst) else 0.0
    verdict = "pass" if worst <= tol else "fail"
    return CheckReport("extrema_monotone", verdict, tol - worst, {"worst_increase": worst})


def unit_resample(t: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``y`` at unit spacing from ``t[0]`` by monotone cubic interpolation of log y."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    keep = np.concatenate([[True], np.diff(t) > 0])
    t, y = t[keep], y[keep]
    grid = t[0] + np.arange(int(math.floor(t[-1] - t[0] + 1e-9)) + 1)
    ly = np.log(np.maximum(y, 1e-300))
    if t.size == 1:
        return grid, np.exp(np.full(grid.shape, ly[0]))
    return grid, np.exp(PchipInterpolator(t, ly)(grid))


def check_oscillation_contraction(records: Sequence[DiagnosticsRecord],
                                  floor: float = OSC_FLOOR, mono_tol: float = 1e-9,
                                  max_residual: float = 0.1) -> CheckReport:
    t = _col(records, "t")
    w = _col(records, "osc_F")
    if t.size == 0 or t[-1] - t[0] < 3 - 1e-9:
        raise ValueError("series too short: need at least 3 unit time intervals")
    grid, wk = unit_resample(t, w)
    ratios = [wk[k] / wk[k - 1] for k in range(1, wk.size) if wk[k - 1] > floor]
    jumps = np.diff(w)
    worst_increase = float(np.max(jumps)) if jumps.size else 0.0
    consts = {"worst_increase": worst_increase, "unit_samples": wk.tolist()}
    above = wk > floor
    fit = None
    if np.count_nonzero(above) >= 2:
        fit = DecayFit.fit(grid[above], wk[above])
    if not ratios:
        consts["delta"] = 0.0
        verdict = "pass" if worst_increase <= mono_tol else "fail"
        return CheckReport("oscillation_contraction", verdict, 1.0, consts, fit)
    delta = float(max(ratios))
    consts["delta"] = delta
    ok = delta < 1.0 and worst_increase <= mono_tol
    if fit is not None:
        ok = ok and fit.residual < max_residual
    return CheckReport("oscillation_contraction", "pass" if ok else "fail", 1.0 - delta,
                       consts, fit)


def check_energy_decay(records: Sequence[DiagnosticsRecord], threshold: float = 0.5,
                       mono_tol: float = 1e-10, floor: float = ENERGY_FLOOR) -> CheckReport:
    t = _col(records, "t")
    E = _col(records, "energy_E")
    osc = _col(records, "osc_F")
    below = np.nonzero(osc < threshold)[0]
    if below.size == 0:
        return CheckReport("energy_decay", "indeterminate", float("nan"),
                           {"reason": "oscillation never dropped below threshold"})
    i0 = int(below[0])
    tail_t, tail_E = t[i0:], E[i0:]
    jumps = np.diff(tail_E)
    worst = float(np.max(jumps)) if jumps.size else 0.0
    consts = {"t_star": float(t[i0]), "worst_increase": worst}
    keep = tail_E > floor
    fit = None
    if np.count_nonzero(keep) >= 2:
        fit = DecayFit.fit(tail_t[keep], tail_E[keep])
    ok = worst <= mono_tol and (fit is None or fit.rate > 0)
    return CheckReport("energy_decay", "pass" if ok else "fail", mono_tol - worst, consts, fit)


def check_negative_ke_decay(records: Sequence[DiagnosticsRecord], sup_f: float,
                            window: tuple[float, float] = (2.0, 8.0), slack: float = 1e-8,
                            max_slope: float = -0.9, floor: float = 1e-14) -> CheckReport:
    t = _col(records, "t")
    F = _col(records, "sup_abs_F")
    bound = sup_f * np.exp(-(t - t[0])) + slack
    excess = F - bound
    worst = float(np.max(excess))
    consts = {"sup_f": sup_f, "worst_excess": worst}
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12) & (F > floor)
    fit = None
    if np.count_nonzero(sel) >= 2:
        fit = DecayFit.fit(t[sel], F[sel])
        consts["slope"] = -fit.rate
    ok = worst <= 0 and (fit is None or -fit.rate <= max_slope)
    return CheckReport("negative_ke_decay", "pass" if ok else "fail", -worst, consts, fit)


def check_metric_equivalence(records: Sequence[DiagnosticsRecord],
                             c_max: float | None = None) -> CheckReport:
    lo = _col(records, "pinch_lo")
    hi = _col(records, "pinch_hi")
    dlo = _col(records, "density_lo")
    dhi = _col(records, "density_hi")
    with np.errstate(divide="ignore"):
        c_eig = float(max(np.max(hi), np.max(1.0 / lo)))
        c_vol = float(max(np.max(dhi), np.max(1.0 / dlo)))
    C = max(c_eig, c_vol)
    ok = math.isfinite(C) and np.min(lo) > 0 and np.min(dlo) > 0
    if c_max is not None:
        ok = ok and C <= c_max
    return CheckReport("metric_equivalence", "pass" if ok else "fail",
                       (c_max - C) if c_max is not None else float("nan"),
                       {"C": C, "C_eigen": c_eig, "C_volume": c_vol})


def check_zero_order(records: Sequence[DiagnosticsRecord], factor: float = 10.0,
                     growth_tol: float | None = 0.05) -> CheckReport:
    """``sup|u - mean u|`` stays bounded and has levelled off.

    Two tests: the peak is at most ``factor`` times the largest value seen in
    the first quarter of the run, and (unless ``growth_tol`` is None) the
    growth over the last quarter is at most ``growth_tol`` of the peak.  The
    second catches steady drift, which the ratio test alone cannot see on a
    finite window.
    """
    t = _col(records, "t")
    u = _col(records, "sup_abs_u")
    span = t[-1] - t[0]
    quarter = u[t <= t[0] + 0.25 * span + 1e-12]
    bound = factor * float(np.max(quarter)) + 1e-12
    peak = float(np.max(u))
    late = u[t >= t[0] + 0.75 * span - 1e-12]
    growth = float(late[-1] - late[0]) / peak if peak > 0 else 0.0
    ok = peak <= bound
    consts = {"bound": bound, "sup_abs_u": peak, "late_growth": growth}
    if growth_tol is not None:
        ok = ok and growth <= growth_tol
    return CheckReport("zero_order", "pass" if ok else "fail", bound - peak, consts)


def check_calabi_S_bounded(records: Sequence[DiagnosticsRecord], factor: float = 10.0) -> CheckReport:
    S = _col(records, "sup_S")
    bound = factor * (S[0] + 1.0)
    peak = float(np.max(S))
    return CheckReport("calabi_S_bounded", "pass" if peak <= bound else "fail", bound - peak,
                       {"bound": bound, "sup_S": peak})


def check_volume_conservation(records: Sequence[DiagnosticsRecord], rtol: float = 1e-6) -> CheckReport:
    vol = _col(records, "volume_gtilde")
    drift = float(np.max(np.abs(vol - vol[0])) / vol[0])
    return CheckReport("volume_conservation", "pass" if drift <= rtol else "fail", rtol - drift,
                       {"relative_drift": drift})


def check_positivity(records: Sequence[DiagnosticsRecord]) -> CheckReport:
    lam = float(np.min(_col(records, "min_eig_gtilde")))
    tr = float(np.min(_col(records, "trace_lo")))
    ok = lam > 0 and tr > 0
    return CheckReport("positivity", "pass" if ok else "fail", min(lam, tr),
                       {"min_eig": lam, "min_trace": tr})


def checks_for(variant: Variant, records: Sequence[DiagnosticsRecord], sup_f: float,
               c_max: float | None = None) -> list[CheckReport]:
    """Every check that applies to a series of the given variant."""
    variant = Variant(variant)
    out = []
    if variant is Variant.CALABI_YAU:
        out.append(check_max_principle(records, sup_f))
        out.append(check_extrema_monotone(records))
        try:
            out.append(check_oscillation_contraction(records))
        except ValueError as exc:
            out.append(CheckReport("oscillation_contraction", "indeterminate",
                                   constants={"reason": str(exc)}))
        out.append(check_energy_decay(records))
        out.append(check_volume_conservation(records))
    elif variant is Variant.NEGATIVE_KE:
        out.append(check_negative_ke_decay(records, sup_f))
    out.append(check_metric_equivalence(records, c_max))
    # the reference flow chases a moving target, so only the ratio test applies
    out.append(check_zero_order(records, growth_tol=None if variant is Variant.REFERENCE else 0.05))
    out.append(check_calabi_S_bounded(records))
    out.append(check_positivity(records))
    return out
