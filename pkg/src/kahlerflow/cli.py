"""Batch experiment driver.

``kahlerflow run --preset cy_t2_n1`` integrates a flow, runs every monitor
check, compares the limit against the stationary oracle and writes a run
directory::

    <out>/<run_id>/config.json        resolved config (+ preset, overrides)
    <out>/<run_id>/diagnostics.csv    one row per diagnostics record
    <out>/<run_id>/report.json        verdicts, fitted constants, oracle gap
    <out>/<run_id>/checkpoints/*.bin  periodic and final checkpoints

Exit status: 0 all checks pass, 2 a check failed, 3 the solver failed,
4 the configuration is invalid.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .classes import bisect_existence_time, max_existence_time
from .config import ConfigError, ExperimentConfig, config_from_dict, dumps, parse_config
from .flow import FlowState, Termination, Variant, run
from .monitor import CheckReport, DiagnosticsRecord, checks_for
from .oracle import NonConvergence, newton_aubin, newton_ma, residual_sup, solve_stationary_n1
from .torus import DegenerateMetric, ScalarField

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4


@dataclass
class RunReport:
    run_id: str
    run_dir: Path | None
    config_echo: dict
    termination: str
    checks: list = field(default_factory=list)
    oracle_gap: float | None = None
    wall_clock: float = 0.0
    steps: int = 0
    final_t: float | None = None
    message: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def solver_failed(self) -> bool:
        return self.termination in (Termination.STIFFNESS_FAILURE.value,
                                    Termination.DEGENERATE_METRIC.value, "Error")

    @property
    def exit_code(self) -> int:
        if self.solver_failed:
            return EXIT_SOLVER
        if any(c.verdict == "fail" for c in self.checks):
            return EXIT_CHECK
        return EXIT_OK

    def check(self, name: str) -> CheckReport:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_echo": self.config_echo,
            "checks": [c.to_json() for c in self.checks],
            "oracle_gap": self.oracle_gap,
            "termination": self.termination,
            "wall_clock": self.wall_clock,
            "steps": self.steps,
            "final_t": self.final_t,
            "exit_code": self.exit_code,
            "message": self.message,
            **self.extras,
        }


# -- diagnostics CSV ------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


class DiagnosticsWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.names = DiagnosticsRecord.field_names()
        self.w.writerow(self.names)
        self.fh.flush()

    def __call__(self, state, rec: DiagnosticsRecord):
        self.w.writerow([_fmt(getattr(rec, k)) for k in self.names])
        self.fh.flush()

    def close(self):
        self.fh.close()


def write_diagnostics(records, path) -> None:
    w = DiagnosticsWriter(Path(path))
    for r in records:
        w(None, r)
    w.close()


def read_diagnostics(path) -> list[DiagnosticsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty diagnostics file")
    names = rows[0]
    known = set(DiagnosticsRecord.field_names())
    missing = known - set(names)
    required = {"t", "sup_abs_F", "osc_F", "energy_E", "min_eig_gtilde", "volume_gtilde",
                "sup_S", "trace_lo", "trace_hi", "sup_abs_u", "pinch_lo", "pinch_hi"}
    if required & missing:
        raise ValueError(f"{path}: missing columns {sorted(required & missing)}")
    out = []
    for row in rows[1:]:
        vals = {k: float(v) for k, v in zip(names, row) if k in known}
        out.append(DiagnosticsRecord(**vals))
    return out


# -- oracle ------------------------------------------------------------------------------

def stationary_solution(cfg: ExperimentConfig, prob=None) -> dict:
    """Solve the stationary equation the flow should converge to.

    Returns ``{"u": ScalarField, "equation": ..., "residual": ..., "c": ...}``,
    or ``None`` when the variant has no stationary limit.
    """
    prob = prob or cfg.problem()
    variant = prob.variant
    g0 = prob.g0
    if variant is Variant.CALABI_YAU:
        if prob.domain.n == 1:
            u, c = solve_stationary_n1(prob.f, g0)
            return {"u": u, "c": c, "equation": "n1",
                    "residual": residual_sup(u, "n1", g0, prob.f, c)}
        F = ScalarField(prob.domain, -prob.f.values)
        u = newton_ma(g0, F)
        return {"u": u, "c": None, "equation": "ma", "residual": residual_sup(u, "ma", g0, F)}
    if variant is Variant.NEGATIVE_KE:
        u = newton_aubin(g0, prob.f)
        return {"u": u, "c": None, "equation": "aubin",
                "residual": residual_sup(u, "aubin", g0, prob.f)}
    return None


def normalized_gap(u: ScalarField, ref: ScalarField, variant: Variant, dv: np.ndarray) -> float:
    """Sup-norm distance; Calabi-Yau potentials are compared modulo constants."""
    a, b = u.values, ref.values
    if variant is Variant.CALABI_YAU:
        a = a - np.sum(a * dv) / np.sum(dv)
        b = b - np.sum(b * dv) / np.sum(dv)
    return float(np.max(np.abs(a - b)))


# -- experiment ---------------------------------------------------------------------------

def _new_run_id(cfg: ExperimentConfig) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return f"{cfg.preset or cfg.variant}-{stamp}-{uuid.uuid4().hex[:8]}"


def _class_experiment(cfg: ExperimentConfig, report: RunReport) -> RunReport:
    a0, b = cfg.class_pair()
    T = max_existence_time(a0, b)
    ref = bisect_existence_time(a0, b, t_max=1e12)
    if math.isinf(T) or math.isinf(ref):
        ok = T == ref
        gap = 0.0 if ok else float("inf")
    else:
        gap = abs(T - ref)
        ok = gap <= 1e-10 * max(1.0, T)
    report.checks.append(CheckReport("class_existence_time", "pass" if ok else "fail",
                                     1e-10 - gap, {"T": T, "T_bisection": ref, "gap": gap}))
    report.termination = "NotApplicable"
    report.extras["T"] = T
    return report


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None,
                   u0: ScalarField | None = None, t0: float = 0.0,
                   resumed_from: str | None = None, run_id: str | None = None) -> RunReport:
    """Run the flow described by ``cfg`` and write the run directory."""
    root = Path(out if out is not None else cfg.out)
    run_id = run_id or _new_run_id(cfg)
    run_dir = root / run_id
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=False)
    with open(run_dir / "config.json", "w") as fh:
        fh.write(dumps(cfg))
    report = RunReport(run_id, run_dir, dict(cfg.echo), termination="Error")
    report.extras["preset"] = cfg.preset
    report.extras["overrides"] = cfg.overrides
    if resumed_from is not None:
        report.extras["resumed_from"] = str(resumed_from)
    wall0 = time.perf_counter()
    try:
        if cfg.variant == "classes":
            return _class_experiment(cfg, report)
        _flow_experiment(cfg, report, run_dir, u0, t0)
    except Exception as exc:   # keep partial outputs; the report records the failure
        log.exception("experiment failed")
        report.termination = "Error"
        report.message = f"{type(exc).__name__}: {exc}"
    finally:
        report.wall_clock = time.perf_counter() - wall0
        with open(run_dir / "report.json", "w") as fh:
            json.dump(report.to_json(), fh, indent=2, default=_json_default)
    return report


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(type(v))


def _flow_experiment(cfg, report, run_dir, u0, t0):
    prob = cfg.problem()
    scfg = cfg.stepper_config()
    ckdir = run_dir / "checkpoints"
    count = [0]

    def on_ckpt(state):
        count[0] += 1
        write_checkpoint(state, ckdir / f"ckpt_{count[0]:04d}.bin")

    writer = DiagnosticsWriter(run_dir / "diagnostics.csv")
    result = None
    try:
        result = run(prob, scfg, hooks=[writer], u0=u0, t0=t0,
                     checkpoint_every=cfg.checkpoint_every, on_checkpoint=on_ckpt)
    finally:
        writer.close()
        if result is not None and result.state is not None:
            final = result.state
        else:
            dom = prob.domain
            final = FlowState(t0, u0 if u0 is not None else ScalarField(dom, np.zeros(dom.shape)),
                              None, None)
        write_checkpoint(final, ckdir / "final.bin")

    prob = result.problem   # gauge-fixed
    report.termination = result.termination.value
    report.steps = result.steps
    report.message = result.message
    report.final_t = None if result.state is None else float(result.state.t)
    report.extras["rejected"] = result.rejected
    report.extras["min_eig_seen"] = result.min_eig_seen
    report.extras["min_trace_seen"] = result.min_trace_seen
    report.extras["gauge_shift"] = prob.gauge_shift
    if result.state is None or not result.records:
        return report

    records = result.records
    sup_f = prob.sup_f()
    if prob.variant is not Variant.REFERENCE and u0 is not None and t0 == 0.0:
        # a perturbed start changes F(0); the bound uses the actual initial value
        sup_f = max(sup_f, records[0].sup_abs_F)
    checks = checks_for(prob.variant, records, sup_f, cfg.c_max)
    checks.append(CheckReport(
        "positivity_every_step",
        "pass" if result.min_eig_seen > 0 and result.min_trace_seen > 0 else "fail",
        min(result.min_eig_seen, result.min_trace_seen),
        {"min_eig": result.min_eig_seen, "min_trace": result.min_trace_seen}))
    expect_converge = prob.variant is not Variant.REFERENCE
    if expect_converge:
        ok = result.termination is Termination.CONVERGED
    else:
        ok = result.termination in (Termination.CONVERGED, Termination.TIME_LIMIT)
    checks.append(CheckReport("termination", "pass" if ok else "fail", constants={
        "termination": result.termination.value, "t": report.final_t}))

    dv = np.real(np.linalg.det(cfg.background)) * np.ones(prob.domain.shape)
    if result.termination is Termination.CONVERGED:
        try:
            sol = stationary_solution(cfg, prob)
        except (NonConvergence, DegenerateMetric) as exc:
            checks.append(CheckReport("oracle_agreement", "fail", constants={"error": str(exc)}))
            sol = None
        if sol is not None:
            gap = normalized_gap(result.state.u, sol["u"], prob.variant, dv)
            report.oracle_gap = gap
            tol = cfg.oracle_tol if cfg.oracle_tol is not None else 1e-6
            checks.append(CheckReport("oracle_agreement", "pass" if gap <= tol else "fail",
                                      tol - gap, {"gap": gap, "tolerance": tol,
                                                  "equation": sol["equation"],
                                                  "oracle_residual": sol["residual"]}))

    if cfg.perturbation and u0 is None:
        u1 = cfg.perturbed_start()
        other = run(prob, scfg, u0=u1)
        gap = normalized_gap(result.state.u, other.state.u, prob.variant, dv) \
            if other.state is not None else float("inf")
        ok = other.termination is Termination.CONVERGED and gap <= 1e-6
        report.extras["perturbed_run"] = {
            "termination": other.termination.value, "steps": other.steps,
            "t": None if other.state is None else other.state.t, "message": other.message}
        checks.append(CheckReport("uniqueness", "pass" if ok else "fail", 1e-6 - gap,
                                  {"gap": gap, "perturbation_sup": u1.sup()}))
    report.checks = checks
    return report


# -- command line -----------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    if getattr(args, "preset", None):
        doc = {"preset": args.preset}
        if getattr(args, "config", None):
            raise ConfigError(["give either --config or --preset, not both"])
        return config_from_dict(doc)
    if not getattr(args, "config", None):
        raise ConfigError(["one of --config or --preset is required"])
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {args.config}: {exc}"]) from exc
    return parse_config(text)


def _print_report(report: RunReport) -> None:
    print(f"run {report.run_id}: {report.termination}"
          + (f" at t={report.final_t:.6g}" if report.final_t is not None else "")
          + f", {report.steps} steps, {report.wall_clock:.1f} s")
    if report.oracle_gap is not None:
        print(f"  oracle gap {report.oracle_gap:.3e}")
    if "T" in report.extras:
        print(f"  maximal existence time T = {report.extras['T']!r}")
    for c in report.checks:
        print(f"  {c.verdict:>13}  {c.name}")
    if report.message:
        print(f"  {report.message}")
    if report.run_dir is not None:
        print(f"  output: {report.run_dir}")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.checkpoint_every is not None:
        cfg.checkpoint_every = args.checkpoint_every
        cfg.echo["checkpoint_every"] = args.checkpoint_every
        cfg.overrides = sorted(set(cfg.overrides) | {"checkpoint_every"})
    report = run_experiment(cfg, out=args.out)
    _print_report(report)
    return report.exit_code


def _run_dir_of(ckpt: Path) -> Path:
    for d in (ckpt.parent, ckpt.parent.parent):
        if (d / "config.json").exists():
            return d
    raise ConfigError([f"no config.json next to {ckpt} or its parent directory"])


def cmd_resume(args) -> int:
    ckpt = Path(args.checkpoint)
    run_dir = _run_dir_of(ckpt)
    doc = json.loads((run_dir / "config.json").read_text())
    resolved = dict(doc["resolved"])
    if args.t_end is not None:
        resolved.setdefault("stepper", {})["t_end"] = args.t_end
    cfg = config_from_dict(resolved)
    cfg.preset = doc.get("preset")
    try:
        cp = read_checkpoint(ckpt, expect=cfg.domain())
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out if args.out is not None else run_dir.parent
    report = run_experiment(cfg, out=out, u0=cp.u, t0=cp.t, resumed_from=str(ckpt))
    _print_report(report)
    return report.exit_code


def cmd_oracle(args) -> int:
    cfg = _load_config(args)
    if cfg.variant == "classes":
        a0, b = cfg.class_pair()
        out = {"T": max_existence_time(a0, b), "T_bisection": bisect_existence_time(a0, b, t_max=1e12)}
    else:
        prob = cfg.problem()
        sol = stationary_solution(cfg, prob)
        if sol is None:
            print("error: the reference variant has no stationary equation", file=sys.stderr)
            return EXIT_CONFIG
        u = sol["u"]
        out = {"equation": sol["equation"], "residual": sol["residual"], "c": sol["c"],
               "sup_u": u.sup()}
    print(json.dumps(out, indent=2, default=repr))
    return EXIT_OK


def cmd_check(args) -> int:
    path = Path(args.diagnostics)
    records = read_diagnostics(path)
    variant, sup_f, c_max = args.variant, args.sup_f, args.c_max
    cfg_path = path.parent / "config.json"
    if cfg_path.exists() and (variant is None or sup_f is None):
        cfg = config_from_dict(json.loads(cfg_path.read_text())["resolved"])
        prob = cfg.problem()
        if prob.variant is Variant.CALABI_YAU:
            from .flow import gauge_fix, is_gauge_fixed
            if not is_gauge_fixed(prob):
                prob = gauge_fix(prob)
        variant = variant or prob.variant.value
        sup_f = sup_f if sup_f is not None else prob.sup_f()
        c_max = c_max if c_max is not None else cfg.c_max
    if variant is None:
        raise ConfigError(["--variant is required when no config.json sits next to the CSV"])
    if sup_f is None:
        sup_f = records[0].sup_abs_F
    checks = checks_for(variant, records, sup_f, c_max)
    for c in checks:
        print(f"{c.verdict:>13}  {c.name}  {json.dumps(c.to_json()['constants'], default=repr)}")
    return EXIT_CHECK if any(c.verdict == "fail" for c in checks) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kahlerflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="integrate a flow and write a run directory")
    r.add_argument("--config")
    r.add_argument("--preset")
    r.add_argument("--out")
    r.add_argument("--checkpoint-every", type=float)
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("resume", help="continue a run from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--t-end", type=float)
    r.add_argument("--out")
    r.set_defaults(func=cmd_resume)

    r = sub.add_parser("oracle", help="stationary solve only")
    r.add_argument("--config")
    r.add_argument("--preset")
    r.set_defaults(func=cmd_oracle)

    r = sub.add_parser("check", help="re-run the monitors on a stored diagnostics CSV")
    r.add_argument("--diagnostics", required=True)
    r.add_argument("--variant", choices=[v.value for v in Variant])
    r.add_argument("--sup-f", type=float)
    r.add_argument("--c-max", type=float)
    r.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
