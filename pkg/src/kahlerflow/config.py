"""Experiment configuration: schema, validation and shipped presets.

A config is a YAML (or JSON) mapping.  Keys::

    preset            name of a shipped preset; other keys override it
    variant           calabi_yau | negative_ke | reference | classes
    n                 complex dimension, 1 or 2
    grid              points per real direction (int or list of 2n ints)
    periods           period per real direction (float or list)
    background        n x n Hermitian matrix (the flat metric g0 / omega_0)
    f_modes           list of {k: [2n ints], amplitude, phase}
    reference         {eta: n x n matrix, t_prime, log_density_modes: [...]}
                      the volume form is det(omega_0) * exp(sum of modes)
    stepper           any StepperConfig field
    monitor_every     time between diagnostics records
    out               output root directory
    checkpoint_every  time between checkpoints (a final one is always written)
    seed              seed for the random start perturbation
    perturbation      {amplitude, band}: rerun from a random band-limited u0
    classes           {A0: matrix, B: matrix} for the class tracker
    oracle_tol        sup-norm tolerance for the flow limit vs the oracle
    c_max             upper bound checked on the metric-equivalence constant

Complex matrix entries may be numbers or strings such as ``"0.2+0.1j"``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .classes import ClassVector
from .flow import FlowProblem, StepperConfig, Variant
from .torus import ScalarField, TorusDomain, fourier_modes_field, make_flat_metric

VARIANTS = ("calabi_yau", "negative_ke", "reference", "classes")
TOP_KEYS = {"preset", "variant", "n", "grid", "periods", "background", "f_modes", "reference",
            "stepper", "monitor_every", "out", "checkpoint_every", "seed", "perturbation",
            "classes", "oracle_tol", "c_max"}
MODE_KEYS = {"k", "amplitude", "phase"}
REFERENCE_KEYS = {"eta", "t_prime", "log_density_modes"}
PERTURBATION_KEYS = {"amplitude", "band"}
CLASS_KEYS = {"A0", "B"}
STEPPER_KEYS = {f.name for f in fields(StepperConfig)}

DEFAULTS = {
    "n": 1,
    "grid": 32,
    "periods": 1.0,
    "background": None,
    "f_modes": [],
    "stepper": {},
    "monitor_every": 0.05,
    "out": "runs",
    "checkpoint_every": None,
    "seed": 0,
    "perturbation": None,
    "reference": None,
    "classes": None,
    "oracle_tol": None,
    "c_max": 10.0,
}

PRESETS = {
    "cy_t2_n1": {
        "variant": "calabi_yau", "n": 1, "grid": 64,
        "f_modes": [{"k": [1, 0], "amplitude": 0.2, "phase": 0.0}],
        "stepper": {"t_min": 3.0, "t_end": 50.0, "tol": 1e-8},
        "oracle_tol": 1e-6,
    },
    "cy_t4_n2": {
        "variant": "calabi_yau", "n": 2, "grid": 16,
        "background": [[1.0, "0.2+0.1j"], ["0.2-0.1j", 1.5]],
        "f_modes": [{"k": [1, 0, 0, 0], "amplitude": 0.1, "phase": 0.0},
                    {"k": [0, 1, 1, 0], "amplitude": 0.08, "phase": 0.0}],
        "stepper": {"t_end": 50.0, "tol": 1e-8},
        "oracle_tol": 1e-5,
    },
    "ke_neg_t2": {
        "variant": "negative_ke", "n": 1, "grid": 32,
        "f_modes": [{"k": [1, 0], "amplitude": 0.2, "phase": 0.0}],
        "stepper": {"t_min": 8.0, "t_end": 50.0, "tol": 1e-8},
        "oracle_tol": 1e-6,
    },
    "ref_flow_t2": {
        "variant": "reference", "n": 1, "grid": 32,
        "background": [[1.0]],
        "reference": {"eta": [[1.5]], "t_prime": 2.0,
                      "log_density_modes": [{"k": [1, 0], "amplitude": -0.2, "phase": 0.0}]},
        "stepper": {"t_end": 1.5, "tol": 1e-8},
    },
    "uniq_test": {
        "variant": "negative_ke", "n": 1, "grid": 32,
        "f_modes": [{"k": [1, 0], "amplitude": 0.2, "phase": 0.0}],
        "stepper": {"t_min": 8.0, "t_end": 50.0, "tol": 1e-8},
        "perturbation": {"amplitude": 1e-2, "band": 2},
        "seed": 7,
        "oracle_tol": 1e-6,
    },
    "class_demo": {
        "variant": "classes", "n": 2,
        "classes": {"A0": [[2.0, 0.0], [0.0, 1.0]], "B": [[1.0, "0.3j"], ["-0.3j", 0.5]]},
    },
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _complex(v):
    if isinstance(v, str):
        return complex(v.replace(" ", ""))
    return complex(v)


def _matrix(v, n, what, errors):
    try:
        m = np.array([[_complex(x) for x in row] for row in np.atleast_2d(np.asarray(v, dtype=object))],
                     dtype=complex)
    except (TypeError, ValueError) as exc:
        errors.append(f"{what}: cannot parse matrix ({exc})")
        return None
    if m.shape != (n, n):
        errors.append(f"{what}: expected a {n}x{n} matrix, got shape {m.shape}")
        return None
    if np.max(np.abs(m - m.conj().T)) > 1e-12:
        errors.append(f"{what}: matrix is not Hermitian")
        return None
    return m


_STEPPER_DEFAULTS = {f.name: f.default for f in fields(StepperConfig)}


def _coerce(v, kind, what, errors):
    """YAML reads ``1e-6`` (no dot) as a string; accept it as a number."""
    if kind is bool:
        if isinstance(v, bool):
            return v
        errors.append(f"{what}: expected true/false, got {v!r}")
        return v
    try:
        x = float(v)
    except (TypeError, ValueError):
        errors.append(f"{what}: expected a number, got {v!r}")
        return v
    if kind is int:
        if x != int(x):
            errors.append(f"{what}: expected an integer, got {v!r}")
        return int(x)
    return x


def _is_pow2(k):
    return k > 0 and k & (k - 1) == 0


@dataclass
class ExperimentConfig:
    variant: str
    n: int = 1
    grid: tuple = (32, 32)
    periods: tuple = (1.0, 1.0)
    background: np.ndarray | None = None
    f_modes: list = field(default_factory=list)
    reference: dict | None = None
    stepper: dict = field(default_factory=dict)
    monitor_every: float = 0.05
    out: str = "runs"
    checkpoint_every: float | None = None
    seed: int = 0
    perturbation: dict | None = None
    classes: dict | None = None
    oracle_tol: float | None = None
    c_max: float | None = 10.0
    preset: str | None = None
    overrides: list = field(default_factory=list)
    echo: dict = field(default_factory=dict)

    # -- builders ----------------------------------------------------------------

    def domain(self) -> TorusDomain:
        return TorusDomain(self.n, tuple(self.grid), tuple(self.periods))

    def _modes(self, modes):
        return [(m["k"], m["amplitude"], m.get("phase", 0.0)) for m in modes]

    def problem(self) -> FlowProblem:
        if self.variant == "classes":
            raise ValueError("the class tracker has no PDE problem")
        dom = self.domain()
        g0 = make_flat_metric(dom, self.background)
        if self.variant == "reference":
            ref = self.reference
            eta = make_flat_metric(dom, ref["eta"])
            logd = fourier_modes_field(dom, self._modes(ref.get("log_density_modes", [])))
            omega = ScalarField(dom, np.linalg.det(self.background).real * np.exp(logd.values))
            return FlowProblem(Variant.REFERENCE, g0, eta=eta, t_prime=float(ref["t_prime"]),
                               omega=omega)
        f = fourier_modes_field(dom, self._modes(self.f_modes))
        return FlowProblem(Variant(self.variant), g0, f)

    def stepper_config(self) -> StepperConfig:
        kw = dict(self.stepper)
        kw.setdefault("record_every", self.monitor_every)
        return StepperConfig(**kw)

    def perturbed_start(self) -> ScalarField | None:
        """Seeded random trigonometric polynomial with ``|k_d| <= band`` and the requested sup norm."""
        if not self.perturbation:
            return None
        dom = self.domain()
        rng = np.random.default_rng(self.seed)
        band = int(self.perturbation.get("band", 3))
        ks = np.array(np.meshgrid(*[np.arange(-band, band + 1)] * (2 * self.n), indexing="ij"))
        ks = ks.reshape(2 * self.n, -1).T
        ks = ks[np.any(ks != 0, axis=1)]
        modes = [(k, rng.standard_normal(), rng.uniform(0, 2 * np.pi)) for k in ks]
        v = fourier_modes_field(dom, modes).values
        v = v * (float(self.perturbation["amplitude"]) / np.max(np.abs(v)))
        return ScalarField(dom, v)

    def class_pair(self) -> tuple[ClassVector, ClassVector]:
        return ClassVector(self.classes["A0"]), ClassVector(self.classes["B"])


def _validate_modes(modes, n, grid, what, errors):
    out = []
    if not isinstance(modes, list):
        errors.append(f"{what}: expected a list of modes")
        return out
    for i, m in enumerate(modes):
        if not isinstance(m, dict):
            errors.append(f"{what}[{i}]: expected a mapping with keys k, amplitude, phase")
            continue
        bad = set(m) - MODE_KEYS
        if bad:
            errors.append(f"{what}[{i}]: unknown keys {sorted(bad)}")
        if "k" not in m or "amplitude" not in m:
            errors.append(f"{what}[{i}]: k and amplitude are required")
            continue
        k = [int(v) for v in m["k"]]
        if len(k) != 2 * n:
            errors.append(f"{what}[{i}]: mode index {k} needs {2 * n} entries")
            continue
        if grid is not None:
            for d, (kd, g) in enumerate(zip(k, grid)):
                if abs(kd) > g // 3:
                    errors.append(f"{what}[{i}]: mode index {k} is out of band in direction {d} "
                                  f"(|k| <= {g // 3} for grid {g})")
        out.append({"k": k, "amplitude": float(m["amplitude"]), "phase": float(m.get("phase", 0.0))})
    return out


def _sub(d, keys, what, errors):
    if d is None:
        return None
    if not isinstance(d, dict):
        errors.append(f"{what}: expected a mapping")
        return None
    bad = set(d) - keys
    if bad:
        errors.append(f"{what}: unknown keys {sorted(bad)}")
    return d


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Merge ``doc`` over its preset (if any) and validate; collects every error."""
    errors: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["top level must be a mapping"])
    bad = set(doc) - TOP_KEYS
    if bad:
        errors.append(f"unknown keys {sorted(bad)}")
    merged = copy.deepcopy(DEFAULTS)
    preset = doc.get("preset")
    overrides = []
    if preset is not None:
        if preset not in PRESETS:
            errors.append(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        else:
            merged.update(copy.deepcopy(PRESETS[preset]))
    for key, val in doc.items():
        if key == "preset" or key not in TOP_KEYS:
            continue
        if preset in PRESETS and key in PRESETS[preset]:
            overrides.append(key)
        if key == "stepper" and isinstance(val, dict) and isinstance(merged.get("stepper"), dict):
            merged["stepper"] = {**merged["stepper"], **val}
        else:
            merged[key] = copy.deepcopy(val)

    variant = merged.get("variant")
    if variant not in VARIANTS:
        errors.append(f"variant must be one of {VARIANTS}, got {variant!r}")
    n = merged.get("n")
    if n not in (1, 2):
        errors.append(f"n must be 1 or 2, got {n!r}")
        n = None

    grid = merged.get("grid")
    grid_t = None
    if n is not None:
        g = [grid] if np.isscalar(grid) else list(grid)
        if len(g) == 1:
            g = g * (2 * n)
        elif len(g) == n:
            g = [v for v in g for _ in range(2)]
        if len(g) != 2 * n:
            errors.append(f"grid: need 1, {n} or {2 * n} counts, got {len(g)}")
        else:
            ok = True
            for v in g:
                if not isinstance(v, (int, np.integer)) or not _is_pow2(int(v)):
                    errors.append(f"grid must be a power of two, got {v}")
                    ok = False
                elif v < 8:
                    errors.append(f"grid counts must be >= 8, got {v}")
                    ok = False
            grid_t = tuple(int(v) for v in g) if ok else None

    periods = merged.get("periods")
    periods_t = None
    if n is not None:
        p = [periods] if np.isscalar(periods) else list(periods)
        if len(p) == 1:
            p = p * (2 * n)
        if len(p) != 2 * n or any(float(v) <= 0 for v in p):
            errors.append(f"periods: need {2 * n} positive values, got {periods!r}")
        else:
            periods_t = tuple(float(v) for v in p)

    background = None
    if n is not None:
        bg = merged.get("background")
        if bg is None:
            bg = np.eye(n)
        background = _matrix(bg, n, "background", errors)
        if background is not None and np.linalg.eigvalsh(background)[0] <= 0:
            errors.append("background: matrix is not positive definite")

    f_modes = []
    if n is not None:
        f_modes = _validate_modes(merged.get("f_modes") or [], n, grid_t, "f_modes", errors)

    reference = _sub(merged.get("reference"), REFERENCE_KEYS, "reference", errors)
    if variant == "reference":
        if reference is None:
            errors.append("reference: required for the reference variant")
        elif n is not None:
            if "eta" not in reference or "t_prime" not in reference:
                errors.append("reference: eta and t_prime are required")
            else:
                eta = _matrix(reference["eta"], n, "reference.eta", errors)
                if eta is not None and np.linalg.eigvalsh(eta)[0] <= 0:
                    errors.append("reference.eta: matrix is not positive definite")
                if not float(reference["t_prime"]) > 0:
                    errors.append("reference.t_prime must be positive")
                reference = {"eta": eta, "t_prime": float(reference["t_prime"]),
                             "log_density_modes": _validate_modes(
                                 reference.get("log_density_modes") or [], n, grid_t,
                                 "reference.log_density_modes", errors)}

    stepper = _sub(merged.get("stepper") or {}, STEPPER_KEYS, "stepper", errors) or {}
    stepper = {k: _coerce(v, type(_STEPPER_DEFAULTS[k]), f"stepper.{k}", errors)
               for k, v in stepper.items() if k in STEPPER_KEYS}
    if not errors:
        try:
            StepperConfig(**stepper)
        except (TypeError, ValueError) as exc:
            errors.append(f"stepper: {exc}")

    perturbation = _sub(merged.get("perturbation"), PERTURBATION_KEYS, "perturbation", errors)
    if perturbation is not None and "amplitude" not in perturbation:
        errors.append("perturbation: amplitude is required")

    classes = _sub(merged.get("classes"), CLASS_KEYS, "classes", errors)
    if variant == "classes":
        if classes is None or set(classes) != CLASS_KEYS:
            errors.append("classes: A0 and B are required for the classes variant")
        elif n is not None:
            a0 = _matrix(classes["A0"], n, "classes.A0", errors)
            b = _matrix(classes["B"], n, "classes.B", errors)
            if a0 is not None and np.linalg.eigvalsh(a0)[0] <= 0:
                errors.append("classes.A0: initial class is not positive")
            classes = {"A0": a0, "B": b}

    for key in ("monitor_every", "checkpoint_every", "oracle_tol", "c_max"):
        v = merged.get(key)
        if v is not None:
            v = merged[key] = _coerce(v, float, key, errors)
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            errors.append(f"{key} must be a positive number, got {v!r}")

    if errors:
        raise ConfigError(list(dict.fromkeys(errors)))
    if variant == "reference" and stepper.get("t_end", StepperConfig.t_end) > reference["t_prime"]:
        stepper["t_end"] = reference["t_prime"]

    cfg = ExperimentConfig(
        variant=variant, n=n, grid=grid_t, periods=periods_t, background=background,
        f_modes=f_modes, reference=reference, stepper=stepper,
        monitor_every=float(merged["monitor_every"]), out=str(merged["out"]),
        checkpoint_every=merged.get("checkpoint_every"), seed=int(merged.get("seed") or 0),
        perturbation=perturbation, classes=classes, oracle_tol=merged.get("oracle_tol"),
        c_max=merged.get("c_max"), preset=preset, overrides=sorted(overrides))
    cfg.echo = echo(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse a YAML/JSON document into a validated :class:`ExperimentConfig`."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse document: {exc}"]) from exc
    if doc is None:
        doc = {}
    return config_from_dict(doc)


def _plain(v):
    if isinstance(v, np.ndarray):
        if np.iscomplexobj(v) and not np.any(v.imag):
            v = v.real
        if np.iscomplexobj(v):
            return [[repr(complex(x)).strip("()") for x in row] for row in v]
        return v.tolist()
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def echo(cfg: ExperimentConfig) -> dict:
    """Fully resolved config as a JSON-safe dict that :func:`config_from_dict` accepts."""
    out = {}
    for f in fields(cfg):
        if f.name in ("echo", "overrides", "preset"):
            continue
        v = getattr(cfg, f.name)
        if v is None:
            continue
        out[f.name] = _plain(v)
    return out


def dumps(cfg: ExperimentConfig) -> str:
    doc = {"resolved": cfg.echo, "preset": cfg.preset, "overrides": cfg.overrides}
    return json.dumps(doc, indent=2, sort_keys=True)
