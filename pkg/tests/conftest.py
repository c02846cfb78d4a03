import numpy as np
import pytest

from kahlerflow.cli import run_experiment
from kahlerflow.config import config_from_dict
from kahlerflow.torus import TorusDomain, fourier_modes_field

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def preset_run(tmp_path_factory):
    """Run a shipped preset once per session; returns the RunReport."""
    cache = {}
    root = tmp_path_factory.mktemp("runs")

    def get(name, **overrides):
        key = (name, tuple(sorted((k, repr(v)) for k, v in overrides.items())))
        if key not in cache:
            cfg = config_from_dict({"preset": name, **overrides})
            cache[key] = (cfg, run_experiment(cfg, out=root))
        return cache[key]

    return get


def random_modes(rng, n, band, count, scale):
    out = []
    for _ in range(count):
        k = rng.integers(-band, band + 1, size=2 * n)
        if not np.any(k):
            k[0] = 1
        out.append((k, scale * rng.standard_normal(), rng.uniform(0, 2 * np.pi)))
    return out


def trig_field(dom, modes):
    return fourier_modes_field(dom, modes)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
