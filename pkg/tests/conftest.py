from __future__ import annotations

import logging
import time

import numpy as np
import pytest

from helpers import make_panel
from synthpanel.panel import PredictorSpec, TreatmentSpec
from synthpanel.scm import estimate_gaps
from synthpanel.simgen import FactorDGP, generate_factor_panel, run_battery

# Fixed before any calibration run; acceptance batteries always use these.
ACCEPTANCE_SEED = 0
N_REPS = 200

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session", autouse=True)
def _quiet():
    logging.getLogger("synthpanel").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def warm_jit():
    """Load (or compile) every numba kernel once so timings exclude it."""
    spec = FactorDGP(seed=123).build()
    panel, _ = generate_factor_panel(spec)
    estimate_gaps(panel, spec.treatment_spec())
    # a generic random-walk fit reaches the Nelder-Mead path as well
    walk = make_panel(np.cumsum(np.random.default_rng(1).normal(size=(5, 16)), axis=1))
    estimate_gaps(walk, TreatmentSpec.all_others(walk, "u0", 12),
                  PredictorSpec(special_periods=(1, 4, 8, 11)))
    return True


@pytest.fixture(scope="session")
def null_battery_result(warm_jit):
    t = time.perf_counter()
    res = run_battery(FactorDGP(seed=ACCEPTANCE_SEED), N_REPS)
    return res, time.perf_counter() - t


@pytest.fixture(scope="session")
def effect_battery_result(warm_jit):
    t = time.perf_counter()
    res = run_battery(FactorDGP(seed=ACCEPTANCE_SEED, effect=0.5), N_REPS, in_time_shift=10)
    return res, time.perf_counter() - t


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
