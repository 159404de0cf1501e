"""Small panel builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from synthpanel.panel import Panel, TreatmentSpec


def make_panel(values, units=None, periods=None, covariates=None, name="y") -> Panel:
    values = np.asarray(values, dtype=float)
    units = units or tuple(f"u{i}" for i in range(values.shape[0]))
    periods = periods or tuple(range(1, values.shape[1] + 1))
    return Panel(tuple(units), tuple(periods), values, covariates or {}, outcome_name=name)


def all_others(panel: Panel, t0: int, treated: str | None = None) -> TreatmentSpec:
    return TreatmentSpec.all_others(panel, treated or panel.units[0], t0)
