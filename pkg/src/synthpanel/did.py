"""Difference-in-differences comparison estimators for one treated unit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .panel import Panel, TreatmentSpec
from .scm import GapSeries

ESTIMATOR_TAGS = ("did", "event_study", "sdid")


@dataclass(frozen=True, eq=False)
class DidResult:
    effect: float
    estimator_tag: str
    per_period: tuple[tuple[int, float], ...] | None = None
    unit_weights: np.ndarray | None = None
    time_weights: np.ndarray | None = None
    regularization: float | None = None
    t0: int | None = None

    def relative_time(self) -> tuple[tuple[int, float], ...]:
        """``per_period`` keyed by period minus the treatment period."""
        if self.per_period is None or self.t0 is None:
            return ()
        return tuple((p - self.t0, c) for p, c in self.per_period)


def _window_arrays(panel: Panel, spec: TreatmentSpec, min_pre: int = 1):
    spec.validate(panel, min_pre)
    periods = spec.window_periods(panel)
    cols = [panel.period_index(p) for p in periods]
    treated = panel.outcomes[panel.unit_index(spec.treated_unit), cols]
    donors = panel.outcomes[np.ix_([panel.unit_index(d) for d in spec.donor_pool], cols)]
    post = np.array([p >= spec.treatment_period for p in periods])
    return periods, treated, donors, post


def did_estimate(panel: Panel, spec: TreatmentSpec) -> DidResult:
    """Two-group, two-period means formula over the window."""
    _, treated, donors, post = _window_arrays(panel, spec)
    donor_mean = donors.mean(axis=0)
    effect = (treated[post].mean() - treated[~post].mean()) - (
        donor_mean[post].mean() - donor_mean[~post].mean()
    )
    return DidResult(float(effect), "did", t0=spec.treatment_period)


def _event_coefficients(treated, donors, periods, base_period):
    diff = treated - donors.mean(axis=0)
    coefs = diff - diff[periods.index(base_period)]
    return coefs


def event_study(panel: Panel, spec: TreatmentSpec) -> DidResult:
    """Per-period treated-minus-donor-mean differences relative to period T0 - 1.

    ``effect`` is the mean post-period coefficient minus the mean
    pre-period coefficient, which equals :func:`did_estimate` exactly.
    """
    periods, treated, donors, post = _window_arrays(panel, spec)
    pre_periods = [p for p, is_post in zip(periods, post) if not is_post]
    base = pre_periods[-1]
    coefs = _event_coefficients(treated, donors, periods, base)
    coefs[periods.index(base)] = 0.0
    effect = coefs[post].mean() - coefs[~post].mean()
    return DidResult(
        float(effect),
        "event_study",
        per_period=tuple((p, float(c)) for p, c in zip(periods, coefs)),
        t0=spec.treatment_period,
    )


def event_study_gaps(panel: Panel, spec: TreatmentSpec) -> GapSeries:
    """Event-study coefficient path as a gap series (synthetic identically zero)."""
    res = event_study(panel, spec)
    periods = tuple(p for p, _ in res.per_period)
    coefs = np.array([c for _, c in res.per_period])
    return GapSeries(periods, coefs, np.zeros_like(coefs), spec.treatment_period)


def event_study_placebo_pvalue(panel: Panel, spec: TreatmentSpec) -> float:
    """Permutation p-value of the event-study path's post/pre RMSE ratio."""
    from .inference import PlaceboEntry, PlaceboSet, permutation_pvalue

    treated = PlaceboEntry(spec.treated_unit, event_study_gaps(panel, spec))
    entries = []
    for d in spec.donor_pool:
        pool = [u for u in spec.donor_pool if u != d] + [spec.treated_unit]
        entries.append(PlaceboEntry(d, event_study_gaps(panel, spec.with_treated(d, pool))))
    return permutation_pvalue(PlaceboSet(tuple(entries), treated, spec.treatment_period))


def _simplex_lsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # min ||A w - b||^2 over the simplex
    A = np.ascontiguousarray(A, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    w, _, _, _ = _kernels.weighted_simplex_lsq(b, A, np.ones(A.shape[0]))
    return w


def default_regularization(donors_pre: np.ndarray, n_post: int, n_treated: int = 1) -> float:
    """(n_treated * T_post)^(1/4) times the sd of first-differenced donor pre-period outcomes."""
    diffs = np.diff(donors_pre, axis=1).ravel()
    sigma = float(np.std(diffs, ddof=1)) if diffs.size > 1 else 0.0
    return (n_treated * n_post) ** 0.25 * sigma


def sdid_unit_weights(treated_pre: np.ndarray, donors_pre: np.ndarray, zeta: float) -> np.ndarray:
    """Simplex weights with a free intercept and ridge penalty zeta^2 * T_pre * ||w||^2."""
    J, T_pre = donors_pre.shape
    if math.isinf(zeta):
        return np.full(J, 1.0 / J)
    A = donors_pre.T - donors_pre.T.mean(axis=0)
    b = treated_pre - treated_pre.mean()
    if zeta > 0:
        A = np.vstack([A, zeta * math.sqrt(T_pre) * np.eye(J)])
        b = np.concatenate([b, np.zeros(J)])
    return _simplex_lsq(A, b)


def sdid_time_weights(donors_pre: np.ndarray, donors_post: np.ndarray) -> np.ndarray:
    """Simplex weights on pre-periods matching donor post-period means, free intercept."""
    A = donors_pre - donors_pre.mean(axis=0)
    target = donors_post.mean(axis=1)
    return _simplex_lsq(A, target - target.mean())


def sdid_estimate(panel: Panel, spec: TreatmentSpec, regularization: float | str = "auto",
                  force_uniform: bool = False) -> DidResult:
    """Synthetic difference-in-differences with unit and time weights.

    ``regularization='auto'`` uses :func:`default_regularization`;
    ``math.inf`` forces uniform unit weights. ``force_uniform`` forces both
    weight vectors to be uniform, which reproduces :func:`did_estimate`.
    """
    _, treated, donors, post = _window_arrays(panel, spec, min_pre=4)
    if donors.shape[0] < 2:
        raise ValueError("synthetic DID needs at least two donors")
    donors_pre, donors_post = donors[:, ~post], donors[:, post]
    if regularization == "auto":
        zeta = default_regularization(donors_pre, int(post.sum()))
    else:
        zeta = float(regularization)
        if zeta < 0:
            raise ValueError("regularization must be >= 0")
    if force_uniform:
        omega = np.full(donors.shape[0], 1.0 / donors.shape[0])
        lam = np.full(donors_pre.shape[1], 1.0 / donors_pre.shape[1])
    else:
        omega = sdid_unit_weights(treated[~post], donors_pre, zeta)
        lam = sdid_time_weights(donors_pre, donors_post)
    treated_diff = treated[post].mean() - lam @ treated[~post]
    donor_diff = donors_post.mean(axis=1) - donors_pre @ lam
    effect = treated_diff - omega @ donor_diff
    return DidResult(
        float(effect),
        "sdid",
        unit_weights=omega,
        time_weights=lam,
        regularization=zeta,
        t0=spec.treatment_period,
    )
