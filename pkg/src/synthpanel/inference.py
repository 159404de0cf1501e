"""Permutation inference for synthetic control estimates.

In-space placebos re-run the estimator with every donor relabelled as
treated; the post/pre RMSE ratio of the true treated unit is then ranked
against the placebo ratios. In-time placebos move the treatment date back
and use only data observed before the real treatment.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SynthPanelError
from .panel import Panel, PredictorSpec, TreatmentSpec
from .scm import RMSE_FLOOR, GapSeries, TrainValSplit, WeightSolution, estimate_gaps

LOGGER = logging.getLogger(__name__)


class InsufficientPrePeriods(SynthPanelError):
    pass


class TooFewPlacebos(SynthPanelError):
    pass


def rmse_ratio(gaps: GapSeries) -> float:
    """Post-treatment RMSE over pre-treatment RMSE, the latter floored at 1e-12."""
    return gaps.post_rmse / max(gaps.pre_rmse, RMSE_FLOOR)


@dataclass(frozen=True, eq=False)
class PlaceboEntry:
    unit: str
    gaps: GapSeries
    solution: WeightSolution | None = field(default=None, repr=False)

    @property
    def pre_rmse(self) -> float:
        return self.gaps.pre_rmse

    @property
    def post_rmse(self) -> float:
        return self.gaps.post_rmse

    @property
    def rmse_ratio(self) -> float:
        return rmse_ratio(self.gaps)

    @property
    def perfect_prefit(self) -> bool:
        return self.gaps.perfect_prefit


@dataclass(frozen=True, eq=False)
class PlaceboSet:
    entries: tuple[PlaceboEntry, ...]
    treated_entry: PlaceboEntry
    t0: int
    excluded: tuple[tuple[str, str], ...] = ()

    @property
    def n_units(self) -> int:
        return len(self.entries) + 1

    def all_entries(self) -> tuple[PlaceboEntry, ...]:
        return (self.treated_entry, *self.entries)

    def ratios(self) -> np.ndarray:
        """RMSE ratios, treated first."""
        return np.array([e.rmse_ratio for e in self.all_entries()])


def _placebo_job(panel, spec, predictors, split, seed, unit, pool):
    try:
        sol, gaps = estimate_gaps(panel, spec.with_treated(unit, pool), predictors, split, seed)
        return PlaceboEntry(unit, gaps, sol), None
    except (SynthPanelError, ValueError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def in_space_placebos(panel: Panel, spec: TreatmentSpec, predictors: PredictorSpec | None = None,
                      split: TrainValSplit | None = None, seed: int = 0, threads: int = 1
                      ) -> PlaceboSet:
    """Re-estimate with each donor treated and the original treated unit moved to the pool.

    Results are collected in donor-pool order whatever ``threads`` is; a
    failing placebo is listed in ``excluded`` instead of aborting the set.
    """
    spec.validate(panel)
    sol, gaps = estimate_gaps(panel, spec, predictors, split, seed)
    treated = PlaceboEntry(spec.treated_unit, gaps, sol)
    jobs = []
    for d in spec.donor_pool:
        pool = [u for u in spec.donor_pool if u != d] + [spec.treated_unit]
        jobs.append((d, pool))
    run = lambda job: _placebo_job(panel, spec, predictors, split, seed, *job)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    entries, excluded = [], []
    for (unit, _), (entry, err) in zip(jobs, results):
        if entry is None:
            LOGGER.warning("placebo %s excluded: %s", unit, err)
            excluded.append((unit, err))
        else:
            entries.append(entry)
    return PlaceboSet(tuple(entries), treated, spec.treatment_period, tuple(excluded))


def filter_placebos(pset: PlaceboSet, cutoff: float = 2.0) -> PlaceboSet:
    """Drop placebos whose pre-period RMSE exceeds ``cutoff`` times the treated one."""
    limit = cutoff * max(pset.treated_entry.pre_rmse, RMSE_FLOOR)
    kept, dropped = [], list(pset.excluded)
    for e in pset.entries:
        if e.pre_rmse > limit:
            dropped.append((e.unit, f"pre_rmse {e.pre_rmse:.6g} > {cutoff} x treated"))
        else:
            kept.append(e)
    return replace(pset, entries=tuple(kept), excluded=tuple(dropped))


def permutation_pvalue(pset: PlaceboSet) -> float:
    """Share of all units, treated included, whose RMSE ratio is >= the treated ratio."""
    ratios = pset.ratios()
    return float(np.sum(ratios >= ratios[0]) / ratios.size)


def placebo_weights(pset: PlaceboSet) -> np.ndarray:
    """Normalised weights favouring placebos whose pre-period fit resembles the treated one."""
    pre = np.maximum([e.pre_rmse for e in pset.all_entries()], RMSE_FLOOR)
    pi = np.minimum(pre[0] / pre, pre / pre[0])
    pi[0] = 1.0
    return pi / pi.sum()


def weighted_pvalue(pset: PlaceboSet) -> float:
    ratios = pset.ratios()
    return float(np.sum(placebo_weights(pset) * (ratios >= ratios[0])))


def per_period_pvalues(pset: PlaceboSet) -> np.ndarray:
    """Two-sided gap-magnitude permutation p-value for each period of the window."""
    gaps = np.abs(np.array([e.gaps.gap for e in pset.all_entries()]))
    return np.mean(gaps >= gaps[0], axis=0)


@dataclass(frozen=True, eq=False)
class Bands:
    periods: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray
    treated_gap: np.ndarray
    alpha: float

    def covers(self) -> np.ndarray:
        return (self.lower <= self.treated_gap) & (self.treated_gap <= self.upper)


def _nearest_rank_bounds(values: np.ndarray, alpha: float) -> tuple[float, float]:
    x = np.sort(values)
    n = x.size
    k = max(1, math.ceil(alpha / 2 * n - 1e-9))
    return float(x[k - 1]), float(x[n - k])


def confidence_bands(pset: PlaceboSet, alpha: float) -> Bands:
    """Per post-period placebo-gap quantile band at level ``alpha`` (nearest rank).

    The lower bound is the k-th smallest and the upper the k-th largest
    placebo gap, k = ceil(n * alpha / 2).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    n = len(pset.entries)
    if n < math.ceil(1 / alpha - 1e-9):
        raise TooFewPlacebos(f"{n} placebos cannot support a band at alpha={alpha}")
    treated = pset.treated_entry.gaps
    post = treated.post_mask
    placebo_gaps = np.array([e.gaps.gap for e in pset.entries])[:, post]
    bounds = [_nearest_rank_bounds(placebo_gaps[:, t], alpha) for t in range(placebo_gaps.shape[1])]
    lower, upper = (np.array(b) for b in zip(*bounds))
    periods = tuple(p for p, keep in zip(treated.periods, post) if keep)
    return Bands(periods, lower, upper, treated.gap[post], alpha)


def in_time_placebo_set(panel: Panel, spec: TreatmentSpec, predictors: PredictorSpec | None = None,
                        shift_years: int = 10, split: TrainValSplit | None = None, seed: int = 0,
                        threads: int = 1) -> PlaceboSet:
    """In-space placebo set with treatment moved ``shift_years`` earlier.

    The window ends just before the real treatment period, so no treated
    observations enter. Special predictor periods at or after the false
    date are dropped.
    """
    if shift_years < 1:
        raise ValueError("shift_years must be a positive integer")
    false_t0 = spec.treatment_period - shift_years
    window = (spec.window[0], spec.treatment_period - 1)
    shifted = TreatmentSpec(spec.treated_unit, false_t0, spec.donor_pool, window)
    periods = shifted.window_periods(panel)
    n_pre = sum(p < false_t0 for p in periods)
    if n_pre < 4 or len(periods) - n_pre < 1:
        raise InsufficientPrePeriods(
            f"false treatment at {false_t0} leaves {n_pre} pre-periods (need >= 4)"
        )
    if predictors is not None and predictors.special_periods:
        kept = tuple(p for p in predictors.special_periods if p < false_t0)
        if kept != predictors.special_periods:
            LOGGER.info("in-time placebo drops special periods %s",
                        sorted(set(predictors.special_periods) - set(kept)))
        predictors = replace(predictors, special_periods=kept)
    return in_space_placebos(panel, shifted, predictors, split, seed, threads)


def in_time_placebo(panel: Panel, spec: TreatmentSpec, predictors: PredictorSpec | None = None,
                    shift_years: int = 10, **kwargs) -> float:
    """Permutation p-value of the full pipeline run at a false, earlier date."""
    return permutation_pvalue(in_time_placebo_set(panel, spec, predictors, shift_years, **kwargs))


def leave_one_out(panel: Panel, spec: TreatmentSpec, predictors: PredictorSpec | None = None,
                  baseline: WeightSolution | None = None, threshold: float = 0.01,
                  split: TrainValSplit | None = None, seed: int = 0
                  ) -> list[tuple[str, GapSeries]]:
    """Refit without each donor whose baseline weight exceeds ``threshold``."""
    if len(spec.donor_pool) < 2:
        raise ValueError("leave-one-out needs at least two donors")
    if baseline is None:
        baseline, _ = estimate_gaps(panel, spec, predictors, split, seed)
    out = []
    for donor, weight in zip(spec.donor_pool, baseline.w):
        if weight > threshold:
            pool = [d for d in spec.donor_pool if d != donor]
            _, gaps = estimate_gaps(panel, spec.with_treated(spec.treated_unit, pool),
                                    predictors, split, seed)
            out.append((donor, gaps))
    return out


@dataclass
class InferenceReport:
    effect_avg_post: float
    effect_end_of_sample: float
    p_value_exact: float
    p_value_weighted: float | None
    in_time_placebo_p: float | None
    bands: Bands | None
    excluded_placebos: list[tuple[str, str]]
    rmse_ratio: float
    perfect_prefit: bool


def infer(pset: PlaceboSet, alpha: float = 0.1, in_time_p: float | None = None,
          weighted: bool = True) -> InferenceReport:
    """Summarise a placebo set into the headline inference numbers."""
    treated = pset.treated_entry
    try:
        bands = confidence_bands(pset, alpha)
    except TooFewPlacebos as exc:
        LOGGER.warning("no confidence band: %s", exc)
        bands = None
    return InferenceReport(
        effect_avg_post=treated.gaps.effect_avg_post,
        effect_end_of_sample=treated.gaps.effect_end_of_sample,
        p_value_exact=permutation_pvalue(pset),
        p_value_weighted=weighted_pvalue(pset) if weighted else None,
        in_time_placebo_p=in_time_p,
        bands=bands,
        excluded_placebos=list(pset.excluded),
        rmse_ratio=treated.rmse_ratio,
        perfect_prefit=treated.perfect_prefit,
    )
