"""Latent-factor panel generator used as a ground-truth oracle.

Untreated outcomes follow

    y_N[j, t] = delta[t] + theta[t] . z[j] + lambda[t] . mu[j] + eps[j, t]

and the treated unit (row 0) additionally receives ``effect[t - t0]`` from
``t0`` onwards. All randomness comes from numpy's PCG64 generator:
:func:`draw_factor_spec` draws the structure from ``[seed, 1]`` and
:func:`generate_factor_panel` draws the noise from ``spec.seed``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import SynthPanelError
from .panel import Panel, PredictorSpec, TreatmentSpec
from .scm import GapSeries

LOGGER = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian", "uniform")
FACTOR_PROCESSES = ("trend_ar1", "ar1")
LOADING_SCHEMES = ("archetype", "independent")


class DimensionMismatch(SynthPanelError, ValueError):
    pass


def unit_names(n_units: int) -> tuple[str, ...]:
    # zero padded so lexicographic order equals generation order
    width = max(2, len(str(n_units - 1)))
    return tuple(f"u{i:0{width}d}" for i in range(n_units))


@dataclass(frozen=True, eq=False)
class FactorModelSpec:
    """Fully specified factor model; row 0 of every unit-indexed array is treated."""

    n_units: int
    n_periods: int
    t0: int
    n_factors: int
    time_effects: np.ndarray  # (T,)
    factors: np.ndarray  # (T, H)
    loadings: np.ndarray  # (n_units, H)
    covariate_coefs: np.ndarray  # (T, m)
    covariates: np.ndarray  # (n_units, m)
    sigma_eps: float
    effect: np.ndarray  # (T - t0 + 1,)
    seed: int
    noise: str = "gaussian"
    first_period: int = 1
    convex_hull_guarantee: bool = False
    hull_donors: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("time_effects", "factors", "loadings", "covariate_coefs", "covariates", "effect"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        T, n, H = self.n_periods, self.n_units, self.n_factors
        m = self.covariates.shape[1] if self.covariates.ndim == 2 else -1
        checks = {
            "time_effects": (self.time_effects.shape, (T,)),
            "factors": (self.factors.shape, (T, H)),
            "loadings": (self.loadings.shape, (n, H)),
            "covariates": (self.covariates.shape, (n, m)),
            "covariate_coefs": (self.covariate_coefs.shape, (T, m)),
            "effect": (self.effect.shape, (T - self.t0 + 1,)),
        }
        for name, (got, want) in checks.items():
            if got != want:
                raise DimensionMismatch(f"{name} has shape {got}, expected {want}")
        if n < 2 or not 2 <= self.t0 <= T:
            raise DimensionMismatch(f"need n_units >= 2 and 2 <= t0 <= n_periods (t0={self.t0})")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be >= 0")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"noise must be one of {NOISE_KINDS}")
        if self.convex_hull_guarantee and len(self.hull_donors) < 2:
            raise ValueError("convex hull guarantee needs >= 2 donor rows")

    @property
    def periods(self) -> tuple[int, ...]:
        return tuple(range(self.first_period, self.first_period + self.n_periods))

    @property
    def treatment_period(self) -> int:
        return self.first_period + self.t0 - 1

    def treatment_spec(self) -> TreatmentSpec:
        names = unit_names(self.n_units)
        periods = self.periods
        return TreatmentSpec(names[0], self.treatment_period, names[1:], (periods[0], periods[-1]))


@dataclass(frozen=True)
class FactorDGP:
    """Recipe for drawing a :class:`FactorModelSpec` from a seed.

    Defaults are the oracle calibration used by the acceptance suite: 19
    donors, 52 periods, treatment at period 19, two factors, noise sd 0.01
    and a treated unit inside the convex hull of three donors.

    ``loading_scheme='archetype'`` places ``hull_size`` donors at the
    vertices of a loading simplex and draws every other unit, treated
    included, as a Dirichlet mix of those vertices, so the treated unit is
    exchangeable with the non-vertex donors when ``treated_concentration``
    is 1; larger values pull the treated unit towards the hull centroid.
    ``'independent'`` draws all
    loadings uniformly and then mixes only the treated unit.

    ``factor_process='trend_ar1'`` uses a linear trend factor plus a
    stationary AR(1) factor; ``'ar1'`` uses only AR(1) factors. With
    ``equal_loadings`` every unit shares the same loadings, so the factor
    component is common and parallel trends hold.
    """

    n_donors: int = 19
    n_periods: int = 52
    t0: int = 19
    n_factors: int = 2
    sigma_eps: float = 0.01
    effect: float | Sequence[float] = 0.0
    n_covariates: int = 0
    noise: str = "gaussian"
    factor_process: str = "trend_ar1"
    ar_coef: float = 0.7
    ar_scale: float = 0.3
    trend_scale: float = 1.0
    time_trend: float = 0.02
    convex_hull: bool = True
    hull_size: int = 3
    loading_scheme: str = "archetype"
    treated_concentration: float = 10.0
    equal_loadings: bool = False
    first_period: int = 1
    seed: int = 0

    def build(self, seed: int | None = None) -> FactorModelSpec:
        return draw_factor_spec(self if seed is None else replace(self, seed=int(seed)))


def _factor_paths(dgp: FactorDGP, rng: np.random.Generator) -> np.ndarray:
    T, H = dgp.n_periods, dgp.n_factors
    out = np.zeros((T, H))
    start = 0
    if dgp.factor_process == "trend_ar1" and H >= 1:
        out[:, 0] = dgp.trend_scale * np.arange(T) / T
        start = 1
    elif dgp.factor_process not in FACTOR_PROCESSES:
        raise ValueError(f"factor_process must be one of {FACTOR_PROCESSES}")
    for h in range(start, H):
        x = rng.normal(0.0, dgp.ar_scale / np.sqrt(1 - dgp.ar_coef**2))
        for t in range(T):
            x = dgp.ar_coef * x + rng.normal(0.0, dgp.ar_scale)
            out[t, h] = x
    return out


def draw_factor_spec(dgp: FactorDGP) -> FactorModelSpec:
    """Draw time effects, factors, loadings and covariates for ``dgp``."""
    rng = np.random.default_rng([int(dgp.seed), 1])
    n_units, T, H, m = dgp.n_donors + 1, dgp.n_periods, dgp.n_factors, dgp.n_covariates
    time_effects = dgp.time_trend * np.arange(1, T + 1) + np.cumsum(rng.normal(0.0, 0.02, T))
    factors = _factor_paths(dgp, rng)
    if dgp.loading_scheme not in LOADING_SCHEMES:
        raise ValueError(f"loading_scheme must be one of {LOADING_SCHEMES}")
    loadings = rng.uniform(0.0, 1.0, (n_units, H))
    covariates = rng.normal(0.0, 1.0, (n_units, m))
    covariate_coefs = rng.normal(0.0, 0.1, (T, m))
    hull: tuple[int, ...] = ()
    if dgp.equal_loadings:
        loadings[:] = loadings[0]
    elif dgp.convex_hull:
        k = min(max(dgp.hull_size, 2), dgp.n_donors)
        hull = tuple(sorted(int(i) for i in rng.choice(np.arange(1, n_units), size=k, replace=False)))
        mixed = [0] if dgp.loading_scheme == "independent" else [
            i for i in range(n_units) if i not in hull
        ]
        mix = rng.dirichlet(np.ones(k), size=len(mixed))
        mix[0] = rng.dirichlet(np.full(k, float(dgp.treated_concentration)))
        loadings[mixed] = mix @ loadings[list(hull)]
        if m:
            covariates[mixed] = mix @ covariates[list(hull)]
    n_post = T - dgp.t0 + 1
    effect = np.broadcast_to(np.asarray(dgp.effect, dtype=np.float64), (n_post,)).copy()
    noise_seed = int(np.random.SeedSequence([int(dgp.seed), 2]).generate_state(1, np.uint64)[0])
    return FactorModelSpec(
        n_units=n_units,
        n_periods=T,
        t0=dgp.t0,
        n_factors=H,
        time_effects=time_effects,
        factors=factors,
        loadings=loadings,
        covariate_coefs=covariate_coefs,
        covariates=covariates,
        sigma_eps=dgp.sigma_eps,
        effect=effect,
        seed=noise_seed,
        noise=dgp.noise,
        first_period=dgp.first_period,
        convex_hull_guarantee=bool(hull),
        hull_donors=hull,
    )


def untreated_outcomes(spec: FactorModelSpec, noise: np.ndarray | None = None) -> np.ndarray:
    """Factor-model outcomes without the treatment effect, shape (n_units, T)."""
    y = (
        spec.time_effects[None, :]
        + spec.covariates @ spec.covariate_coefs.T
        + spec.loadings @ spec.factors.T
    )
    return y if noise is None else y + noise


def _draw_noise(spec: FactorModelSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    shape = (spec.n_units, spec.n_periods)
    if spec.noise == "gaussian":
        return rng.normal(0.0, 1.0, shape) * spec.sigma_eps
    half_width = np.sqrt(3.0) * spec.sigma_eps
    return rng.uniform(-half_width, half_width, shape)


def generate_factor_panel(spec: FactorModelSpec) -> tuple[Panel, GapSeries]:
    """Simulate a panel and return it with the exact injected effect path."""
    untreated = untreated_outcomes(spec, _draw_noise(spec))
    observed = untreated.copy()
    observed[0, spec.t0 - 1:] += spec.effect
    covs = {f"z{k + 1}": np.repeat(spec.covariates[:, [k]], spec.n_periods, axis=1)
            for k in range(spec.covariates.shape[1])}
    panel = Panel(unit_names(spec.n_units), spec.periods, observed, covs, outcome_name="y")
    truth = GapSeries(spec.periods, observed[0], untreated[0], spec.treatment_period)
    return panel, truth


def replication_seed(seed: int, rep: int) -> int:
    """Sub-seed for replication ``rep``; independent of evaluation order."""
    return int(np.random.SeedSequence([int(seed), int(rep)]).generate_state(1, np.uint64)[0])


@dataclass
class Replication:
    rep: int
    seed: int
    p_value_exact: float | None = None
    p_value_weighted: float | None = None
    rmse_ratio: float | None = None
    effect_avg_post: float | None = None
    band_covers_end: bool | None = None
    in_time_p: float | None = None
    error: str | None = None
    placebos: object = field(default=None, repr=False)


@dataclass
class BatteryResult:
    replications: list[Replication]
    n_donors: int

    @property
    def p_values(self) -> np.ndarray:
        return np.array([r.p_value_exact for r in self.replications if r.error is None])

    @property
    def failures(self) -> list[Replication]:
        return [r for r in self.replications if r.error is not None]

    @property
    def in_time_p_values(self) -> np.ndarray:
        return np.array([r.in_time_p for r in self.replications
                         if r.error is None and r.in_time_p is not None])

    def fraction_at_most(self, threshold: float) -> float:
        p = self.p_values
        return float(np.mean(p <= threshold + 1e-12)) if p.size else float("nan")


def default_predictors(spec: FactorModelSpec, n_lags: int = 4) -> PredictorSpec:
    """Pre-period outcome mean plus outcomes at ``n_lags`` evenly spread pre-periods."""
    pre = spec.periods[: spec.t0 - 1]
    idx = np.unique(np.linspace(0, len(pre) - 1, n_lags).round().astype(int))
    return PredictorSpec(outcome_mean=True, special_periods=tuple(pre[i] for i in idx))


def run_battery(template: FactorDGP, n_reps: int, predictors: PredictorSpec | None = None,
                alpha: float = 0.1, keep_placebos: bool = False, threads: int = 1,
                in_time_shift: int | None = None) -> BatteryResult:
    """SCM + in-space placebo inference on ``n_reps`` independently drawn panels.

    With ``in_time_shift`` set, each replication also runs the in-time
    placebo that many periods before the true treatment date.

    Replication ``r`` uses the panel drawn from ``replication_seed(template.seed, r)``.
    Failures are recorded per replication and never abort the battery.
    """
    from .inference import (
        confidence_bands,
        in_space_placebos,
        in_time_placebo,
        permutation_pvalue,
        weighted_pvalue,
    )

    reps = []
    for r in range(n_reps):
        seed = replication_seed(template.seed, r)
        rec = Replication(rep=r, seed=seed)
        try:
            spec = template.build(seed)
            panel, _ = generate_factor_panel(spec)
            preds = predictors or default_predictors(spec)
            pset = in_space_placebos(panel, spec.treatment_spec(), preds, threads=threads)
            rec.p_value_exact = permutation_pvalue(pset)
            rec.p_value_weighted = weighted_pvalue(pset)
            rec.rmse_ratio = pset.treated_entry.rmse_ratio
            rec.effect_avg_post = pset.treated_entry.gaps.effect_avg_post
            bands = confidence_bands(pset, alpha)
            rec.band_covers_end = bool(bands.covers()[-1])
            if in_time_shift is not None:
                rec.in_time_p = in_time_placebo(panel, spec.treatment_spec(), preds,
                                                in_time_shift, threads=threads)
            if keep_placebos:
                rec.placebos = pset
        except SynthPanelError as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
            LOGGER.warning("replication %d failed: %s", r, rec.error)
        reps.append(rec)
    return BatteryResult(reps, template.n_donors)


def null_battery(spec_template: FactorDGP, n_reps: int, predictors: PredictorSpec | None = None,
                 **kwargs) -> BatteryResult:
    """:func:`run_battery` on a template whose effect path is identically zero."""
    if np.any(np.asarray(spec_template.effect, dtype=np.float64) != 0):
        raise ValueError("null_battery needs a zero effect path; use run_battery for power")
    return run_battery(spec_template, n_reps, predictors, **kwargs)


def heterogeneous_dgp(**overrides) -> FactorDGP:
    """Independent uniform loadings, no hull guarantee and a strong trend factor.

    Loadings differ across units, so parallel trends fail and plain DID is
    biased; used to compare DID with synthetic DID.
    """
    base = dict(loading_scheme="independent", convex_hull=False, trend_scale=2.0)
    base.update(overrides)
    return FactorDGP(**base)
