"""Synthetic control estimator.

Donor weights solve a predictor-matching quadratic program over the
probability simplex for a given diagonal predictor-importance matrix V. V is
chosen by a derivative-free multistart search that minimises the outcome
MSPE on a later validation part of the pre-treatment window, with W fitted
on predictors from the earlier training part. The final W is re-fitted on
the whole pre-treatment window using the chosen V.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .errors import SynthPanelError
from .panel import DesignMatrices, Panel, PredictorSpec, TreatmentSpec, build_design

LOGGER = logging.getLogger(__name__)

RMSE_FLOOR = 1e-12
N_RANDOM_RESTARTS = 5


class NonFiniteInput(SynthPanelError, ValueError):
    pass


class DegenerateProblem(UserWarning):
    """All predictor weights are zero; uniform donor weights were returned."""


class OptimizerDidNotConverge(UserWarning):
    """The predictor-weight search stopped on its evaluation budget."""


def solve_w(X1, X0, v) -> tuple[np.ndarray, float]:
    """Donor weights minimising ``(X1 - X0 w)' diag(v) (X1 - X0 w)`` on the simplex.

    Returns ``(w, objective)``. The solution is exact up to floating point
    (Wolfe's minimum-norm-point method); for ``J == 1`` it is ``[1.0]``.
    """
    w, obj, _ = _solve_w(X1, X0, v)
    return w, obj


def _solve_w(X1, X0, v) -> tuple[np.ndarray, float, bool]:
    X1 = np.ascontiguousarray(X1, dtype=np.float64).reshape(-1)
    X0 = np.ascontiguousarray(X0, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64).reshape(-1)
    if X0.ndim != 2 or X0.shape[0] != X1.shape[0] or v.shape[0] != X1.shape[0]:
        raise ValueError(f"shape mismatch: X1 {X1.shape}, X0 {X0.shape}, v {v.shape}")
    if X0.shape[1] < 1:
        raise ValueError("need at least one donor")
    if not (np.all(np.isfinite(X1)) and np.all(np.isfinite(X0)) and np.all(np.isfinite(v))):
        raise NonFiniteInput("solve_w received non-finite input")
    if np.any(v < 0):
        raise ValueError("predictor weights must be nonnegative")
    J = X0.shape[1]
    if not np.any(v > 0):
        warnings.warn("all predictor weights are zero", DegenerateProblem, stacklevel=3)
        return np.full(J, 1.0 / J), 0.0, True
    w, obj, _, converged = _kernels.weighted_simplex_lsq(X1, X0, v)
    if not converged:
        LOGGER.warning("simplex QP stopped before reaching the KKT tolerance")
    return w, float(obj), converged


@dataclass(frozen=True)
class TrainValSplit:
    """Chronological split of the pre-period; ``n_train=None`` means ceil(T_pre / 2)."""

    n_train: int | None = None

    def masks(self, n_pre: int) -> tuple[np.ndarray, np.ndarray]:
        n_train = math.ceil(n_pre / 2) if self.n_train is None else int(self.n_train)
        if n_pre < 2 or not 1 <= n_train < n_pre:
            raise ValueError(f"cannot split {n_pre} pre-periods with n_train={n_train}")
        train = np.zeros(n_pre, dtype=bool)
        train[:n_train] = True
        return train, ~train


@dataclass
class SolverDiagnostics:
    n_evaluations: int = 0
    restarts: int = 0
    best_restart: int = 0
    converged: bool = True
    qp_converged: bool = True
    non_unique_weights: bool = False
    degenerate: bool = False
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_evaluations": self.n_evaluations,
            "restarts": self.restarts,
            "best_restart": self.best_restart,
            "converged": self.converged,
            "qp_converged": self.qp_converged,
            "non_unique_weights": self.non_unique_weights,
            "degenerate": self.degenerate,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True, eq=False)
class WeightSolution:
    w: np.ndarray
    v: np.ndarray
    inner_objective: float
    validation_mspe: float
    donors: tuple[str, ...]
    predictor_names: tuple[str, ...]
    diagnostics: SolverDiagnostics

    def weights_by_donor(self) -> dict[str, float]:
        return {d: float(x) for d, x in zip(self.donors, self.w)}


@dataclass(frozen=True, eq=False)
class GapSeries:
    """Observed, synthetic and gap paths over the analysis window."""

    periods: tuple[int, ...]
    observed: np.ndarray
    synthetic: np.ndarray
    t0: int
    gap: np.ndarray = field(init=False)

    def __post_init__(self):
        observed = np.asarray(self.observed, dtype=np.float64)
        synthetic = np.asarray(self.synthetic, dtype=np.float64)
        if observed.shape != synthetic.shape or observed.shape != (len(self.periods),):
            raise ValueError("observed/synthetic/periods lengths differ")
        object.__setattr__(self, "periods", tuple(int(p) for p in self.periods))
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "synthetic", synthetic)
        object.__setattr__(self, "gap", observed - synthetic)

    @property
    def post_mask(self) -> np.ndarray:
        return np.array([p >= self.t0 for p in self.periods])

    @property
    def pre_mask(self) -> np.ndarray:
        return ~self.post_mask

    @property
    def pre_rmse(self) -> float:
        return float(np.sqrt(np.mean(self.gap[self.pre_mask] ** 2)))

    @property
    def post_rmse(self) -> float:
        return float(np.sqrt(np.mean(self.gap[self.post_mask] ** 2)))

    @property
    def perfect_prefit(self) -> bool:
        return self.pre_rmse < RMSE_FLOOR

    @property
    def effect_avg_post(self) -> float:
        return float(np.mean(self.gap[self.post_mask]))

    @property
    def effect_end_of_sample(self) -> float:
        return float(self.gap[-1])


def _start_points(X_train: np.ndarray, K: int, rng: np.random.Generator) -> list[np.ndarray]:
    starts = [np.full(K, 1.0 / K)]
    # predictor scale normalisation: v_k proportional to 1 / var_k across units
    var = np.array([np.var(np.sort(row)) for row in X_train])
    inv = np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), 0.0)
    starts.append(inv / inv.sum() if inv.sum() > 0 else np.full(K, 1.0 / K))
    starts.extend(rng.dirichlet(np.ones(K)) for _ in range(N_RANDOM_RESTARTS))
    return starts


def _simplex_lattice(K: int, n: int) -> np.ndarray:
    heads = [c for c in itertools.product(range(n + 1), repeat=K - 1) if sum(c) <= n]
    return np.array([[*c, n - sum(c)] for c in heads], dtype=np.float64) / n


def _lattice_start(X1t, X0t, Y1v, Y0v, K: int) -> np.ndarray | None:
    if K > 3:
        return None
    grid = _simplex_lattice(K, 100 if K == 2 else 20)
    losses = [_kernels.validation_loss(g, X1t, X0t, Y1v, Y0v) for g in grid]
    return grid[int(np.argmin(losses))]


def _weights_non_unique(X0: np.ndarray, v: np.ndarray, w: np.ndarray) -> bool:
    """True when another simplex point attains the same fitted predictors."""
    J = X0.shape[1]
    if J == 1:
        return False
    A = np.sqrt(v)[:, None] * X0
    support = w > 1e-10
    scale = max(np.abs(A).max(), 1e-300)
    A_eq = np.vstack([A / scale, np.ones((1, J))])
    # affine dependence inside the support
    if np.linalg.matrix_rank(A_eq[:, support], tol=1e-10) < support.sum():
        return True
    if support.all():
        return False
    # feasible direction d: A d = 0, 1'd = 0, d >= 0 off-support
    c = np.where(support, 0.0, -1.0)
    bounds = [(-1.0, 1.0) if s else (0.0, 1.0) for s in support]
    res = linprog(c, A_eq=A_eq, b_eq=np.zeros(A_eq.shape[0]), bounds=bounds, method="highs")
    return bool(res.status == 0 and -res.fun > 1e-7)


def solve_v(design: DesignMatrices, split: TrainValSplit | None = None, seed: int = 0,
            max_fev: int | None = None) -> WeightSolution:
    """Choose predictor weights V on the training/validation split, then fit W.

    Returns the :class:`WeightSolution` with ``w`` re-fitted on the complete
    pre-period using the selected ``v``.
    """
    split = split or TrainValSplit()
    K, J = design.n_predictors, design.n_donors
    train, val = split.masks(len(design.pre_periods))
    X1t, X0t = design.predictors_on(train)
    Y1v = np.ascontiguousarray(design.Y1_pre[val])
    Y0v = np.ascontiguousarray(design.Y0_pre[val])
    diag = SolverDiagnostics(warnings=list(design.warnings))

    if K == 1:
        v = np.ones(1)
        best_f = float(_kernels.validation_loss(v, X1t, X0t, Y1v, Y0v))
        diag.n_evaluations = 1
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), K, J]))
        starts = _start_points(np.column_stack([X1t, X0t]), K, rng)
        lattice = _lattice_start(X1t, X0t, Y1v, Y0v, K)
        if lattice is not None:
            starts.append(lattice)
        budget = max_fev or 200 * K
        best = None
        for idx, u0 in enumerate(starts):
            f0 = _kernels.validation_loss(u0, X1t, X0t, Y1v, Y0v)
            u, f, nfev, conv = _kernels.nelder_mead(
                np.ascontiguousarray(u0), 0.5 / K, X1t, X0t, Y1v, Y0v,
                budget, 1e-4, 1e-8 * f0,
            )
            diag.n_evaluations += int(nfev) + 1
            # strict < keeps the lowest restart index on ties
            if best is None or f < best[1]:
                best = (u, float(f), idx, bool(conv))
        u, best_f, diag.best_restart, diag.converged = best
        diag.restarts = len(starts)
        v = np.abs(u)
        v = v / v.sum() if v.sum() > 0 else np.full(K, 1.0 / K)
        if not diag.converged:
            msg = "predictor-weight search hit its evaluation budget; best v kept"
            warnings.warn(msg, OptimizerDidNotConverge, stacklevel=2)
            diag.warnings.append(msg)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateProblem)
        w, obj, qp_ok = _solve_w(design.X1, design.X0, v)
    diag.degenerate = any(issubclass(c.category, DegenerateProblem) for c in caught)
    diag.qp_converged = qp_ok
    diag.non_unique_weights = _weights_non_unique(np.asarray(design.X0), v, w)
    return WeightSolution(
        w=w,
        v=v,
        inner_objective=obj,
        validation_mspe=best_f,
        donors=design.donors,
        predictor_names=design.predictor_names,
        diagnostics=diag,
    )


def synthesize(panel: Panel, spec: TreatmentSpec, w) -> np.ndarray:
    """Weighted donor average of the outcome for every period of the window."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(spec.donor_pool),):
        raise ValueError(f"expected {len(spec.donor_pool)} weights, got shape {w.shape}")
    cols = [panel.period_index(p) for p in spec.window_periods(panel)]
    rows = [panel.unit_index(d) for d in spec.donor_pool]
    return w @ panel.outcomes[np.ix_(rows, cols)]


def estimate_gaps(panel: Panel, spec: TreatmentSpec, predictors: PredictorSpec | None = None,
                  split: TrainValSplit | None = None, seed: int = 0
                  ) -> tuple[WeightSolution, GapSeries]:
    """Run build_design, solve_v and synthesize; return weights and the gap path."""
    design = build_design(panel, spec, predictors)
    solution = solve_v(design, split, seed=seed)
    periods = spec.window_periods(panel)
    cols = [panel.period_index(p) for p in periods]
    observed = panel.outcomes[panel.unit_index(spec.treated_unit), cols]
    gaps = GapSeries(periods, observed, synthesize(panel, spec, solution.w), spec.treatment_period)
    return solution, gaps
