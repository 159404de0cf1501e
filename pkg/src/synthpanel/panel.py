"""Balanced panels, treatment designs and predictor matrices."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import SynthPanelError

LOGGER = logging.getLogger(__name__)

UNIT_COLUMN = "unit"
PERIOD_COLUMN = "period"


class PanelError(SynthPanelError):
    """Base class for panel ingestion and validation failures."""


class MissingCell(PanelError):
    def __init__(self, unit: str, period: int, column: str):
        self.unit, self.period, self.column = unit, period, column
        super().__init__(f"missing cell: unit={unit!r}, period={period}, column={column!r}")


class DuplicateRow(PanelError):
    def __init__(self, unit: str, period: int, line: int):
        self.unit, self.period, self.line = unit, period, line
        super().__init__(f"duplicate row for unit={unit!r}, period={period} (line {line})")


class NonFiniteValue(PanelError):
    def __init__(self, unit: str, period: int, column: str, raw: str):
        self.unit, self.period, self.column = unit, period, column
        super().__init__(
            f"non-finite or unparsable value {raw!r}: unit={unit!r}, period={period}, column={column!r}"
        )


class UnknownColumn(PanelError):
    def __init__(self, column: str, available: Sequence[str]):
        self.column = column
        super().__init__(f"unknown column {column!r}; header has {list(available)}")


class InvalidPanel(PanelError):
    pass


class InvalidTreatmentSpec(SynthPanelError):
    pass


class EmptyPredictorSet(SynthPanelError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """Balanced unit x period grid of one outcome plus named covariates.

    ``outcomes`` and every covariate matrix have shape ``(n_units, n_periods)``
    and are read-only.
    """

    units: tuple[str, ...]
    periods: tuple[int, ...]
    outcomes: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    outcome_name: str = "outcome"

    def __post_init__(self):
        units = tuple(str(u) for u in self.units)
        periods = tuple(int(p) for p in self.periods)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "periods", periods)
        if len(set(units)) != len(units):
            raise InvalidPanel("unit identifiers must be unique")
        if any(b <= a for a, b in zip(periods, periods[1:])):
            raise InvalidPanel("periods must be strictly increasing")
        if len(units) < 2 or len(periods) < 3:
            raise InvalidPanel("a panel needs at least 2 units and 3 periods")
        shape = (len(units), len(periods))
        outcomes = _frozen(self.outcomes)
        if outcomes.shape != shape:
            raise InvalidPanel(f"outcomes shape {outcomes.shape} != {shape}")
        if not np.all(np.isfinite(outcomes)):
            raise InvalidPanel("outcomes contain non-finite values")
        covs = {}
        for name, mat in self.covariates.items():
            mat = _frozen(mat)
            if mat.shape != shape:
                raise InvalidPanel(f"covariate {name!r} shape {mat.shape} != {shape}")
            if not np.all(np.isfinite(mat)):
                raise InvalidPanel(f"covariate {name!r} contains non-finite values")
            covs[str(name)] = mat
        if self.outcome_name in covs or self.outcome_name in (UNIT_COLUMN, PERIOD_COLUMN):
            raise InvalidPanel(f"outcome name {self.outcome_name!r} collides with another column")
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "covariates", MappingProxyType(covs))

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    def unit_index(self, unit: str) -> int:
        try:
            return self.units.index(unit)
        except ValueError:
            raise KeyError(f"unknown unit {unit!r}") from None

    def period_index(self, period: int) -> int:
        try:
            return self.periods.index(int(period))
        except ValueError:
            raise KeyError(f"unknown period {period}") from None

    def series(self, name: str | None = None) -> np.ndarray:
        """Outcome matrix, or the covariate called ``name``."""
        if name is None or name == self.outcome_name:
            return self.outcomes
        try:
            return self.covariates[name]
        except KeyError:
            raise UnknownColumn(name, [self.outcome_name, *self.covariates]) from None

    def equals(self, other: Panel) -> bool:
        """Exact (bitwise) equality of labels and every cell."""
        return (
            self.units == other.units
            and self.periods == other.periods
            and self.outcome_name == other.outcome_name
            and np.array_equal(self.outcomes, other.outcomes)
            and list(self.covariates) == list(other.covariates)
            and all(np.array_equal(self.covariates[k], other.covariates[k]) for k in self.covariates)
        )

    def with_outcomes(self, outcomes: np.ndarray) -> Panel:
        return Panel(self.units, self.periods, outcomes, dict(self.covariates), self.outcome_name)

    def to_csv(self, stream: IO[str] | None = None) -> str:
        """Serialize in long format; floats use shortest round-trip repr."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cov_names = list(self.covariates)
        writer.writerow([UNIT_COLUMN, PERIOD_COLUMN, self.outcome_name, *cov_names])
        for i, unit in enumerate(self.units):
            for t, period in enumerate(self.periods):
                row = [unit, str(period), repr(float(self.outcomes[i, t]))]
                row.extend(repr(float(self.covariates[c][i, t])) for c in cov_names)
                writer.writerow(row)
        text = buf.getvalue()
        if stream is not None:
            stream.write(text)
        return text


def _parse_float(raw: str, unit: str, period: int, column: str) -> float:
    raw = raw.strip()
    if raw == "":
        raise MissingCell(unit, period, column)
    try:
        value = float(raw)
    except ValueError:
        raise NonFiniteValue(unit, period, column, raw) from None
    if not math.isfinite(value):
        raise NonFiniteValue(unit, period, column, raw)
    return value


def load_panel(
    source: str | os.PathLike | IO[bytes] | IO[str],
    outcome_column: str,
    covariate_columns: Iterable[str] = (),
) -> Panel:
    """Read a long-format CSV (``unit``, ``period``, value columns) into a Panel.

    Units are ordered lexicographically and periods ascending, so the row
    order of the file does not matter. Missing rows or empty cells raise
    :class:`MissingCell`; nothing is imputed.
    """
    covariate_columns = list(covariate_columns)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    text = data.decode("utf-8-sig") if isinstance(data, bytes) else data

    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InvalidPanel("empty CSV") from None
    needed = [UNIT_COLUMN, PERIOD_COLUMN, outcome_column, *covariate_columns]
    for col in needed:
        if col not in header:
            raise UnknownColumn(col, header)
    if len(set(needed)) != len(needed):
        raise InvalidPanel(f"column listed twice among {needed}")
    pos = {col: header.index(col) for col in needed}
    value_cols = [outcome_column, *covariate_columns]

    cells: dict[tuple[str, int], list[float]] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InvalidPanel(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        unit = row[pos[UNIT_COLUMN]].strip()
        raw_period = row[pos[PERIOD_COLUMN]].strip()
        try:
            period = int(raw_period)
        except ValueError:
            raise InvalidPanel(f"line {line_no}: period {raw_period!r} is not an integer") from None
        key = (unit, period)
        if key in cells:
            raise DuplicateRow(unit, period, line_no)
        cells[key] = [_parse_float(row[pos[c]], unit, period, c) for c in value_cols]

    units = sorted({u for u, _ in cells})
    periods = sorted({p for _, p in cells})
    values = np.empty((len(value_cols), len(units), len(periods)))
    for i, unit in enumerate(units):
        for t, period in enumerate(periods):
            try:
                values[:, i, t] = cells[(unit, period)]
            except KeyError:
                raise MissingCell(unit, period, outcome_column) from None
    covs = {c: values[k + 1] for k, c in enumerate(covariate_columns)}
    return Panel(tuple(units), tuple(periods), values[0], covs, outcome_name=outcome_column)


@dataclass(frozen=True)
class TreatmentSpec:
    """Treated unit, first treated period and donor pool inside an analysis window."""

    treated_unit: str
    treatment_period: int
    donor_pool: tuple[str, ...]
    window: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "donor_pool", tuple(str(d) for d in self.donor_pool))
        object.__setattr__(self, "window", (int(self.window[0]), int(self.window[1])))
        object.__setattr__(self, "treatment_period", int(self.treatment_period))

    @classmethod
    def all_others(cls, panel: Panel, treated_unit: str, treatment_period: int,
                   window: tuple[int, int] | None = None) -> TreatmentSpec:
        donors = tuple(u for u in panel.units if u != treated_unit)
        if window is None:
            window = (panel.periods[0], panel.periods[-1])
        return cls(treated_unit, treatment_period, donors, window)

    def validate(self, panel: Panel, min_pre: int = 4) -> None:
        """Raise :class:`InvalidTreatmentSpec` unless the spec fits ``panel``.

        SCM needs ``min_pre=4``; the DID means formulas accept 1.
        """
        if self.treated_unit not in panel.units:
            raise InvalidTreatmentSpec(f"treated unit {self.treated_unit!r} not in panel")
        if not self.donor_pool:
            raise InvalidTreatmentSpec("donor pool is empty")
        if self.treated_unit in self.donor_pool:
            raise InvalidTreatmentSpec("treated unit must not be in the donor pool")
        if len(set(self.donor_pool)) != len(self.donor_pool):
            raise InvalidTreatmentSpec("donor pool lists a unit twice")
        missing = [d for d in self.donor_pool if d not in panel.units]
        if missing:
            raise InvalidTreatmentSpec(f"donors not in panel: {missing}")
        start, end = self.window
        if not start < self.treatment_period <= end:
            raise InvalidTreatmentSpec(
                f"need start < treatment_period <= end, got window {self.window} "
                f"and treatment_period {self.treatment_period}"
            )
        periods = self.window_periods(panel)
        n_pre = sum(p < self.treatment_period for p in periods)
        n_post = len(periods) - n_pre
        if n_pre < min_pre or n_post < 1:
            raise InvalidTreatmentSpec(
                f"window needs >= {min_pre} pre-treatment and >= 1 post-treatment periods "
                f"(has {n_pre} and {n_post})"
            )

    def window_periods(self, panel: Panel) -> tuple[int, ...]:
        start, end = self.window
        return tuple(p for p in panel.periods if start <= p <= end)

    def pre_periods(self, panel: Panel) -> tuple[int, ...]:
        return tuple(p for p in self.window_periods(panel) if p < self.treatment_period)

    def post_periods(self, panel: Panel) -> tuple[int, ...]:
        return tuple(p for p in self.window_periods(panel) if p >= self.treatment_period)

    def with_treated(self, unit: str, donor_pool: Sequence[str]) -> TreatmentSpec:
        return TreatmentSpec(unit, self.treatment_period, tuple(donor_pool), self.window)


@dataclass(frozen=True)
class PredictorSpec:
    """Which rows enter the predictor matrix X.

    ``covariates=None`` means every covariate in the panel. Rows are built
    in this order: covariate pre-period means, outcome pre-period mean,
    outcome values at each of ``special_periods``.
    """

    covariates: tuple[str, ...] | None = None
    outcome_mean: bool = True
    special_periods: tuple[int, ...] = ()

    def __post_init__(self):
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "special_periods", tuple(int(p) for p in self.special_periods))

    def resolve_covariates(self, panel: Panel) -> tuple[str, ...]:
        if self.covariates is None:
            return tuple(panel.covariates)
        for c in self.covariates:
            if c not in panel.covariates:
                raise UnknownColumn(c, list(panel.covariates))
        return self.covariates

    def row_names(self, panel: Panel) -> tuple[str, ...]:
        names = [f"mean({c})" for c in self.resolve_covariates(panel)]
        if self.outcome_mean:
            names.append(f"mean({panel.outcome_name})")
        names.extend(f"{panel.outcome_name}[{p}]" for p in self.special_periods)
        return tuple(names)


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Predictor and pre-period outcome matrices for one treated unit.

    ``X0`` is ``K x J`` and ``Y0_pre`` is ``T_pre x J`` with columns in donor
    pool order. The pre-period series are kept so that predictors can be
    recomputed on a sub-window (training/validation split).
    """

    X1: np.ndarray
    X0: np.ndarray
    Y1_pre: np.ndarray
    Y0_pre: np.ndarray
    predictor_names: tuple[str, ...]
    pre_periods: tuple[int, ...]
    donors: tuple[str, ...]
    warnings: tuple[str, ...]
    # (series_name, units incl. treated first, T_pre) stack used by predictors_on
    _series: np.ndarray = field(repr=False)
    _special_index: tuple[int, ...] = field(repr=False)
    _has_outcome_mean: bool = field(repr=False)

    @property
    def n_predictors(self) -> int:
        return self.X0.shape[0]

    @property
    def n_donors(self) -> int:
        return self.X0.shape[1]

    def predictors_on(self, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(X1, X0) with means taken over the pre-periods selected by ``mask``.

        Special-period rows always hold the raw outcome at their period.
        """
        X = _predictor_rows(self._series, mask, self._has_outcome_mean, self._special_index)
        return X[:, 0].copy(), np.ascontiguousarray(X[:, 1:])


def _predictor_rows(series: np.ndarray, mask: np.ndarray, outcome_mean: bool,
                    special_index: Sequence[int]) -> np.ndarray:
    # series: (n_series, n_units, T_pre); last series is the outcome
    n_cov = series.shape[0] - 1
    rows = [series[c][:, mask].mean(axis=1) for c in range(n_cov)]
    if outcome_mean:
        rows.append(series[-1][:, mask].mean(axis=1))
    rows.extend(series[-1][:, t] for t in special_index)
    return np.array(rows, dtype=np.float64).reshape(len(rows), series.shape[1])


def build_design(panel: Panel, spec: TreatmentSpec, predictors: PredictorSpec | None = None
                 ) -> DesignMatrices:
    """Build X1, X0, Y1_pre and Y0_pre for ``spec`` on ``panel``."""
    spec.validate(panel)
    predictors = predictors or PredictorSpec()
    cov_names = predictors.resolve_covariates(panel)
    pre = spec.pre_periods(panel)
    pre_cols = [panel.period_index(p) for p in pre]
    for p in predictors.special_periods:
        if p not in pre:
            raise InvalidTreatmentSpec(f"special predictor period {p} is not a pre-treatment period")
    if not cov_names and not predictors.outcome_mean and not predictors.special_periods:
        raise EmptyPredictorSet("predictor set is empty")

    rows = [panel.unit_index(spec.treated_unit)] + [panel.unit_index(d) for d in spec.donor_pool]
    series = np.stack(
        [panel.covariates[c][np.ix_(rows, pre_cols)] for c in cov_names]
        + [panel.outcomes[np.ix_(rows, pre_cols)]]
    )
    special_index = tuple(pre.index(p) for p in predictors.special_periods)
    full = np.ones(len(pre), dtype=bool)
    X = _predictor_rows(series, full, predictors.outcome_mean, special_index)

    names = predictors.row_names(panel)
    warnings = []
    for k, name in enumerate(names):
        if X.shape[1] > 2 and np.ptp(X[k, 1:]) == 0.0:
            msg = f"predictor {name!r} has zero variance across donors"
            LOGGER.warning(msg)
            warnings.append(msg)
    Y = series[-1]
    return DesignMatrices(
        X1=_frozen(X[:, 0]),
        X0=_frozen(np.ascontiguousarray(X[:, 1:])),
        Y1_pre=_frozen(Y[0]),
        Y0_pre=_frozen(np.ascontiguousarray(Y[1:].T)),
        predictor_names=names,
        pre_periods=pre,
        donors=spec.donor_pool,
        warnings=tuple(warnings),
        _series=series,
        _special_index=special_index,
        _has_outcome_mean=predictors.outcome_mean,
    )
