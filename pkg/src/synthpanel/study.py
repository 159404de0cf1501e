"""Declarative study runs: config parsing, estimation and the report bundle on disk.

A study config is a TOML document. Relative paths inside it resolve
against the config file's directory. Every artifact is written with
shortest-round-trip float formatting and no timestamps, so a rerun with
the same config and seed reproduces the output directory byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .did import DidResult, did_estimate, event_study, sdid_estimate
from .errors import SynthPanelError
from .inference import (
    InferenceReport,
    InsufficientPrePeriods,
    PlaceboSet,
    filter_placebos,
    in_space_placebos,
    in_time_placebo,
    infer,
    leave_one_out,
)
from .panel import Panel, PredictorSpec, TreatmentSpec, load_panel
from .scm import GapSeries, WeightSolution, estimate_gaps

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

LOGGER = logging.getLogger(__name__)

ESTIMATORS = ("scm", "did", "event_study", "sdid")
REPORT_SCHEMA_VERSION = 1


class ConfigError(SynthPanelError):
    """Invalid study or DGP config; carries the offending field and line when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 path: str | None = None):
        self.field, self.line, self.path = field, line, path
        where = path or "<config>"
        if line is not None:
            where += f":{line}"
        prefix = f"{where}: field '{field}': " if field else f"{where}: "
        super().__init__(prefix + message)


class MisalignedWindows(SynthPanelError):
    pass


class IoFailure(SynthPanelError):
    def __init__(self, path: str | os.PathLike, reason: str):
        self.path = str(path)
        super().__init__(f"cannot write {self.path}: {reason}")


# ---------------------------------------------------------------- config


def _locate(text: str, dotted: str) -> int | None:
    """Best-effort 1-based line of ``dotted`` (``table.key``) in TOML source."""
    *tables, key = dotted.split(".")
    section = ".".join(tables)
    current = ""
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        header = re.match(r"^\s*\[([^\[\]]+)\]\s*(#.*)?$", line)
        if header:
            current = header.group(1).strip()
        elif current == section and pattern.match(line):
            return i
    return None


class _Reader:
    """Typed access to a parsed TOML mapping with diagnostics pointing at the source."""

    def __init__(self, data: Mapping[str, Any], text: str, path: str | None, prefix: str = ""):
        self.data, self.text, self.path, self.prefix = data, text, path, prefix

    def error(self, key: str, message: str) -> ConfigError:
        dotted = self.prefix + key
        return ConfigError(message, dotted, _locate(self.text, dotted), self.path)

    def check_keys(self, allowed: Sequence[str]) -> None:
        for key in self.data:
            if key not in allowed:
                raise self.error(key, f"unknown key (allowed: {', '.join(allowed)})")

    def get(self, key: str, kind, default=..., *, required: bool = False):
        if key not in self.data:
            if required or default is ...:
                raise self.error(key, "is required")
            return default
        value = self.data[key]
        kinds = kind if isinstance(kind, tuple) else (kind,)
        if bool in kinds or not isinstance(value, bool):
            if isinstance(value, kinds):
                return float(value) if kinds == (float, int) else value
        names = "/".join(k.__name__ for k in kinds)
        raise self.error(key, f"expected {names}, got {type(value).__name__} {value!r}")

    def strings(self, key: str, default=...) -> tuple[str, ...] | None:
        value = self.get(key, list, default)
        if value is None:
            return None
        if not all(isinstance(v, str) for v in value):
            raise self.error(key, "expected a list of strings")
        return tuple(value)

    def ints(self, key: str, default=...) -> tuple[int, ...]:
        value = self.get(key, list, default)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise self.error(key, "expected a list of integers")
        return tuple(value)

    def table(self, key: str) -> _Reader:
        sub = self.get(key, dict, {})
        return _Reader(sub, self.text, self.path, f"{self.prefix}{key}.")


@dataclass(frozen=True)
class InferenceConfig:
    in_space: bool = True
    in_time_shift: int = 10
    alpha: float = 0.1
    placebo_filter: float | None = None
    weighted_p: bool = True
    leave_one_out: bool = False


@dataclass(frozen=True)
class StudyConfig:
    """One treated unit, one outcome, one treatment date.

    ``donor_pool`` is either the string ``"all_others"`` or an explicit
    list; ``exclude_donors`` is applied after either. ``inference.in_time_shift``
    of 0 disables the in-time placebo.
    """

    data: Path
    outcome: str
    treated_unit: str
    treatment_period: int
    covariates: tuple[str, ...] = ()
    donor_pool: tuple[str, ...] | str = "all_others"
    exclude_donors: tuple[str, ...] = ()
    window: tuple[int, int] | None = None
    predictors: PredictorSpec = field(default_factory=PredictorSpec)
    estimators: tuple[str, ...] = ("scm", "did", "event_study", "sdid")
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    sdid_regularization: float | str = "auto"
    seed: int = 0
    output_dir: Path = Path("out")
    label: str = "study"

    @classmethod
    def from_toml(cls, text: str, base_dir: str | os.PathLike = ".", path: str | None = None
                  ) -> StudyConfig:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(f"TOML syntax error: {exc}", line=int(m.group(1)) if m else None,
                              path=path) from None
        return cls.from_mapping(raw, base_dir, text=text, path=path)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> StudyConfig:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", path=str(path)) from None
        cfg = cls.from_toml(text, path.parent, str(path))
        if cfg.label == "study":
            cfg = _replace(cfg, label=path.stem)
        return cfg

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base_dir: str | os.PathLike = ".",
                     text: str = "", path: str | None = None) -> StudyConfig:
        r = _Reader(raw, text, path)
        r.check_keys(("data", "outcome", "covariates", "treated_unit", "treatment_period",
                      "donor_pool", "exclude_donors", "window", "predictors", "estimators",
                      "inference", "sdid", "seed", "output_dir", "label"))
        base = Path(base_dir)
        data = base / r.get("data", str, required=True)
        if not data.is_file():
            raise r.error("data", f"file not found: {data}")
        covariates = r.strings("covariates", ())
        pool = raw.get("donor_pool", "all_others")
        if isinstance(pool, str):
            if pool != "all_others":
                raise r.error("donor_pool", "must be 'all_others' or a list of unit ids")
        else:
            pool = r.strings("donor_pool")
            if not pool:
                raise r.error("donor_pool", "must not be empty")
        window = None
        if "window" in raw:
            w = r.ints("window")
            if len(w) != 2 or w[0] > w[1]:
                raise r.error("window", "expected [start, end] with start <= end")
            window = (w[0], w[1])

        pr = r.table("predictors")
        pr.check_keys(("covariates", "outcome_mean", "special_periods"))
        pred_covs = pr.strings("covariates", None)
        if pred_covs is not None and not set(pred_covs) <= set(covariates):
            raise pr.error("covariates", "must be a subset of the top-level covariates")
        try:
            predictors = PredictorSpec(
                covariates=pred_covs if pred_covs is not None else covariates,
                outcome_mean=pr.get("outcome_mean", bool, True),
                special_periods=pr.ints("special_periods", ()),
            )
        except SynthPanelError as exc:
            raise pr.error("special_periods", str(exc)) from None

        estimators = r.strings("estimators", ESTIMATORS)
        if not estimators:
            raise r.error("estimators", "must not be empty")
        for e in estimators:
            if e not in ESTIMATORS:
                raise r.error("estimators", f"unknown estimator {e!r} (choose from {ESTIMATORS})")

        ir = r.table("inference")
        ir.check_keys(("in_space", "in_time_shift", "alpha", "placebo_filter", "weighted_p",
                       "leave_one_out"))
        alpha = ir.get("alpha", (float, int), 0.1)
        if not 0 < alpha <= 0.5:
            raise ir.error("alpha", f"must lie in (0, 0.5], got {alpha}")
        shift = ir.get("in_time_shift", int, 10)
        if shift < 0:
            raise ir.error("in_time_shift", "must be >= 0 (0 disables)")
        pf = ir.get("placebo_filter", (float, int, bool), False)
        if pf is True or (not isinstance(pf, bool) and pf <= 0):
            raise ir.error("placebo_filter", "must be false or a positive RMSE multiple")
        inference = InferenceConfig(
            in_space=ir.get("in_space", bool, True),
            in_time_shift=shift,
            alpha=float(alpha),
            placebo_filter=None if pf is False else float(pf),
            weighted_p=ir.get("weighted_p", bool, True),
            leave_one_out=ir.get("leave_one_out", bool, False),
        )

        sr = r.table("sdid")
        sr.check_keys(("regularization",))
        reg = sr.get("regularization", (str, float, int), "auto")
        if isinstance(reg, str) and reg not in ("auto", "inf"):
            raise sr.error("regularization", "must be 'auto', 'inf' or a number >= 0")
        if not isinstance(reg, str) and reg < 0:
            raise sr.error("regularization", "must be >= 0")

        return cls(
            data=data,
            outcome=r.get("outcome", str, required=True),
            treated_unit=r.get("treated_unit", str, required=True),
            treatment_period=r.get("treatment_period", int, required=True),
            covariates=covariates,
            donor_pool=pool,
            exclude_donors=r.strings("exclude_donors", ()),
            window=window,
            predictors=predictors,
            estimators=estimators,
            inference=inference,
            sdid_regularization=math.inf if reg == "inf" else (reg if reg == "auto" else float(reg)),
            seed=r.get("seed", int, 0),
            output_dir=base / r.get("output_dir", str, "out"),
            label=r.get("label", str, "study"),
        )


def _replace(cfg, **changes):
    from dataclasses import replace

    return replace(cfg, **changes)


# ---------------------------------------------------------------- formatting


def fmt(x) -> str:
    """Shortest round-trip text for a float; integers and strings unchanged."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _json_value(x):
    if isinstance(x, dict):
        return {str(k): _json_value(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_value(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_json_value(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def json_text(obj) -> str:
    return json.dumps(_json_value(obj), indent=2, allow_nan=False) + "\n"


def format_interval(lo: float, hi: float, digits: int = 3) -> str:
    """Signed pair such as ``{-0.005, +0.147}``."""
    return f"{{{lo:+.{digits}f}, {hi:+.{digits}f}}}"


class _Writer:
    """Collects output files and writes them with a sha256 manifest."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, bytes] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text.encode("utf-8")

    def manifest(self) -> dict[str, str]:
        return {name: hashlib.sha256(data).hexdigest() for name, data in sorted(self.files.items())}

    def flush(self) -> dict[str, str]:
        manifest = self.manifest()
        self.add("manifest.json", json_text({"files": manifest}))
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(self.out_dir, exc.strerror or str(exc)) from None
        for name, data in sorted(self.files.items()):
            target = self.out_dir / name
            try:
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
            except OSError as exc:
                raise IoFailure(target, exc.strerror or str(exc)) from None
        return manifest


# ---------------------------------------------------------------- study


@dataclass
class ReportBundle:
    config: StudyConfig
    panel: Panel
    spec: TreatmentSpec
    effects: dict[str, float]
    did_results: dict[str, DidResult]
    solution: WeightSolution | None = None
    gaps: GapSeries | None = None
    placebos: PlaceboSet | None = None
    inference: InferenceReport | None = None
    loo: list[tuple[str, GapSeries]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    manifest: dict[str, str] = field(default_factory=dict)

    @property
    def headline_effect(self) -> float:
        for name in ESTIMATORS:
            if name in self.effects:
                return self.effects[name]
        raise KeyError("no estimator ran")

    def report(self) -> dict:
        cfg, inf = self.config, self.inference
        doc: dict[str, Any] = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "study": {
                "label": cfg.label,
                "outcome": cfg.outcome,
                "treated_unit": self.spec.treated_unit,
                "treatment_period": self.spec.treatment_period,
                "window": list(self.spec.window),
                "donor_pool": list(self.spec.donor_pool),
                "estimators": list(cfg.estimators),
                "seed": cfg.seed,
            },
            "effect": self.headline_effect,
            "effect_end_of_sample": self.gaps.effect_end_of_sample if self.gaps else None,
            "end_of_sample_p": inf.p_value_exact if inf else None,
            "weighted_p": inf.p_value_weighted if inf else None,
            "in_time_placebo_p": inf.in_time_placebo_p if inf else None,
            "estimators": {},
            "warnings": list(self.warnings),
        }
        for name in cfg.estimators:
            entry: dict[str, Any] = {"effect": self.effects[name]}
            if name == "scm" and self.gaps is not None:
                entry.update(pre_rmse=self.gaps.pre_rmse, post_rmse=self.gaps.post_rmse,
                             rmse_ratio=self.gaps.post_rmse / max(self.gaps.pre_rmse, 1e-12),
                             perfect_prefit=self.gaps.perfect_prefit,
                             effect_end_of_sample=self.gaps.effect_end_of_sample)
            if name == "sdid":
                entry["regularization"] = self.did_results[name].regularization
            doc["estimators"][name] = entry
        if self.solution is not None:
            sol = self.solution
            doc["weights"] = {
                "donors": sol.weights_by_donor(),
                "predictors": dict(zip(sol.predictor_names, sol.v.tolist())),
            }
            doc["diagnostics"] = sol.diagnostics.as_dict()
        if inf is not None:
            doc["inference"] = {
                "alpha": cfg.inference.alpha,
                "n_units": self.placebos.n_units,
                "excluded_placebos": [{"unit": u, "reason": why} for u, why in inf.excluded_placebos],
                "placebo_filter": cfg.inference.placebo_filter,
                "bands": inf.bands is not None,
            }
        return doc

    def summary(self) -> str:
        cfg, inf = self.config, self.inference
        lines = [
            f"Study: {cfg.label}",
            f"Outcome: {cfg.outcome}",
            f"Treated unit: {self.spec.treated_unit} (treatment period {self.spec.treatment_period})",
            f"Donors: {len(self.spec.donor_pool)}",
            "",
        ]
        for name in cfg.estimators:
            lines.append(f"{'Effect (' + name + ')':<34}{self.effects[name]: .6f}")
        if self.gaps is not None:
            lines.append(f"{'Effect at end of sample (scm)':<34}{self.gaps.effect_end_of_sample: .6f}")
            lines.append(f"{'Pre-treatment RMSE':<34}{self.gaps.pre_rmse: .6f}")
        if inf is not None:
            lines.append(f"{'Simulation-based end-of-sample p':<34}{inf.p_value_exact: .3f}")
            if inf.p_value_weighted is not None:
                lines.append(f"{'Weighted p':<34}{inf.p_value_weighted: .3f}")
            if inf.in_time_placebo_p is not None:
                lines.append(f"{'In-time placebo p':<34}{inf.in_time_placebo_p: .3f}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def _resolve_spec(cfg: StudyConfig, panel: Panel) -> TreatmentSpec:
    if cfg.treated_unit not in panel.units:
        raise ConfigError(f"unit {cfg.treated_unit!r} not in panel", "treated_unit")
    if cfg.donor_pool == "all_others":
        pool = [u for u in panel.units if u != cfg.treated_unit]
    else:
        missing = [u for u in cfg.donor_pool if u not in panel.units]
        if missing:
            raise ConfigError(f"donors not in panel: {', '.join(missing)}", "donor_pool")
        pool = list(cfg.donor_pool)
    pool = [u for u in pool if u not in cfg.exclude_donors]
    window = cfg.window or (panel.periods[0], panel.periods[-1])
    spec = TreatmentSpec(cfg.treated_unit, cfg.treatment_period, tuple(pool), window)
    spec.validate(panel, 4 if {"scm", "sdid"} & set(cfg.estimators) else 1)
    return spec


def estimate_study(cfg: StudyConfig, threads: int = 1) -> ReportBundle:
    """Run every configured estimator and inference step; nothing is written."""
    try:
        panel = load_panel(cfg.data, cfg.outcome, cfg.covariates)
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc.strerror}", "data") from None
    spec = _resolve_spec(cfg, panel)
    bundle = ReportBundle(cfg, panel, spec, {}, {})
    if "scm" in cfg.estimators:
        inf_cfg = cfg.inference
        if inf_cfg.in_space:
            pset = in_space_placebos(panel, spec, cfg.predictors, seed=cfg.seed, threads=threads)
            if inf_cfg.placebo_filter is not None:
                pset = filter_placebos(pset, inf_cfg.placebo_filter)
            in_time_p = None
            if inf_cfg.in_time_shift > 0:
                try:
                    in_time_p = in_time_placebo(panel, spec, cfg.predictors, inf_cfg.in_time_shift,
                                                seed=cfg.seed, threads=threads)
                except InsufficientPrePeriods as exc:
                    bundle.warnings.append(f"in-time placebo skipped: {exc}")
            bundle.placebos = pset
            bundle.inference = infer(pset, inf_cfg.alpha, in_time_p, inf_cfg.weighted_p)
            if bundle.inference.bands is None:
                bundle.warnings.append("too few placebos for a confidence band")
            bundle.solution, bundle.gaps = pset.treated_entry.solution, pset.treated_entry.gaps
        else:
            bundle.solution, bundle.gaps = estimate_gaps(panel, spec, cfg.predictors, seed=cfg.seed)
        bundle.effects["scm"] = bundle.gaps.effect_avg_post
        bundle.warnings.extend(bundle.solution.diagnostics.warnings)
        if inf_cfg.leave_one_out:
            bundle.loo = leave_one_out(panel, spec, cfg.predictors, bundle.solution, seed=cfg.seed)
    if "did" in cfg.estimators:
        bundle.did_results["did"] = did_estimate(panel, spec)
    if "event_study" in cfg.estimators:
        bundle.did_results["event_study"] = event_study(panel, spec)
    if "sdid" in cfg.estimators:
        bundle.did_results["sdid"] = sdid_estimate(panel, spec, cfg.sdid_regularization)
    for name, res in bundle.did_results.items():
        bundle.effects[name] = res.effect
    return bundle


def bundle_files(bundle: ReportBundle) -> dict[str, str]:
    """Text of every artifact except the manifest, keyed by file name."""
    files = {"report.json": json_text(bundle.report()), "summary.txt": bundle.summary()}
    g = bundle.gaps
    if g is not None:
        files["gaps.csv"] = _csv_text(
            ("period", "observed", "synthetic", "gap"),
            zip(g.periods, g.observed, g.synthetic, g.gap),
        )
        sol = bundle.solution
        rows = [("donor", d, w) for d, w in zip(sol.donors, sol.w)]
        rows += [("predictor", n, v) for n, v in zip(sol.predictor_names, sol.v)]
        files["weights.csv"] = _csv_text(("kind", "name", "weight"), rows)
    if bundle.placebos is not None:
        pset = bundle.placebos
        files["placebos.csv"] = _csv_text(
            ("unit", "period", "gap"),
            ((e.unit, p, x) for e in pset.entries for p, x in zip(e.gaps.periods, e.gaps.gap)),
        )
        files["placebo_stats.csv"] = _csv_text(
            ("unit", "is_treated", "pre_rmse", "post_rmse", "rmse_ratio"),
            ((e.unit, e is pset.treated_entry, e.pre_rmse, e.post_rmse, e.rmse_ratio)
             for e in pset.all_entries()),
        )
        bands = bundle.inference.bands
        if bands is not None:
            files["bands.csv"] = _csv_text(
                ("period", "lower", "upper", "treated_gap", "covered"),
                zip(bands.periods, bands.lower, bands.upper, bands.treated_gap, bands.covers()),
            )
    if bundle.loo:
        files["leave_one_out.csv"] = _csv_text(
            ("dropped_donor", "period", "gap"),
            ((d, p, x) for d, gs in bundle.loo for p, x in zip(gs.periods, gs.gap)),
        )
    es = bundle.did_results.get("event_study")
    if es is not None:
        files["event_study.csv"] = _csv_text(
            ("period", "relative_period", "coefficient"),
            ((p, p - es.t0, c) for p, c in es.per_period),
        )
    sd = bundle.did_results.get("sdid")
    if sd is not None:
        pre = bundle.spec.pre_periods(bundle.panel)
        rows = [("unit", d, w) for d, w in zip(bundle.spec.donor_pool, sd.unit_weights)]
        rows += [("period", p, w) for p, w in zip(pre, sd.time_weights)]
        files["sdid_weights.csv"] = _csv_text(("kind", "name", "weight"), rows)
    files.update(emit_plot_data(bundle))
    return files


def emit_plot_data(bundle: ReportBundle, out_dir: str | os.PathLike | None = None) -> dict[str, str]:
    """Plot-ready CSVs: treated vs synthetic trajectories and the placebo spaghetti.

    Returns the file texts; with ``out_dir`` they are also written there.
    """
    files: dict[str, str] = {}
    g = bundle.gaps
    if g is not None:
        files["figure_trajectories.csv"] = _csv_text(
            ("period", "observed", "synthetic", "is_post"),
            zip(g.periods, g.observed, g.synthetic, g.post_mask),
        )
    if bundle.placebos is not None:
        entries = bundle.placebos.all_entries()
        files["figure_placebo_spaghetti.csv"] = _csv_text(
            ("unit", "period", "gap", "is_treated"),
            ((e.unit, p, x, i == 0) for i, e in enumerate(entries)
             for p, x in zip(e.gaps.periods, e.gaps.gap)),
        )
    for name, text in files.items() if out_dir is not None else ():
        target = Path(out_dir) / name
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(text.encode("utf-8"))
        except OSError as exc:
            raise IoFailure(target, exc.strerror or str(exc)) from None
    return files


def run_study(cfg: StudyConfig, out_dir: str | os.PathLike | None = None, threads: int = 1
              ) -> ReportBundle:
    """Estimate and write the report bundle to ``out_dir`` (default: the config's)."""
    bundle = estimate_study(cfg, threads)
    writer = _Writer(Path(out_dir) if out_dir is not None else cfg.output_dir)
    for name, text in bundle_files(bundle).items():
        writer.add(name, text)
    bundle.manifest = writer.flush()
    return bundle


# ---------------------------------------------------------------- pooling


@dataclass
class PooledReport:
    label: str
    event_times: tuple[int, ...]
    mean_gap: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    study_labels: tuple[str, ...]
    study_effects: np.ndarray
    mean_effect: float
    effect_interval: tuple[float, float]

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "studies": [{"label": s, "effect": e}
                        for s, e in zip(self.study_labels, self.study_effects.tolist())],
            "mean_effect": self.mean_effect,
            "effect_interval": list(self.effect_interval),
            "effect_interval_text": format_interval(*self.effect_interval),
            "interval_quantiles": [2.5, 97.5],
        }


def pool_gaps(labels: Sequence[str], gaps: Sequence[GapSeries], pool_label: str) -> PooledReport:
    """Event-time-aligned mean gap with cross-study 2.5/97.5 percentiles (linear interpolation)."""
    if len(gaps) < 2:
        raise MisalignedWindows("pooling needs at least two studies")
    rel = [tuple(p - g.t0 for p in g.periods) for g in gaps]
    if any(r != rel[0] for r in rel[1:]):
        spans = ", ".join(f"{lab}: [{r[0]}, {r[-1]}]" for lab, r in zip(labels, rel))
        raise MisalignedWindows(f"event-time windows differ ({spans})")
    stack = np.array([g.gap for g in gaps])
    effects = np.array([g.effect_avg_post for g in gaps])
    lo, hi = np.percentile(effects, [2.5, 97.5])
    return PooledReport(
        label=pool_label,
        event_times=rel[0],
        mean_gap=stack.mean(axis=0),
        lower=np.percentile(stack, 2.5, axis=0),
        upper=np.percentile(stack, 97.5, axis=0),
        study_labels=tuple(labels),
        study_effects=effects,
        mean_effect=float(effects.mean()),
        effect_interval=(float(lo), float(hi)),
    )


def run_multi(configs: Sequence[StudyConfig], pool_label: str = "pooled",
              out_dir: str | os.PathLike | None = None, threads: int = 1,
              parallel_studies: bool = False) -> tuple[PooledReport, list[ReportBundle]]:
    """Run each study, then pool their SCM gap paths in event time.

    Each study's bundle goes to ``<out_dir>/<label>/``; the pooled report
    and ``pooled_gaps.csv`` go to ``out_dir`` itself.
    """
    if len(configs) < 2:
        raise MisalignedWindows("run_multi needs at least two studies")
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        labels = [f"{i:02d}_{lab}" for i, lab in enumerate(labels)]
    for c in configs:
        if "scm" not in c.estimators:
            raise ConfigError("pooling uses SCM gaps; add 'scm' to estimators", "estimators",
                              path=c.label)
    root = Path(out_dir) if out_dir is not None else configs[0].output_dir
    jobs = [(c, root / lab) for c, lab in zip(configs, labels)]
    run = lambda job: run_study(job[0], job[1], threads)  # noqa: E731
    if parallel_studies:
        with ThreadPoolExecutor(max_workers=len(jobs)) as ex:
            bundles = list(ex.map(run, jobs))
    else:
        bundles = [run(job) for job in jobs]
    pooled = pool_gaps(labels, [b.gaps for b in bundles], pool_label)
    writer = _Writer(root)
    writer.add("pooled.json", json_text(pooled.as_dict()))
    writer.add("pooled_gaps.csv", _csv_text(
        ("event_time", "mean_gap", "lower", "upper"),
        zip(pooled.event_times, pooled.mean_gap, pooled.lower, pooled.upper),
    ))
    writer.flush()
    return pooled, bundles
