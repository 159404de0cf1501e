"""Command line front end.

    synthpanel run study.toml [--out DIR] [--threads N] [--seed S]
    synthpanel multi a.toml b.toml [--label NAME] [--parallel-studies]
    synthpanel simulate dgp.toml [--out DIR] [--seed S]
    synthpanel battery dgp.toml --reps N [--out DIR] [--seed S]

Exit codes: 0 success, 2 config error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import SynthPanelError
from .panel import InvalidTreatmentSpec
from .simgen import FactorDGP, default_predictors, generate_factor_panel, run_battery
from .study import (
    ConfigError,
    StudyConfig,
    _csv_text,
    _Reader,
    _Writer,
    json_text,
    run_multi,
    run_study,
    tomllib,
)

LOGGER = logging.getLogger("synthpanel")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3


def _load_study(path: str, seed: int | None) -> StudyConfig:
    cfg = StudyConfig.from_file(path)
    return dataclasses.replace(cfg, seed=seed) if seed is not None else cfg


def load_dgp(path: str | Path, seed: int | None = None) -> tuple[FactorDGP, dict]:
    """Parse a DGP config: top-level :class:`FactorDGP` fields plus an optional [battery] table."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        raw = tomllib.loads(text)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=str(path)) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}", path=str(path)) from None
    r = _Reader(raw, text, str(path))
    fields = {f.name: f for f in dataclasses.fields(FactorDGP)}
    r.check_keys((*fields, "battery"))
    kwargs = {}
    for name, value in raw.items():
        if name == "battery":
            continue
        default = fields[name].default
        if name == "effect":
            ok = isinstance(value, (int, float)) or (
                isinstance(value, list) and all(isinstance(v, (int, float)) for v in value))
            if not ok or isinstance(value, bool):
                raise r.error(name, "expected a number or a list of numbers")
            kwargs[name] = tuple(value) if isinstance(value, list) else float(value)
        elif isinstance(default, bool):
            kwargs[name] = r.get(name, bool)
        elif isinstance(default, float):
            kwargs[name] = r.get(name, (float, int))
        else:
            kwargs[name] = r.get(name, type(default))
    if seed is not None:
        kwargs["seed"] = seed
    try:
        dgp = FactorDGP(**kwargs)
        dgp.build()
    except (SynthPanelError, ValueError) as exc:
        raise ConfigError(str(exc), path=str(path)) from None
    br = r.table("battery")
    br.check_keys(("in_time_shift", "alpha"))
    battery = {"in_time_shift": br.get("in_time_shift", int, 0),
               "alpha": br.get("alpha", (float, int), 0.1)}
    if not 0 < battery["alpha"] < 1:
        raise br.error("alpha", "must lie in (0, 1)")
    return dgp, battery


def _study_toml(spec, preds) -> str:
    covs = ", ".join(f'"{c}"' for c in preds.covariates or ())
    specials = ", ".join(str(p) for p in preds.special_periods)
    return (
        'data = "panel.csv"\n'
        'outcome = "y"\n'
        f"covariates = [{covs}]\n"
        'treated_unit = "u00"\n'
        f"treatment_period = {spec.treatment_period}\n"
        'donor_pool = "all_others"\n'
        f"window = [{spec.periods[0]}, {spec.periods[-1]}]\n"
        'estimators = ["scm", "did", "event_study", "sdid"]\n'
        "seed = 0\n"
        'output_dir = "out"\n'
        "\n[predictors]\n"
        "outcome_mean = true\n"
        f"special_periods = [{specials}]\n"
        "\n[inference]\n"
        "in_space = true\n"
        "in_time_shift = 10\n"
        "alpha = 0.1\n"
        "weighted_p = true\n"
    )


def cmd_simulate(args) -> int:
    dgp, _ = load_dgp(args.config, args.seed)
    spec = dgp.build()
    panel, truth = generate_factor_panel(spec)
    preds = default_predictors(spec)
    preds = dataclasses.replace(preds, covariates=tuple(sorted(panel.covariates)))
    effect = np.zeros(spec.n_periods)
    effect[spec.t0 - 1:] = spec.effect
    writer = _Writer(Path(args.out or "simulated"))
    writer.add("panel.csv", panel.to_csv())
    writer.add("truth.csv", _csv_text(
        ("period", "observed", "untreated", "effect"),
        zip(truth.periods, truth.observed, truth.synthetic, effect),
    ))
    writer.add("dgp.json", json_text({
        **{k: v for k, v in dataclasses.asdict(dgp).items()},
        "treatment_period": spec.treatment_period,
        "hull_donors": [panel.units[i] for i in spec.hull_donors],
    }))
    writer.add("study.toml", _study_toml(spec, preds))
    writer.flush()
    print(f"wrote {writer.out_dir}")
    return EXIT_OK


def cmd_battery(args) -> int:
    dgp, opts = load_dgp(args.config, args.seed)
    shift = args.in_time_shift if args.in_time_shift is not None else opts["in_time_shift"]
    res = run_battery(dgp, args.reps, alpha=opts["alpha"], threads=args.threads,
                      in_time_shift=shift or None)
    reps = res.replications
    writer = _Writer(Path(args.out or "battery"))
    writer.add("battery.csv", _csv_text(
        ("rep", "seed", "p_exact", "p_weighted", "rmse_ratio", "effect_avg_post",
         "band_covers_end", "in_time_p", "error"),
        ((r.rep, r.seed, *("" if x is None else x for x in (
            r.p_value_exact, r.p_value_weighted, r.rmse_ratio, r.effect_avg_post,
            r.band_covers_end, r.in_time_p, r.error))) for r in reps),
    ))
    ok = [r for r in reps if r.error is None]
    summary = {
        "reps": len(reps),
        "failures": len(reps) - len(ok),
        "min_p": float(res.p_values.min()) if ok else None,
        "fraction_p_le": {str(t): res.fraction_at_most(t) for t in (0.05, 0.1, 0.2)},
        "band_coverage_end": float(np.mean([r.band_covers_end for r in ok])) if ok else None,
        "mean_effect_avg_post": float(np.mean([r.effect_avg_post for r in ok])) if ok else None,
    }
    if shift and ok:
        summary["in_time_fraction_p_gt_0.1"] = float(np.mean(res.in_time_p_values > 0.1 + 1e-12))
    writer.add("battery_summary.json", json_text(summary))
    writer.flush()
    print(json_text(summary), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_study(args.config, args.seed)
    bundle = run_study(cfg, args.out, args.threads)
    print(bundle.summary(), end="")
    return EXIT_OK


def cmd_multi(args) -> int:
    configs = [_load_study(p, args.seed) for p in args.configs]
    pooled, _ = run_multi(configs, args.label, args.out, args.threads, args.parallel_studies)
    print(f"{pooled.label}: mean post effect {pooled.mean_effect:.6f} "
          f"interval {pooled.as_dict()['effect_interval_text']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthpanel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="placebo worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one study config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("multi", parents=[common], help="run and pool several studies")
    p.add_argument("configs", nargs="+")
    p.add_argument("--label", default="pooled")
    p.add_argument("--parallel-studies", action="store_true")
    p.set_defaults(func=cmd_multi)

    p = sub.add_parser("simulate", parents=[common], help="write a factor-model panel")
    p.add_argument("config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("battery", parents=[common], help="Monte-Carlo inference battery")
    p.add_argument("config")
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--in-time-shift", type=int, default=None)
    p.set_defaults(func=cmd_battery)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, InvalidTreatmentSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SynthPanelError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
