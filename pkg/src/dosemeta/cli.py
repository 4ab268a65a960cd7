"""Command-line pipeline: simulate, fit, loo, summarize, ppc, curves.

Configuration comes from a JSON file (``--config``), individual flags, or
both; flags win.  Exit codes: 0 success, 2 validation error, 3
convergence failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .basis import BasisSet, DegenerateDoseError, build_basis
from .dataio import (DataFormatError, build_manifest, load_subjects, read_draws,
                     read_json, write_comparison_csv, write_curve_csv, write_draws,
                     write_json, write_risk_table_csv, write_subjects)
from .diagnostics import posterior_predictive_check, split_rhat
from .loo import LooResult, compare_models, loo
from .model import Dataset, DoseResponseModel
from .sampler import SamplerConfig, sample
from .simulate import SimScenario, default_scenario, simulate
from .summaries import curve_draws, difference_curve, prob_best, risk_difference_table
from .svgplot import curve_plot, difference_plot, histogram_plot

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


class ConvergenceFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Everything a fit/summarize run needs; mirrors the CLI flags."""

    data: str = ""
    drugs: list = field(default_factory=list)
    covariates: list = field(default_factory=list)
    moderator: str = "moderator"
    knots: list = field(default_factory=lambda: [0, 1, 2, 3])
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.9
    max_tree_depth: int = 10
    seed: int = 0
    out: str = "out"
    dose_max: float = 8.0
    grid_points: int = 101
    risk_doses: list = field(default_factory=lambda: [1.0, 5.0])

    def validate(self):
        if not self.data:
            raise ValueError("no data file given (--data or config)")
        if not self.drugs:
            raise ValueError("no drug names given (--drugs or config)")
        if not self.knots:
            raise ValueError("knot candidate list is empty")
        if sorted(self.knots) != list(self.knots):
            raise ValueError("knot candidate list must be ascending")
        if self.dose_max <= 0:
            raise ValueError("dose_max must be positive")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            n_chains=self.chains, n_warmup=self.warmup, n_draws=self.draws,
            target_accept=self.target_accept, max_tree_depth=self.max_tree_depth,
            seed=self.seed)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _merge_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        raw = read_json(args.config)
        for key, value in raw.items():
            if not hasattr(config, key):
                raise ValueError(f"unknown config key {key!r}")
            setattr(config, key, value)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            setattr(config, f.name, flag)
    return config


def _comma_list(text):
    return [t for t in text.split(",") if t]


def _int_list(text):
    return [int(t) for t in text.split(",") if t]


def _float_list(text):
    return [float(t) for t in text.split(",") if t]


def _load(config: RunConfig):
    data, info = load_subjects(config.data, config.drugs, config.covariates,
                               config.moderator)
    if data.n_subjects == 0:
        raise ValueError(f"{config.data}: no subjects")
    return data, info


def _build_bases(data: Dataset, n_knots: int):
    return [build_basis(data.doses_by_trial(k), n_knots, drug_index=k)
            for k in range(data.n_drugs)]


def _grid(config: RunConfig) -> np.ndarray:
    return np.linspace(0.0, config.dose_max, config.grid_points)


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario:
        scenario = SimScenario.from_dict(read_json(args.scenario))
    else:
        scenario = default_scenario()
    if args.seed is not None:
        scenario.seed = args.seed
    data, truth = simulate(scenario)
    write_subjects(out / "subjects.csv", data,
                   covariate_names=[c.name for c in scenario.covariates])
    write_json(truth.to_dict(), out / "ground_truth.json")
    write_json(build_manifest(scenario.to_dict(), scenario.seed,
                              ["subjects.csv", "ground_truth.json"]),
               out / "manifest.json")
    print(f"wrote {data.n_subjects} subjects across {data.n_trials} trials to {out}")
    return EXIT_OK


def _write_singleton_comparison(path, result):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "loo_ic", "se_loo_ic",
                         "elpd_diff_vs_best", "se_elpd_diff", "selected"])
        writer.writerow([result.label, repr(result.loo_ic), repr(result.se_loo_ic),
                         repr(0.0), repr(0.0), 1])


def _fit_one(data, config: RunConfig, n_knots: int, out: Path):
    bases = _build_bases(data, n_knots)
    model = DoseResponseModel(data, bases)
    draws = sample(model, config.sampler_config())
    label = f"k{n_knots}"
    write_draws(out, draws, label)
    report = split_rhat(draws)
    write_json(report.to_dict(), out / f"convergence_{label}.json")
    result = loo(draws, data, bases, label=str(n_knots))
    write_json(result.to_dict(), out / f"loo_{label}.json")
    return draws, report, result


def cmd_fit(args) -> int:
    config = _merge_config(args)
    config.validate()
    data, info = _load(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    reports, results = {}, []
    for n_knots in config.knots:
        print(f"fitting {n_knots}-knot model...", flush=True)
        _, report, result = _fit_one(data, config, n_knots, out)
        reports[n_knots] = report
        results.append(result)
        print(f"  loo_ic {result.loo_ic:.1f} (se {result.se_loo_ic:.1f}), "
              f"max rhat {report.max_rhat():.3f}, divergences {report.n_divergent}")

    if len(results) >= 2:
        comparison = compare_models(results, labels=[str(k) for k in config.knots])
        write_comparison_csv(out / "comparison.csv", comparison)
        selection = {
            "selected_knots": config.knots[comparison.selected],
            "increase_observed": comparison.increase_observed,
            "ranking": comparison.to_dict()["ranking"],
        }
    else:
        _write_singleton_comparison(out / "comparison.csv", results[0])
        selection = {"selected_knots": config.knots[0], "increase_observed": False,
                     "ranking": [str(config.knots[0])]}
    selection["converged"] = {str(k): r.converged for k, r in reports.items()}
    write_json(selection, out / "selection.json")
    write_json(build_manifest(config.to_dict(), config.seed,
                              [p.name for p in sorted(out.iterdir())]),
               out / "manifest.json")

    unconverged = {k: r for k, r in reports.items() if not r.converged}
    if unconverged:
        for k, report in unconverged.items():
            print(f"convergence failure for {k}-knot model; R-hat >= 1.1 for: "
                  f"{', '.join(report.flagged)}", file=sys.stderr)
        return EXIT_CONVERGENCE
    print(f"selected {selection['selected_knots']}-knot model")
    return EXIT_OK


def cmd_loo(args) -> int:
    config = _merge_config(args)
    config.validate()
    data, _ = _load(config)
    out = Path(config.out)
    results = []
    for n_knots in config.knots:
        draws = read_draws(out, f"k{n_knots}")
        bases = [BasisSet.from_dict(b) for b in draws.meta["bases"]]
        results.append(loo(draws, data, bases, label=str(n_knots)))
        write_json(results[-1].to_dict(), out / f"loo_k{n_knots}.json")
    if len(results) >= 2:
        comparison = compare_models(results, labels=[str(k) for k in config.knots])
        write_comparison_csv(out / "comparison.csv", comparison)
        print(f"best by loo_ic: {comparison.labels[comparison.ranking[0]]} knots; "
              f"stopping rule selects {comparison.labels[comparison.selected]}")
    return EXIT_OK


def _selected_draws(config: RunConfig, out: Path):
    selection_path = out / "selection.json"
    if getattr(config, "_knots_override", None) is not None:
        n_knots = config._knots_override
    elif selection_path.exists():
        n_knots = read_json(selection_path)["selected_knots"]
    else:
        raise FileNotFoundError(f"{selection_path} not found; run fit first")
    draws = read_draws(out, f"k{n_knots}")
    bases = [BasisSet.from_dict(b) for b in draws.meta["bases"]]
    return n_knots, draws, bases


def cmd_summarize(args) -> int:
    config = _merge_config(args)
    config._knots_override = args.use_knots
    config.validate()
    data, info = _load(config)
    out = Path(config.out)
    n_knots, draws, bases = _selected_draws(config, out)

    convergence = read_json(out / f"convergence_k{n_knots}.json")
    if not convergence["converged"]:
        print(f"{n_knots}-knot fit is unconverged; refusing to summarize",
              file=sys.stderr)
        return EXIT_CONVERGENCE

    table = risk_difference_table(draws, data, bases, config.risk_doses)
    write_risk_table_csv(out / "risk_differences.csv", table)

    best = prob_best(draws, data, bases, config.dose_max,
                     n_mesh=config.grid_points, mode="min")
    write_json({"dose_range": [0.0, config.dose_max], "mode": "min",
                "probabilities": best}, out / "prob_best.json")

    grid = _grid(config)
    _write_curves(draws, data, bases, grid, out)

    report = posterior_predictive_check(draws, data, bases, seed=config.seed)
    write_json(report.to_dict(), out / "ppc.json")
    for stat in report.statistics:
        safe = stat.name.replace("[", "_").replace("]", "").replace("/", "_")
        histogram_plot(stat.replicates, stat.observed, out / f"ppc_{safe}.svg",
                       title=stat.name)

    write_json(build_manifest(config.to_dict(), config.seed,
                              [p.name for p in sorted(out.iterdir())]),
               out / "summary_manifest.json")
    print(f"summaries for the {n_knots}-knot fit written to {out}")
    return EXIT_OK


def _write_curves(draws, data, bases, grid, out: Path):
    names = list(data.drug_names)
    for k, name in enumerate(names):
        for level in (0, 1):
            curve = curve_draws(draws, bases, k, level, grid)
            write_curve_csv(out / f"curve_{name}_m{level}.csv", curve)
            mask = data.doses[:, k] > 0
            curve_plot(curve, out / f"curve_{name}_m{level}.svg",
                       title=f"{name}, moderator={level}",
                       observations=(data.doses[mask, k], data.outcome[mask]))
        diff = difference_curve(draws, bases, k, grid)
        write_curve_csv(out / f"difference_{name}.csv", diff)
        difference_plot(diff, out / f"difference_{name}.svg",
                        title=f"{name}: moderator difference")


def cmd_ppc(args) -> int:
    config = _merge_config(args)
    config._knots_override = args.use_knots
    config.validate()
    data, _ = _load(config)
    out = Path(config.out)
    n_knots, draws, bases = _selected_draws(config, out)
    report = posterior_predictive_check(draws, data, bases, seed=config.seed)
    write_json(report.to_dict(), out / "ppc.json")
    for stat in report.statistics:
        safe = stat.name.replace("[", "_").replace("]", "").replace("/", "_")
        histogram_plot(stat.replicates, stat.observed, out / f"ppc_{safe}.svg",
                       title=stat.name)
    worst = min(report.statistics, key=lambda s: min(s.p_value, 1 - s.p_value))
    print(f"ppc report written; most extreme statistic {worst.name} "
          f"(p={worst.p_value:.3f})")
    return EXIT_OK


def cmd_curves(args) -> int:
    config = _merge_config(args)
    config._knots_override = args.use_knots
    config.validate()
    data, _ = _load(config)
    out = Path(config.out)
    _, draws, bases = _selected_draws(config, out)
    _write_curves(draws, data, bases, _grid(config), out)
    print(f"curve tables and figures written to {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--data", help="subject CSV path")
    p.add_argument("--drugs", type=_comma_list, help="comma-separated drug names")
    p.add_argument("--covariates", type=_comma_list,
                   help="comma-separated covariate names (cov_<name> columns)")
    p.add_argument("--moderator", help="moderator column name")
    p.add_argument("--knots", type=_int_list, help="candidate interior knot counts")
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--target-accept", dest="target_accept", type=float)
    p.add_argument("--max-tree-depth", dest="max_tree_depth", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dose-max", dest="dose_max", type=float,
                   help="upper end of the summary dose range (100mg units)")
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--risk-doses", dest="risk_doses", type=_float_list,
                   help="doses for the risk-difference table (100mg units)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dosemeta",
        description="Hierarchical Bayesian dose-response meta-analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--out", default="sim")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scenario", help="scenario JSON (defaults to the built-in)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit all candidate knot counts and compare")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("loo", help="recompute LOO comparison from stored fits")
    _add_config_flags(p)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("summarize", help="risk differences, curves, prob-best, ppc")
    _add_config_flags(p)
    p.add_argument("--use-knots", dest="use_knots", type=int, default=None,
                   help="summarize this knot count instead of the selected one")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("ppc", help="posterior predictive checks only")
    _add_config_flags(p)
    p.add_argument("--use-knots", dest="use_knots", type=int, default=None)
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("curves", help="curve tables and figures only")
    _add_config_flags(p)
    p.add_argument("--use-knots", dest="use_knots", type=int, default=None)
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, DegenerateDoseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceFailure as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
