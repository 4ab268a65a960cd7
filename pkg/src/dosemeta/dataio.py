"""File formats: subject CSV, draw storage, reports, and run manifests.

The subject schema is one row per participant:
``trial_id,outcome,moderator,dose_<drug>...,cov_<name>...`` with doses in
100mg-equivalent units; a missing dose column means dose 0 for that drug.
All emitted files are byte-deterministic for a fixed config and seed:
floats use shortest round-trip formatting and JSON keys are sorted.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .model import Dataset
from .sampler import PosteriorDraws, SamplerConfig


class DataFormatError(ValueError):
    """Malformed input data; message carries line and column context."""


@dataclass
class LoadInfo:
    """Bookkeeping from a subject-file load."""

    trial_labels: list
    covariate_names: list
    moderator_name: str
    standardization: dict = field(default_factory=dict)  # name -> (mean, sd)


def _fmt(value) -> str:
    return repr(float(value))


def load_subjects(path, drugs, covariate_names=(), moderator_name="moderator",
                  standardize=True):
    """Read the canonical subject CSV into a Dataset.

    Trial labels are mapped to indices in sorted label order.  Continuous
    covariates (anything not coded 0/1) are standardized to mean zero and
    unit variance; the applied shifts are returned for reporting.
    """
    drugs = list(drugs)
    covariate_names = list(covariate_names)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        rows = list(reader)

    col = {name: i for i, name in enumerate(header)}
    for required in ["trial_id", "outcome", moderator_name]:
        if required not in col:
            raise DataFormatError(f"{path}: missing required column '{required}'")
    for name in covariate_names:
        if f"cov_{name}" not in col:
            raise DataFormatError(f"{path}: missing covariate column 'cov_{name}'")
    dose_cols = {k: col.get(f"dose_{d}") for k, d in enumerate(drugs)}

    n = len(rows)
    trial_raw = []
    outcome = np.empty(n, dtype=int)
    moderator = np.empty(n, dtype=int)
    doses = np.zeros((n, len(drugs)))
    covariates = np.zeros((n, len(covariate_names)))

    def parse(row, line, name, kind=float):
        raw = row[col[name]]
        try:
            return kind(raw)
        except ValueError:
            raise DataFormatError(
                f"{path}: line {line}, column '{name}': cannot parse {raw!r}") from None

    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise DataFormatError(
                f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
        trial_raw.append(row[col["trial_id"]])
        outcome[i] = _parse_binary(parse(row, line, "outcome"), path, line, "outcome")
        moderator[i] = _parse_binary(parse(row, line, moderator_name),
                                     path, line, moderator_name)
        for k in range(len(drugs)):
            if dose_cols[k] is not None:
                raw = row[dose_cols[k]]
                try:
                    doses[i, k] = float(raw) if raw != "" else 0.0
                except ValueError:
                    raise DataFormatError(
                        f"{path}: line {line}, column 'dose_{drugs[k]}': "
                        f"cannot parse {raw!r}") from None
                if doses[i, k] < 0:
                    raise DataFormatError(
                        f"{path}: line {line}, column 'dose_{drugs[k]}': negative dose")
        for p, name in enumerate(covariate_names):
            covariates[i, p] = parse(row, line, f"cov_{name}")

    labels = sorted(set(trial_raw))
    index = {lab: j for j, lab in enumerate(labels)}
    trial_index = np.array([index[t] for t in trial_raw], dtype=int)

    standardization = {}
    if standardize:
        for p, name in enumerate(covariate_names):
            values = covariates[:, p]
            if np.isin(values, (0.0, 1.0)).all():
                continue
            mean = float(values.mean())
            sd = float(values.std())
            if sd == 0:
                raise DataFormatError(
                    f"{path}: covariate '{name}' is constant; drop it or recode")
            covariates[:, p] = (values - mean) / sd
            standardization[name] = (mean, sd)

    data = Dataset(trial_index=trial_index, doses=doses, outcome=outcome,
                   covariates=covariates, moderator=moderator,
                   n_trials=len(labels), drug_names=tuple(drugs))
    info = LoadInfo(trial_labels=labels, covariate_names=covariate_names,
                    moderator_name=moderator_name, standardization=standardization)
    return data, info


def _parse_binary(value, path, line, name) -> int:
    if value not in (0.0, 1.0):
        raise DataFormatError(
            f"{path}: line {line}, column '{name}': expected 0 or 1, got {value!r}")
    return int(value)


def write_subjects(path, data: Dataset, covariate_names=(), trial_labels=None,
                   moderator_name="moderator"):
    covariate_names = list(covariate_names)
    if len(covariate_names) != data.n_covariates:
        covariate_names = [f"x{p}" for p in range(data.n_covariates)]
    drugs = list(data.drug_names) if data.drug_names else [
        f"drug{k}" for k in range(data.n_drugs)]
    if trial_labels is None:
        trial_labels = [f"trial{j:02d}" for j in range(data.n_trials)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_id", "outcome", moderator_name]
                        + [f"dose_{d}" for d in drugs]
                        + [f"cov_{c}" for c in covariate_names])
        for i in range(data.n_subjects):
            writer.writerow(
                [trial_labels[data.trial_index[i]], int(data.outcome[i]),
                 int(data.moderator[i])]
                + [_fmt(v) for v in data.doses[i]]
                + [_fmt(v) for v in data.covariates[i]])


# -- JSON helpers --------------------------------------------------------------

def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def build_manifest(config: dict, seed, outputs=()) -> dict:
    return {
        "config_hash": config_hash(config),
        "seed": seed,
        "version": __version__,
        "outputs": sorted(outputs),
    }


# -- draws persistence --------------------------------------------------------

def write_draws(dirpath, draws: PosteriorDraws, label: str):
    """Draw CSV plus a JSON sidecar with config, adaptation, and shapes."""
    csv_path = dirpath / f"draws_{label}.csv"
    draws.to_csv(csv_path)
    sidecar = {
        "config": draws.config.to_dict() if draws.config else None,
        "adaptation": draws.adaptation,
        "meta": draws.meta,
    }
    write_json(sidecar, dirpath / f"draws_{label}.json")


def read_draws(dirpath, label: str) -> PosteriorDraws:
    sidecar = read_json(dirpath / f"draws_{label}.json")
    config = SamplerConfig.from_dict(sidecar["config"]) if sidecar["config"] else None
    return PosteriorDraws.from_csv(
        dirpath / f"draws_{label}.csv", config=config,
        adaptation=sidecar.get("adaptation", {}), meta=sidecar.get("meta", {}))


# -- report tables --------------------------------------------------------------

def write_comparison_csv(path, comparison):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "loo_ic", "se_loo_ic",
                         "elpd_diff_vs_best", "se_elpd_diff", "selected"])
        for row in comparison.to_rows():
            writer.writerow([row["label"], _fmt(row["loo_ic"]), _fmt(row["se_loo_ic"]),
                             _fmt(row["elpd_diff_vs_best"]), _fmt(row["se_elpd_diff"]),
                             int(row["selected"])])


def write_risk_table_csv(path, table):
    """Wide layout: one row per (subgroup, dose), three columns per drug."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["subgroup", "dose"]
        for drug in table.drugs:
            header += [f"{drug}_mean", f"{drug}_lo", f"{drug}_hi"]
        writer.writerow(header)
        for s, sub in enumerate(table.subgroups):
            for a, dose in enumerate(table.doses):
                row = [_subgroup_label(sub), _fmt(dose)]
                for k in range(len(table.drugs)):
                    row += [_fmt(table.mean[k, a, s]), _fmt(table.lower[k, a, s]),
                            _fmt(table.upper[k, a, s])]
                writer.writerow(row)


def _subgroup_label(sub):
    return {0: "moderator=0", 1: "moderator=1"}.get(sub, str(sub))


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dose", "mean", "lower", "upper"])
        for row in curve.rows():
            writer.writerow([_fmt(row["dose"]), _fmt(row["mean"]),
                             _fmt(row["lower"]), _fmt(row["upper"])])
