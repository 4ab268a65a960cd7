"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as
they complete.  Tolerances are fixed here, not calibrated elsewhere.
"""

import filecmp
import time

import numpy as np
import pytest
from scipy.special import expit, logsumexp

from dosemeta.basis import build_basis, dropped_column, eval_matrix, eval_row
from dosemeta.cli import main
from dosemeta.diagnostics import (_ess_base, _split_chains, posterior_predictive_check,
                                  split_rhat)
from dosemeta.loo import compare_models, loo, pointwise_loglik, psis_smooth
from dosemeta.model import Dataset, DoseResponseModel
from dosemeta.sampler import PosteriorDraws, SamplerConfig, sample
from dosemeta.simulate import (ArmSpec, CovariateSpec, CurveSpec, SimScenario,
                               simulate)
from dosemeta.summaries import curve_draws, difference_curve, prob_best


def _report(name, ok, detail):
    marker = "PASS" if ok else "FAIL"
    print(f"[{marker}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _gradient_check_dataset(seed):
    rng = np.random.default_rng(seed)
    n, J, K, P = 150, 3, 2, 2
    arm = rng.integers(0, K + 1, n)
    doses = np.zeros((n, K))
    for i in range(n):
        if arm[i] < K:
            doses[i, arm[i]] = rng.uniform(0.5, 25)
    return Dataset(
        trial_index=rng.integers(0, J, n), doses=doses,
        outcome=rng.integers(0, 2, n), covariates=rng.normal(size=(n, P)),
        moderator=rng.integers(0, 2, n), n_trials=J)


def test_criterion_1_gradient_correctness():
    """Analytic gradient vs central differences, 25 points x 3 datasets."""
    start = time.time()
    worst = 0.0
    rng = np.random.default_rng(1001)
    for ds_seed in (1, 2, 3):
        data = _gradient_check_dataset(ds_seed)
        bases = [build_basis(data.doses_by_trial(k), 1, drug_index=k)
                 for k in range(data.n_drugs)]
        model = DoseResponseModel(data, bases)
        h = 1e-5
        for _ in range(25):
            u = rng.uniform(-1.5, 1.5, model.n_params)
            grad = model.log_posterior_gradient(u)
            for i in range(model.n_params):
                up, um = u.copy(), u.copy()
                up[i] += h
                um[i] -= h
                fd = (model.log_posterior(up) - model.log_posterior(um)) / (2 * h)
                rel = abs(grad[i] - fd) / max(1.0, abs(fd))
                worst = max(worst, rel)
    elapsed = time.time() - start
    _report("criterion 1 (gradient correctness)",
            worst < 1e-6 and elapsed < 60,
            f"max relative error {worst:.2e} over 75 full-vector checks, {elapsed:.0f}s")


def test_criterion_2_spline_identities():
    start = time.time()
    rng = np.random.default_rng(2002)
    failures = []
    for knots in (1, 2, 3):
        basis = build_basis([rng.uniform(0.5, 40, 500)], knots)
        x = rng.uniform(0, basis.boundary_high, 10_000)
        partition = eval_matrix(basis, x).sum(axis=1) + dropped_column(basis, x)
        if np.abs(partition - 1).max() > 1e-12:
            failures.append(f"partition of unity off by {np.abs(partition - 1).max():.2e}")
        if np.abs(eval_row(basis, 0.0)).max() != 0.0:
            failures.append("dose-0 design row is not exactly zero")
        h = 1e-4
        for knot in basis.interior_knots:
            for order in (1, 2):
                def dd(x0):
                    if order == 1:
                        return (eval_row(basis, x0 + h) - eval_row(basis, x0 - h)) / (2 * h)
                    return (eval_row(basis, x0 + h) - 2 * eval_row(basis, x0)
                            + eval_row(basis, x0 - h)) / h**2
                gap = np.abs(dd(knot - 5 * h) - dd(knot + 5 * h)).max()
                if gap > 1e-6 * max(1.0, basis.boundary_high):
                    failures.append(f"C2 break at knot {knot}: {gap:.2e}")
    elapsed = time.time() - start
    _report("criterion 2 (spline identities)",
            not failures and elapsed < 10,
            failures[0] if failures else f"all identities hold, {elapsed:.0f}s")


def test_criterion_3_prior_calibration():
    start = time.time()
    rng = np.random.default_rng(3003)
    sigma = 0.1 * np.tan(np.pi * rng.random(400_000) / 2)
    mass = float((sigma < 1.3).mean())
    elapsed = time.time() - start
    _report("criterion 3 (prior calibration)",
            abs(mass - 0.951) <= 0.005 and elapsed < 10,
            f"P(sigma < 1.3) = {mass:.4f} (target 0.951 +/- 0.005), {elapsed:.0f}s")


class _StdGaussian:
    def __init__(self, dim):
        self.n_params = dim

    def logp_and_grad(self, u):
        return -0.5 * float(u @ u), -u


def test_criterion_4_sampler_calibration():
    start = time.time()
    draws = sample(_StdGaussian(10),
                   SamplerConfig(n_chains=4, n_warmup=1000, n_draws=2000, seed=4004))
    report = split_rhat(draws)
    x = draws.stacked()
    mcse = x.std(axis=0) / np.sqrt(report.ess_bulk)
    max_abs_mean = float(np.abs(x.mean(axis=0)).max())
    means_ok = np.all(np.abs(x.mean(axis=0)) <= 3 * mcse)
    rhat_ok = report.max_rhat() < 1.01
    elapsed = time.time() - start
    _report("criterion 4 (sampler calibration)",
            bool(means_ok and rhat_ok) and elapsed < 120,
            f"max |mean| {max_abs_mean:.4f}, max rhat {report.max_rhat():.4f}, {elapsed:.0f}s")


def test_criterion_10_end_to_end_determinism(tmp_path):
    start = time.time()
    flags = ["--drugs", "drugA,drugB", "--covariates", "age_std,female",
             "--knots", "0,1", "--chains", "2", "--warmup", "150",
             "--draws", "150", "--seed", "12", "--dose-max", "6",
             "--grid-points", "31"]
    outputs = []
    for run in ("one", "two"):
        sim = tmp_path / f"sim_{run}"
        out = tmp_path / f"out_{run}"
        assert main(["simulate", "--out", str(sim), "--seed", "77"]) == 0
        assert main(["fit", "--data", str(sim / "subjects.csv"),
                     "--out", str(out)] + flags) == 0
        assert main(["summarize", "--data", str(sim / "subjects.csv"),
                     "--out", str(out)] + flags) == 0
        outputs.append((sim, out))
    (sim_a, out_a), (sim_b, out_b) = outputs
    mismatched = []
    for name in ["subjects.csv", "ground_truth.json", "manifest.json"]:
        if not filecmp.cmp(sim_a / name, sim_b / name, shallow=False):
            mismatched.append(f"sim/{name}")
    names = sorted(p.name for p in out_a.iterdir())
    assert names == sorted(p.name for p in out_b.iterdir())
    for name in names:
        if not filecmp.cmp(out_a / name, out_b / name, shallow=False):
            mismatched.append(name)
    elapsed = time.time() - start
    _report("criterion 10 (end-to-end determinism)",
            not mismatched,
            (f"{len(names)} artifacts byte-identical across reruns, {elapsed:.0f}s"
             if not mismatched else f"differss: {mismatched[:4]}"))
