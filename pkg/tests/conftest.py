import numpy as np
import pytest

from dosemeta.basis import build_basis
from dosemeta.model import Dataset, DoseResponseModel
from dosemeta.sampler import SamplerConfig, sample
from dosemeta.simulate import ArmSpec, CovariateSpec, CurveSpec, SimScenario, simulate


def small_scenario(seed=0, moderated=True):
    """Three trials, two drugs, light heterogeneity; fits in a few seconds."""
    trials = []
    for daily_a, daily_b in [(0.5, 0.4), (0.8, 0.6), (0.6, 0.5)]:
        trials.append([
            ArmSpec(drug=None, n_subjects=40),
            ArmSpec(drug="drugA", n_subjects=45, daily_dose=daily_a),
            ArmSpec(drug="drugB", n_subjects=45, daily_dose=daily_b),
        ])
    moderator_curves = {}
    if moderated:
        moderator_curves["drugA"] = CurveSpec(height=0.9, midpoint=6.0, scale=2.5)
    return SimScenario(
        drugs=["drugA", "drugB"],
        trials=trials,
        curves={
            "drugA": CurveSpec(height=1.8, midpoint=5.0, scale=2.5),
            "drugB": CurveSpec(height=1.0, midpoint=5.0, scale=2.5),
        },
        moderator_curves=moderator_curves,
        sigma_alpha=0.2,
        sigma_curve=0.05,
        covariates=[CovariateSpec(name="x1", kind="normal", effect=0.3)],
        moderator_prob=0.5,
        n_periods=30,
        dropout_hazard=0.1,
        seed=seed,
    )


@pytest.fixture(scope="session")
def sim_small():
    return simulate(small_scenario(seed=11))


@pytest.fixture(scope="session")
def fitted(sim_small):
    """One small 1-knot fit shared across test modules."""
    data, truth = sim_small
    bases = [build_basis(data.doses_by_trial(k), 1, drug_index=k)
             for k in range(data.n_drugs)]
    model = DoseResponseModel(data, bases)
    draws = sample(model, SamplerConfig(n_chains=2, n_warmup=300, n_draws=400, seed=2024))
    return data, truth, bases, model, draws


def toy_dataset(seed=7, n=120, n_trials=3, n_drugs=2, n_covariates=2):
    """Unstructured random dataset for density/gradient checks."""
    rng = np.random.default_rng(seed)
    arm = rng.integers(0, n_drugs + 1, n)
    doses = np.zeros((n, n_drugs))
    for i in range(n):
        if arm[i] < n_drugs:
            doses[i, arm[i]] = rng.uniform(0.5, 30)
    return Dataset(
        trial_index=rng.integers(0, n_trials, n),
        doses=doses,
        outcome=rng.integers(0, 2, n),
        covariates=rng.normal(size=(n, n_covariates)),
        moderator=rng.integers(0, 2, n),
        n_trials=n_trials,
        drug_names=tuple(f"drug{k}" for k in range(n_drugs)),
    )
