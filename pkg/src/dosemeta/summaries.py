"""Decision-relevant posterior summaries.

Risk differences average subject-level predicted probabilities over the
observed covariate mix, holding each subject's own trial intercept and
moderator fixed; curves are evaluated at the pooled coefficients with
covariates at zero, so they describe a typical subject.  All summaries
are deterministic functions of the stored draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .basis import eval_matrix
from .predict import DrawBlocks

__all__ = [
    "SummaryCurve",
    "RiskDifferenceTable",
    "risk_difference",
    "risk_difference_table",
    "prob_best",
    "difference_curve",
    "curve_draws",
]

DRAW_CHUNK = 256


@dataclass
class SummaryCurve:
    """A dose grid with per-draw values, posterior mean, and 95% band."""

    drug: str
    moderator: object          # 0, 1, or a descriptive tag
    grid: np.ndarray
    values: np.ndarray         # (n_draws, n_grid)
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_values(cls, drug, moderator, grid, values) -> "SummaryCurve":
        grid = np.asarray(grid, dtype=float)
        if np.any(np.diff(grid) <= 0):
            raise ValueError("dose grid must be strictly ascending")
        return cls(
            drug=drug, moderator=moderator, grid=grid, values=values,
            mean=values.mean(axis=0),
            lower=np.quantile(values, 0.025, axis=0),
            upper=np.quantile(values, 0.975, axis=0),
        )

    def rows(self):
        for g in range(len(self.grid)):
            yield {"dose": float(self.grid[g]), "mean": float(self.mean[g]),
                   "lower": float(self.lower[g]), "upper": float(self.upper[g])}


@dataclass
class RiskDifferenceTable:
    """Posterior mean and 95% interval of risk differences, percentage points."""

    drugs: list
    doses: list
    subgroups: list
    mean: np.ndarray    # (n_drugs, n_doses, n_subgroups)
    lower: np.ndarray
    upper: np.ndarray

    def entry(self, drug, dose, subgroup):
        k = self.drugs.index(drug)
        a = self.doses.index(dose)
        s = self.subgroups.index(subgroup)
        return self.mean[k, a, s], self.lower[k, a, s], self.upper[k, a, s]


def _drug_names(blocks: DrawBlocks, meta: dict):
    names = meta.get("drug_names") or []
    if len(names) != blocks.n_drugs:
        names = [f"drug{k}" for k in range(blocks.n_drugs)]
    return list(names)


def _subgroup_rows(data, subgroup):
    if subgroup == "all":
        rows = np.arange(data.n_subjects)
    elif subgroup in (0, 1):
        rows = np.nonzero(data.moderator == subgroup)[0]
    else:
        raise ValueError(f"unknown subgroup {subgroup!r}; use 'all', 0, or 1")
    if rows.size == 0:
        raise ValueError(f"subgroup {subgroup!r} contains no subjects")
    return rows


def risk_difference(draws, data, bases, drug: int, dose: float,
                    subgroup="all", dose_from: float = 0.0) -> np.ndarray:
    """Per-draw averaged risk difference for one drug between two doses.

    For every draw, each subject in the designated set is pushed to
    ``dose`` of ``drug`` (all other drugs at zero) and to ``dose_from``,
    keeping the subject's own trial intercept, covariates, and moderator;
    the difference of the two predicted probabilities is averaged over
    the set.
    """
    if dose < 0 or dose_from < 0:
        raise ValueError("doses must be nonnegative")
    blocks = DrawBlocks(draws)
    rows = _subgroup_rows(data, subgroup)
    L = blocks.n_basis_columns
    row_hi = eval_matrix(bases[drug], [dose])[0]
    row_lo = eval_matrix(bases[drug], [dose_from])[0]

    tidx = data.trial_index[rows]
    mod = data.moderator[rows]
    cov = data.covariates[rows]
    phi_block = slice(drug * L, (drug + 1) * L)

    out = np.empty(blocks.n_draws)
    for start in range(0, blocks.n_draws, DRAW_CHUNK):
        sl = slice(start, min(start + DRAW_CHUNK, blocks.n_draws))
        base = blocks.alpha[sl][:, tidx]
        if data.n_covariates:
            base = base + blocks.beta[sl] @ cov.T
        coef = blocks.phi[sl][:, :, phi_block] + \
            blocks.theta[sl][:, None, drug, :]  # (B, J, L) with moderator on
        shift_on = np.stack([blocks.phi[sl][:, :, phi_block], coef], axis=2)  # (B, J, 2, L)
        s_hi = shift_on @ row_hi   # (B, J, 2)
        s_lo = shift_on @ row_lo
        eta_hi = base + s_hi[:, tidx, mod]
        eta_lo = base + s_lo[:, tidx, mod]
        out[sl] = (expit(eta_hi) - expit(eta_lo)).mean(axis=1)
    return out


def risk_difference_table(draws, data, bases, doses,
                          subgroups=("all", 0, 1)) -> RiskDifferenceTable:
    """Table of risk differences vs no treatment, in percentage points."""
    blocks = DrawBlocks(draws)
    names = _drug_names(blocks, draws.meta)
    doses = list(doses)
    subgroups = list(subgroups)
    shape = (len(names), len(doses), len(subgroups))
    mean = np.empty(shape)
    lower = np.empty(shape)
    upper = np.empty(shape)
    for k in range(len(names)):
        for a, dose in enumerate(doses):
            for s, sub in enumerate(subgroups):
                delta = 100.0 * risk_difference(draws, data, bases, k, dose, sub)
                mean[k, a, s] = delta.mean()
                lower[k, a, s] = np.quantile(delta, 0.025)
                upper[k, a, s] = np.quantile(delta, 0.975)
    return RiskDifferenceTable(drugs=names, doses=doses, subgroups=subgroups,
                               mean=mean, lower=lower, upper=upper)


def prob_best(draws, data, bases, dose_max: float, n_mesh: int = 101,
              mode: str = "min") -> dict:
    """Probability each drug has the smallest (or largest) averaged effect.

    The effect is the sample-averaged risk difference on a uniform mesh
    over ``(0, dose_max]``; the argmin indicator is averaged over the
    mesh with trapezoidal endpoint weights and over draws.  Ties split
    their mass equally, so the probabilities sum to one.
    """
    if dose_max <= 0:
        raise ValueError("dose_max must be positive")
    if n_mesh < 2:
        raise ValueError("n_mesh must be at least 2")
    if mode not in ("min", "max"):
        raise ValueError("mode must be 'min' or 'max'")
    blocks = DrawBlocks(draws)
    names = _drug_names(blocks, draws.meta)
    K, L = blocks.n_drugs, blocks.n_basis_columns

    mesh = dose_max * np.arange(1, n_mesh + 1) / n_mesh
    mesh_weights = np.ones(n_mesh)
    mesh_weights[0] = mesh_weights[-1] = 0.5
    mesh_weights /= mesh_weights.sum()

    tidx = data.trial_index
    mod = data.moderator
    rows = [eval_matrix(bases[k], mesh) for k in range(K)]  # (G, L) each

    probs = np.zeros(K)
    for start in range(0, blocks.n_draws, DRAW_CHUNK):
        sl = slice(start, min(start + DRAW_CHUNK, blocks.n_draws))
        base = blocks.alpha[sl][:, tidx]
        if data.n_covariates:
            base = base + blocks.beta[sl] @ data.covariates.T
        b_sz = base.shape[0]
        effect = np.empty((b_sz, n_mesh, K))
        for k in range(K):
            block = slice(k * L, (k + 1) * L)
            off = blocks.phi[sl][:, :, block]
            on = off + blocks.theta[sl][:, None, k, :]
            shift = np.stack([off, on], axis=2) @ rows[k].T   # (B, J, 2, G)
            for g in range(n_mesh):
                eta = base + shift[:, tidx, mod, g]
                effect[:, g, k] = expit(eta).mean(axis=1)
        sign = effect if mode == "min" else -effect
        extreme = sign.min(axis=2, keepdims=True)
        ties = sign == extreme
        share = ties / ties.sum(axis=2, keepdims=True)
        probs += (share * mesh_weights[None, :, None]).sum(axis=(0, 1))
    probs /= blocks.n_draws
    return {names[k]: float(probs[k]) for k in range(K)}


def curve_draws(draws, bases, drug: int, moderator: int, grid) -> SummaryCurve:
    """Probability-scale dose-response draws at the pooled coefficients."""
    blocks = DrawBlocks(draws)
    names = _drug_names(blocks, draws.meta)
    grid = np.asarray(grid, dtype=float)
    rows = eval_matrix(bases[drug], grid)
    coef = blocks.mu_phi[:, drug, :]
    if moderator:
        coef = coef + blocks.theta[:, drug, :]
    eta = blocks.mu_alpha[:, None] + coef @ rows.T
    return SummaryCurve.from_values(names[drug], moderator, grid, expit(eta))


def difference_curve(draws, bases, drug: int, grid) -> SummaryCurve:
    """Moderator-1 minus moderator-0 curve at pooled coefficients, covariates zero."""
    blocks = DrawBlocks(draws)
    names = _drug_names(blocks, draws.meta)
    grid = np.asarray(grid, dtype=float)
    rows = eval_matrix(bases[drug], grid)
    eta0 = blocks.mu_alpha[:, None] + blocks.mu_phi[:, drug, :] @ rows.T
    eta1 = blocks.mu_alpha[:, None] + \
        (blocks.mu_phi[:, drug, :] + blocks.theta[:, drug, :]) @ rows.T
    return SummaryCurve.from_values(names[drug], "difference", grid,
                                    expit(eta1) - expit(eta0))
