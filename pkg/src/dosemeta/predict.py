"""Per-draw quantities reconstructed from stored posterior draws.

Stored draws carry both the canonical parameters and the derived trial
effects, so downstream consumers (pointwise likelihoods, predictive
checks, effect summaries) never re-run the sampler's transform.
"""

from __future__ import annotations

import numpy as np

from .basis import eval_matrix


class DrawBlocks:
    """Array views of the stored draw matrix, one attribute per block."""

    def __init__(self, draws):
        meta = draws.meta
        try:
            self.n_trials = meta["n_trials"]
            self.n_drugs = meta["n_drugs"]
            self.n_basis_columns = meta["n_basis_columns"]
            self.n_covariates = meta["n_covariates"]
        except KeyError as err:
            raise ValueError(
                "draws lack model shape metadata; fit artifacts must be "
                "loaded together with their sidecar") from err
        J, K, L, P = (self.n_trials, self.n_drugs,
                      self.n_basis_columns, self.n_covariates)
        S = K * L
        self.n_draws = draws.n_total

        self.mu_alpha = draws.column("mu_alpha")
        self.mu_phi = draws.array(
            [f"mu_phi[{k},{l}]" for k in range(K) for l in range(L)]
        ).reshape(self.n_draws, K, L)
        self.beta = (draws.array([f"beta[{p}]" for p in range(P)])
                     if P else np.zeros((self.n_draws, 0)))
        self.theta = draws.array(
            [f"theta[{k},{l}]" for k in range(K) for l in range(L)]
        ).reshape(self.n_draws, K, L)
        self.alpha = draws.array([f"alpha[{j}]" for j in range(J)])
        self.phi = draws.array(
            [f"phi[{j},{k},{l}]" for j in range(J) for k in range(K) for l in range(L)]
        ).reshape(self.n_draws, J, S)


def design_matrix(bases, doses: np.ndarray) -> np.ndarray:
    """Stacked per-drug design rows, shape (n, K * n_columns)."""
    return np.hstack([eval_matrix(b, doses[:, k]) for k, b in enumerate(bases)])


def observed_predictors(blocks: DrawBlocks, data, bases, chunk_size: int = 256):
    """Yield (draw_slice, eta) chunks of the linear predictor at observed data.

    ``eta`` has shape (chunk, n_subjects) with subjects in dataset order.
    """
    X = design_matrix(bases, data.doses)
    tidx = data.trial_index
    moderated = data.moderator.astype(float)
    trial_cols = [np.nonzero(tidx == j)[0] for j in range(data.n_trials)]
    S = blocks.n_drugs * blocks.n_basis_columns
    theta_flat = blocks.theta.reshape(blocks.n_draws, S)

    for start in range(0, blocks.n_draws, chunk_size):
        sl = slice(start, min(start + chunk_size, blocks.n_draws))
        eta = blocks.alpha[sl][:, tidx].copy()
        for j, cols in enumerate(trial_cols):
            if cols.size:
                eta[:, cols] += blocks.phi[sl, j] @ X[cols].T
        eta += (theta_flat[sl] @ X.T) * moderated[None, :]
        if data.n_covariates:
            eta += blocks.beta[sl] @ data.covariates.T
        yield sl, eta


def assignment_groups(data):
    """(labels, index arrays) of assigned treatment groups: placebo + drugs."""
    names = list(data.drug_names) if data.drug_names else [
        f"drug{k}" for k in range(data.n_drugs)]
    positive = data.doses > 0
    labels = ["placebo"] + names
    groups = [np.nonzero(~positive.any(axis=1))[0]]
    for k in range(data.n_drugs):
        groups.append(np.nonzero(positive[:, k])[0])
    return labels, groups
