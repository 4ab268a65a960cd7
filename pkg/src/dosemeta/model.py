"""Joint log-density and exact gradients for the hierarchical dose-response model.

The outcome model is Bernoulli-logit with a per-trial intercept, per-trial
spline coefficients for each drug, shared confounder coefficients, and a
shared moderator offset curve per drug.  Trial effects are non-centered:
``[alpha_j, phi_j] = mu + D(sigma) @ chol(omega) @ z_j`` with standard-normal
offsets ``z_j``, half-Cauchy scales, and an LKJ-distributed correlation
matrix.  Everything is evaluated over an unconstrained vector (log scales,
tanh-parameterized canonical partial correlations) with the change-of-
variables terms included, so the density can be handed directly to a
gradient-based sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, expit, gammaln

from .basis import eval_matrix, eval_row

__all__ = [
    "SubjectRecord",
    "Dataset",
    "ParameterState",
    "DoseResponseModel",
    "linear_predictor",
    "log_posterior",
    "log_posterior_gradient",
]

T_DF = 5.0          # Student-t df for coefficient priors
T_SCALE = 2.5       # Student-t scale, weakly informative on the log-odds scale
SIGMA_SCALE = 0.1   # half-Cauchy scale; ~95% prior mass on sigma below 1.3
LKJ_ETA = 3.0       # correlation prior concentration, favors the identity


@dataclass(frozen=True)
class SubjectRecord:
    """One trial participant."""

    trial: int
    doses: tuple[float, ...]
    outcome: int
    covariates: tuple[float, ...]
    moderator: int


@dataclass(frozen=True)
class Dataset:
    """Pooled subject-level data from all trials.

    Attributes
    ----------
    trial_index : (n,) int array, values in [0, n_trials)
    doses : (n, K) nonnegative cumulative doses, 100mg-equivalent units
    outcome : (n,) binary
    covariates : (n, P) pre-centered covariates
    moderator : (n,) binary
    """

    trial_index: np.ndarray
    doses: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    moderator: np.ndarray
    n_trials: int
    drug_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trial_index", np.asarray(self.trial_index, dtype=int))
        object.__setattr__(self, "doses", np.atleast_2d(np.asarray(self.doses, dtype=float)))
        object.__setattr__(self, "outcome", np.asarray(self.outcome, dtype=int))
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(len(cov), -1) if cov.size else cov.reshape(0, 0)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "moderator", np.asarray(self.moderator, dtype=int))
        n = self.trial_index.shape[0]
        if self.doses.shape[0] != n or self.outcome.shape[0] != n \
                or self.covariates.shape[0] != n or self.moderator.shape[0] != n:
            raise ValueError("dataset arrays have inconsistent lengths")
        if n:
            if self.trial_index.min() < 0 or self.trial_index.max() >= self.n_trials:
                raise ValueError("trial indices must lie in [0, n_trials)")
            if np.any(self.doses < 0) or not np.all(np.isfinite(self.doses)):
                raise ValueError("doses must be finite and nonnegative")
            if not np.isin(self.outcome, (0, 1)).all():
                raise ValueError("outcomes must be 0/1")
            if not np.isin(self.moderator, (0, 1)).all():
                raise ValueError("moderator must be 0/1")
            if np.any((self.doses > 0).sum(axis=1) > 1):
                raise ValueError("subjects may have a positive dose for at most one drug")
        if self.drug_names and len(self.drug_names) != self.n_drugs:
            raise ValueError("drug_names length must match dose columns")

    @property
    def n_subjects(self) -> int:
        return self.trial_index.shape[0]

    @property
    def n_drugs(self) -> int:
        return self.doses.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @classmethod
    def from_subjects(cls, subjects, n_trials=None, n_drugs=None, n_covariates=None,
                      drug_names=()) -> "Dataset":
        subjects = list(subjects)
        if subjects:
            n_drugs = len(subjects[0].doses) if n_drugs is None else n_drugs
            n_covariates = len(subjects[0].covariates) if n_covariates is None else n_covariates
            n_trials = max(s.trial for s in subjects) + 1 if n_trials is None else n_trials
        else:
            n_drugs = n_drugs or 0
            n_covariates = n_covariates or 0
            n_trials = n_trials or 0
        return cls(
            trial_index=np.array([s.trial for s in subjects], dtype=int),
            doses=np.array([s.doses for s in subjects], dtype=float).reshape(len(subjects), n_drugs),
            outcome=np.array([s.outcome for s in subjects], dtype=int),
            covariates=np.array([s.covariates for s in subjects], dtype=float).reshape(
                len(subjects), n_covariates),
            moderator=np.array([s.moderator for s in subjects], dtype=int),
            n_trials=n_trials,
            drug_names=tuple(drug_names),
        )

    def subject(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            trial=int(self.trial_index[i]),
            doses=tuple(self.doses[i]),
            outcome=int(self.outcome[i]),
            covariates=tuple(self.covariates[i]),
            moderator=int(self.moderator[i]),
        )

    def doses_by_trial(self, drug: int):
        """Per-trial dose lists for one drug (input shape for build_basis)."""
        return [self.doses[self.trial_index == j, drug] for j in range(self.n_trials)]


@dataclass
class ParameterState:
    """Constrained-space parameters.

    ``z`` holds the standardized trial offsets; the implied trial effects
    are ``mu + sigma * (chol(omega) @ z_j)`` per trial (see
    :meth:`trial_effects`).
    """

    mu_alpha: float
    mu_phi: np.ndarray      # (K, L)
    sigma: np.ndarray       # (KL+1,) positive
    omega: np.ndarray       # (KL+1, KL+1) correlation matrix
    z: np.ndarray           # (J, KL+1)
    beta: np.ndarray        # (P,)
    theta: np.ndarray       # (K, L)

    def validate(self, atol=1e-8):
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive elementwise")
        if not np.allclose(self.omega, self.omega.T, atol=atol):
            raise ValueError("omega must be symmetric")
        if not np.allclose(np.diag(self.omega), 1.0, atol=atol):
            raise ValueError("omega must have unit diagonal")
        # positive-definite up to roundoff; near-singular draws are legal
        if np.linalg.eigvalsh(self.omega).min() < -1e-10 * self.omega.shape[0]:
            raise ValueError("omega is not positive semi-definite")

    def trial_effects(self) -> np.ndarray:
        """(J, KL+1) matrix with rows [alpha_j, phi_j-flattened]."""
        w = _robust_cholesky(self.omega)
        mu = np.concatenate([[self.mu_alpha], self.mu_phi.ravel()])
        return mu[None, :] + self.sigma[None, :] * (self.z @ w.T)


# -- scalar prior densities (normalized) ------------------------------------

def student_t_logpdf(x, df=T_DF, scale=T_SCALE):
    x = np.asarray(x, dtype=float)
    const = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * np.log(df * np.pi) - np.log(scale)
    return const - (df + 1) / 2 * np.log1p((x / scale) ** 2 / df)


def _student_t_score(x, df=T_DF, scale=T_SCALE):
    return -(df + 1) * x / (df * scale**2 + x**2)


def half_cauchy_logpdf(x, scale=SIGMA_SCALE):
    x = np.asarray(x, dtype=float)
    return np.log(2 / np.pi) - np.log(scale) - np.log1p((x / scale) ** 2)


def lkj_log_density(omega: np.ndarray, eta: float = LKJ_ETA) -> float:
    """Unnormalized LKJ log-density on a correlation matrix: (eta-1)*logdet."""
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        raise ValueError("omega is not positive-definite")
    return (eta - 1.0) * logdet


def _robust_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Cholesky with a tiny diagonal ridge for numerically singular inputs."""
    for jitter in (0.0, 1e-12, 1e-9, 1e-6):
        try:
            return np.linalg.cholesky(matrix + jitter * np.eye(matrix.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("matrix is not positive definite even with jitter")


# -- correlation Cholesky from canonical partial correlations ---------------

def _corr_chol(z_mat: np.ndarray):
    """Cholesky factor of a correlation matrix from strictly-lower CPCs.

    Row construction: each row spends its remaining squared length
    column by column, so rows have unit norm by design.  ``rem[i, c]``
    is the squared length left in row i before column c; rows of the
    factor are ``w[i, c] = z[i, c] * sqrt(rem[i, c])`` with the
    remainder on the diagonal.
    """
    d = z_mat.shape[0]
    a = 1.0 - z_mat**2  # equals 1 outside the strict lower triangle
    rem = np.cumprod(np.concatenate([np.ones((d, 1)), a[:, : d - 1]], axis=1), axis=1)
    sq = np.sqrt(rem)
    w = z_mat * sq
    diag = np.arange(d)
    w[diag, diag] = sq[diag, diag]
    return w, rem


def _corr_chol_vjp(z_mat, w, rem, gw):
    """Pull a gradient on the Cholesky factor back to the CPCs.

    Uses the closed form d w[i,c] / d z[i,b] = -w[i,c] * z[i,b] / (1 - z[i,b]^2)
    for b < c, so each row reduces to a suffix sum of w * gw.  Only the
    strictly-lower entries of the result are meaningful.
    """
    d = z_mat.shape[0]
    wgw = w * gw
    tail = np.zeros((d, d))
    tail[:, : d - 1] = np.cumsum(wgw[:, :0:-1], axis=1)[:, ::-1]
    return gw * np.sqrt(rem) - z_mat / (1.0 - z_mat**2) * tail


def _cpc_from_chol(w: np.ndarray) -> np.ndarray:
    """Invert the row construction; tail sums avoid cancellation."""
    d = w.shape[0]
    z = np.zeros((d, d))
    for i in range(1, d):
        sq = w[i, : i + 1] ** 2
        rem = np.cumsum(sq[::-1])[::-1]  # rem[c] = sum of squares from c..i
        z[i, :i] = w[i, :i] / np.sqrt(rem[:i])
    return z


# -- the model ---------------------------------------------------------------

class DoseResponseModel:
    """Joint posterior density of the hierarchical spline logistic model.

    Immutable once built; ``logp_and_grad`` is a pure function of the
    unconstrained vector, safe for concurrent evaluation from multiple
    chains.
    """

    def __init__(self, data: Dataset, bases):
        bases = list(bases)
        if len(bases) != data.n_drugs:
            raise ValueError(f"expected {data.n_drugs} bases, got {len(bases)}")
        cols = {b.n_columns for b in bases}
        if len(cols) > 1:
            raise ValueError("all drugs must share one basis dimension")
        self.data = data
        self.bases = bases
        self.n_trials = data.n_trials
        self.n_drugs = data.n_drugs
        self.n_basis_columns = bases[0].n_columns if bases else 0
        self.n_covariates = data.n_covariates

        K, L, J, P = self.n_drugs, self.n_basis_columns, self.n_trials, self.n_covariates
        self._S = K * L
        self._d = self._S + 1
        self._n_corr = self._d * (self._d - 1) // 2
        self._tril = np.tril_indices(self._d, k=-1)
        # alpha s.t. the CPC in column c has density (1-z^2)^alpha_c in tanh space
        cols_idx = self._tril[1]
        self._cpc_alpha = LKJ_ETA + (self._d - 2 - cols_idx) / 2.0
        self._cpc_const = float(np.sum(
            -(2 * self._cpc_alpha - 1) * np.log(2.0) - betaln(self._cpc_alpha, self._cpc_alpha)
        ))

        sizes = [1, self._S, self._d, self._n_corr, J * self._d, P, self._S]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._slices = {
            name: slice(int(offsets[i]), int(offsets[i + 1]))
            for i, name in enumerate(
                ["mu_alpha", "mu_phi", "log_sigma", "corr", "z", "beta", "theta"])
        }
        self.n_params = int(offsets[-1])

        # normalizing constants of every prior, folded out of the hot path
        t_const = float(gammaln((T_DF + 1) / 2) - gammaln(T_DF / 2)
                        - 0.5 * np.log(T_DF * np.pi) - np.log(T_SCALE))
        self._prior_const = (
            (2 * self._S + P) * t_const
            + self._d * float(np.log(2.0 / np.pi) - np.log(SIGMA_SCALE))
            - 0.5 * J * self._d * float(np.log(2 * np.pi))
            + self._cpc_const
        )
        self._log_sigma_scale = float(np.log(SIGMA_SCALE))

        # design matrices, subjects sorted by trial so per-trial sums are contiguous
        order = np.argsort(data.trial_index, kind="stable")
        self._y = data.outcome[order].astype(float)
        self._mod = data.moderator[order].astype(float)
        self._cov = np.ascontiguousarray(data.covariates[order])
        self._tidx = data.trial_index[order]
        if data.n_subjects and K:
            self._X = np.hstack([
                eval_matrix(bases[k], data.doses[order, k]) for k in range(K)
            ])
        else:
            self._X = np.zeros((data.n_subjects, self._S))
        if data.n_subjects:
            present, starts = np.unique(self._tidx, return_index=True)
            ends = np.append(starts[1:], data.n_subjects)
            self._spans = [(int(j), int(s), int(e))
                           for j, s, e in zip(present, starts, ends)]
        else:
            self._spans = []

    # -- packing -------------------------------------------------------------

    def block(self, u: np.ndarray, name: str) -> np.ndarray:
        return u[self._slices[name]]

    def constrain(self, u: np.ndarray) -> ParameterState:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_params,):
            raise ValueError(f"expected unconstrained vector of length {self.n_params}")
        K, L, J, P = self.n_drugs, self.n_basis_columns, self.n_trials, self.n_covariates
        z_mat = np.zeros((self._d, self._d))
        z_mat[self._tril] = np.tanh(self.block(u, "corr"))
        w, _ = _corr_chol(z_mat)
        omega = w @ w.T
        omega = (omega + omega.T) / 2.0
        np.fill_diagonal(omega, 1.0)
        return ParameterState(
            mu_alpha=float(self.block(u, "mu_alpha")[0]),
            mu_phi=self.block(u, "mu_phi").reshape(K, L).copy(),
            sigma=np.exp(self.block(u, "log_sigma")),
            omega=omega,
            z=self.block(u, "z").reshape(J, self._d).copy(),
            beta=self.block(u, "beta").copy(),
            theta=self.block(u, "theta").reshape(K, L).copy(),
        )

    def unconstrain(self, state: ParameterState) -> np.ndarray:
        u = np.empty(self.n_params)
        u[self._slices["mu_alpha"]] = state.mu_alpha
        u[self._slices["mu_phi"]] = np.ravel(state.mu_phi)
        u[self._slices["log_sigma"]] = np.log(state.sigma)
        w = _robust_cholesky(state.omega)
        z_mat = _cpc_from_chol(w)
        u[self._slices["corr"]] = np.arctanh(z_mat[self._tril])
        u[self._slices["z"]] = np.ravel(state.z)
        u[self._slices["beta"]] = np.asarray(state.beta, dtype=float)
        u[self._slices["theta"]] = np.ravel(state.theta)
        return u

    # -- density -------------------------------------------------------------

    def logp_and_grad(self, u: np.ndarray):
        """Log posterior density and its exact gradient, one shared forward pass."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_params,):
            raise ValueError(f"expected unconstrained vector of length {self.n_params}")
        if not np.all(np.isfinite(u)):
            return -np.inf, np.zeros(self.n_params)

        # wild warmup proposals can overflow; non-finite results are
        # caught below and surface as rejected states, not warnings
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._logp_and_grad_unchecked(u)

    def _logp_and_grad_unchecked(self, u):
        J, P, d, S = self.n_trials, self.n_covariates, self._d, self._S
        mu_alpha = self.block(u, "mu_alpha")[0]
        mu_phi = self.block(u, "mu_phi")
        log_sigma = self.block(u, "log_sigma")
        y_corr = self.block(u, "corr")
        z_off = self.block(u, "z").reshape(J, d)
        beta = self.block(u, "beta")
        theta = self.block(u, "theta")

        sigma = np.exp(log_sigma)
        z_cpc = np.tanh(y_corr)
        z_mat = np.zeros((d, d))
        z_mat[self._tril] = z_cpc
        w, rem_saved = _corr_chol(z_mat)

        mu = np.empty(d)
        mu[0] = mu_alpha
        mu[1:] = mu_phi
        pre = z_off @ w.T                     # (J, d) rows = chol(omega) @ z_j
        effects = mu[None, :] + sigma[None, :] * pre

        logp = 0.0
        grad = np.zeros(self.n_params)

        # likelihood, per-trial contiguous blocks
        n = self._y.shape[0]
        g_eff = np.zeros((J, d))
        if n:
            eta = np.empty(n)
            for j, s, e in self._spans:
                eta[s:e] = effects[j, 0] + self._X[s:e] @ effects[j, 1:]
            if S:
                eta += self._mod * (self._X @ theta)
            if P:
                eta += self._cov @ beta
            logp += float(np.sum(self._y * eta) - np.sum(np.logaddexp(0.0, eta)))
            resid = self._y - expit(eta)

            for j, s, e in self._spans:
                g_eff[j, 0] = resid[s:e].sum()
                g_eff[j, 1:] = resid[s:e] @ self._X[s:e]
            if S:
                grad[self._slices["theta"]] = self._X.T @ (self._mod * resid)
            if P:
                grad[self._slices["beta"]] = self._cov.T @ resid

        # priors on coefficient blocks (Student-t, normalizers pre-folded)
        nu_s2 = T_DF * T_SCALE**2
        half_exp = (T_DF + 1) / 2.0
        logp += self._prior_const
        logp -= half_exp * float(np.log1p(mu_phi * mu_phi / nu_s2).sum()
                                 + np.log1p(beta * beta / nu_s2).sum()
                                 + np.log1p(theta * theta / nu_s2).sum())
        grad[self._slices["mu_phi"]] = -2 * half_exp * mu_phi / (nu_s2 + mu_phi * mu_phi)
        grad[self._slices["beta"]] += -2 * half_exp * beta / (nu_s2 + beta * beta)
        grad[self._slices["theta"]] += -2 * half_exp * theta / (nu_s2 + theta * theta)

        # scales: half-Cauchy plus the exp-transform Jacobian, in log coordinates
        shifted = log_sigma - self._log_sigma_scale
        logp += float((log_sigma - np.logaddexp(0.0, 2.0 * shifted)).sum())
        g_log_sigma = -np.tanh(shifted)

        # standardized trial offsets
        logp -= 0.5 * float((z_off * z_off).sum())
        g_z = -z_off

        # correlation block: LKJ prior and both change-of-variable Jacobians
        # collapse to independent tanh-space densities (1 - z^2)^alpha_c
        one_minus_z2 = 1.0 - z_cpc**2
        logp += float(np.sum(self._cpc_alpha * np.log(one_minus_z2)))
        g_y_corr = -2.0 * self._cpc_alpha * z_cpc

        if not np.isfinite(logp):
            return -np.inf, np.zeros(self.n_params)

        # backpropagate the likelihood into the hierarchy
        grad[self._slices["mu_alpha"]] = g_eff[:, 0].sum()
        grad[self._slices["mu_phi"]] += g_eff[:, 1:].sum(axis=0)
        g_log_sigma += sigma * np.einsum("jm,jm->m", g_eff, pre)
        grad[self._slices["log_sigma"]] = g_log_sigma
        g_scaled = g_eff * sigma[None, :]
        g_z += g_scaled @ w
        grad[self._slices["z"]] = g_z.ravel()
        gw = g_scaled.T @ z_off  # entries above the diagonal are never read
        gz_mat = _corr_chol_vjp(z_mat, w, rem_saved, gw)
        g_y_corr += gz_mat[self._tril] * one_minus_z2
        grad[self._slices["corr"]] = g_y_corr

        if not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.n_params)
        return logp, grad

    def log_posterior(self, u: np.ndarray) -> float:
        return self.logp_and_grad(u)[0]

    def log_posterior_gradient(self, u: np.ndarray) -> np.ndarray:
        return self.logp_and_grad(u)[1]

    # -- constrained draw storage --------------------------------------------

    def constrained_names(self):
        """Column names for stored draws, including derived trial effects."""
        K, L, J, P, d = (self.n_drugs, self.n_basis_columns, self.n_trials,
                         self.n_covariates, self._d)
        names = ["mu_alpha"]
        names += [f"mu_phi[{k},{l}]" for k in range(K) for l in range(L)]
        names += ["sigma_alpha"]
        names += [f"sigma_phi[{k},{l}]" for k in range(K) for l in range(L)]
        names += [f"omega[{i},{j}]" for i, j in zip(*self._tril)]
        names += [f"z[{j},{m}]" for j in range(J) for m in range(d)]
        names += [f"beta[{p}]" for p in range(P)]
        names += [f"theta[{k},{l}]" for k in range(K) for l in range(L)]
        names += [f"alpha[{j}]" for j in range(J)]
        names += [f"phi[{j},{k},{l}]" for j in range(J) for k in range(K) for l in range(L)]
        return names

    def constrained_array(self, u: np.ndarray) -> np.ndarray:
        """Constrained parameter row for one draw (order per constrained_names)."""
        state = self.constrain(u)
        effects = state.trial_effects()
        return np.concatenate([
            [state.mu_alpha],
            state.mu_phi.ravel(),
            state.sigma,
            state.omega[self._tril],
            state.z.ravel(),
            state.beta,
            state.theta.ravel(),
            effects[:, 0],
            effects[:, 1:].ravel(),
        ])

    def draw_metadata(self) -> dict:
        """Shape information stored alongside draws for downstream summaries."""
        names = list(self.data.drug_names) if self.data.drug_names else [
            f"drug{k}" for k in range(self.n_drugs)]
        return {
            "n_trials": self.n_trials,
            "n_drugs": self.n_drugs,
            "n_basis_columns": self.n_basis_columns,
            "n_covariates": self.n_covariates,
            "drug_names": names,
            "bases": [b.to_dict() for b in self.bases],
        }


# -- spec-level convenience wrappers ----------------------------------------

def linear_predictor(state: ParameterState, subject: SubjectRecord, bases) -> float:
    """Log-odds for one subject under explicit constrained parameters."""
    effects = state.trial_effects()
    if subject.trial >= effects.shape[0]:
        raise ValueError("subject trial index outside the parameter state")
    K, L = state.mu_phi.shape
    if len(subject.doses) != K or len(bases) != K:
        raise ValueError("dose vector and bases must match the drug count")
    eta = effects[subject.trial, 0]
    phi = effects[subject.trial, 1:].reshape(K, L)
    for k in range(K):
        row = eval_row(bases[k], subject.doses[k])
        eta += row @ (phi[k] + subject.moderator * state.theta[k])
    beta = np.asarray(state.beta, dtype=float)
    if beta.size != len(subject.covariates):
        raise ValueError("covariate vector and beta must agree")
    if beta.size:
        eta += float(np.dot(subject.covariates, beta))
    return float(eta)


def log_posterior(u, data: Dataset, bases) -> float:
    return DoseResponseModel(data, bases).log_posterior(u)


def log_posterior_gradient(u, data: Dataset, bases) -> np.ndarray:
    return DoseResponseModel(data, bases).log_posterior_gradient(u)
