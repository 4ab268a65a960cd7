"""Convergence diagnostics and posterior predictive checks.

R-hat and effective sample size use the rank-normalized split-chain
variants; the flagging threshold stays at 1.1.  Predictive checks
replicate outcomes from each stored draw, conditioning on the fitted
trial effects, and compare assigned-group outcome proportions and the
extreme per-trial proportions against their replicated distributions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import rankdata

from .predict import DrawBlocks, assignment_groups, observed_predictors

__all__ = ["ConvergenceReport", "PpcReport", "split_rhat", "posterior_predictive_check"]

RHAT_THRESHOLD = 1.1


# -- R-hat / ESS --------------------------------------------------------------

def _split_chains(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    half = n // 2
    return np.vstack([x[:, :half], x[:, n - half:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    ranks = rankdata(x, method="average").reshape(x.shape)
    return ndtri((ranks - 3.0 / 8) / (x.size + 1.0 / 4))


def _rhat_base(x: np.ndarray) -> float:
    m, n = x.shape
    within = x.var(axis=1, ddof=1).mean()
    between = x.mean(axis=1).var(ddof=1)  # already on the per-draw scale
    if within == 0:
        return np.nan
    var_plus = (n - 1) / n * within + between
    return float(np.sqrt(var_plus / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Per-chain autocovariance at all lags via FFT, biased normalization."""
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    freq = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(freq * np.conj(freq), size, axis=1)[:, :n].real
    return acov / n


def _ess_base(x: np.ndarray) -> float:
    """Effective sample size of split chains with Geyer's monotone sequence."""
    m, n = x.shape
    if n < 4 or np.all(x == x.flat[0]):
        return np.nan
    acov = _autocovariance(x)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus == 0:
        return np.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and (rho_even + rho_odd) > 0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even

    # enforce a monotone decreasing pair sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2
            rho[t + 2] = rho[t + 1]
        t += 2

    total = m * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1]
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def _rhat_scalar(chains: np.ndarray) -> float:
    if np.all(chains == chains.flat[0]):
        return np.nan
    split = _split_chains(chains)
    bulk = _rhat_base(_rank_normalize(split))
    folded = np.abs(chains - np.median(chains))
    tail = _rhat_base(_rank_normalize(_split_chains(folded)))
    return max(bulk, tail)


def _ess_bulk_scalar(chains: np.ndarray) -> float:
    return _ess_base(_rank_normalize(_split_chains(chains)))


def _ess_tail_scalar(chains: np.ndarray) -> float:
    out = []
    for prob in (0.05, 0.95):
        q = np.quantile(chains, prob)
        out.append(_ess_base(_split_chains((chains <= q).astype(float))))
    return float(min(out))


@dataclass
class ConvergenceReport:
    """Per-parameter split R-hat and effective sample sizes."""

    parameters: list
    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    n_divergent: int
    n_max_depth: int
    n_total_draws: int
    flagged: list = field(default_factory=list)
    undefined: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return not self.flagged

    def max_rhat(self):
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if finite.size else np.nan

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "max_rhat": self.max_rhat(),
            "n_divergent": self.n_divergent,
            "n_max_depth": self.n_max_depth,
            "n_total_draws": self.n_total_draws,
            "flagged": list(self.flagged),
            "undefined": list(self.undefined),
            "parameters": {
                name: {
                    "rhat": None if np.isnan(self.rhat[i]) else float(self.rhat[i]),
                    "ess_bulk": None if np.isnan(self.ess_bulk[i]) else float(self.ess_bulk[i]),
                    "ess_tail": None if np.isnan(self.ess_tail[i]) else float(self.ess_tail[i]),
                }
                for i, name in enumerate(self.parameters)
            },
        }


def split_rhat(draws) -> ConvergenceReport:
    """Rank-normalized split R-hat and bulk/tail ESS for every stored column.

    Parameters with constant chains have undefined R-hat; they are
    reported in ``undefined`` rather than propagated as NaN failures.
    ESS estimates are capped at the total draw count.
    """
    if draws.n_chains < 2:
        raise ValueError("split R-hat needs at least 2 chains")
    if draws.n_draws < 4:
        raise ValueError("split R-hat needs at least 4 draws per chain")

    names = list(draws.names)
    total = draws.n_total
    rhat = np.empty(len(names))
    ess_bulk = np.empty(len(names))
    ess_tail = np.empty(len(names))
    flagged, undefined = [], []
    for i, name in enumerate(names):
        chains = draws.params[:, :, i]
        rhat[i] = _rhat_scalar(chains)
        if np.isnan(rhat[i]):
            undefined.append(name)
            ess_bulk[i] = np.nan
            ess_tail[i] = np.nan
            continue
        ess_bulk[i] = min(_ess_bulk_scalar(chains), total)
        ess_tail[i] = min(_ess_tail_scalar(chains), total)
        if rhat[i] >= RHAT_THRESHOLD:
            flagged.append(name)

    max_depth_hits = 0
    if draws.config is not None:
        max_depth_hits = int((draws.tree_depth > draws.config.max_tree_depth).sum())
    return ConvergenceReport(
        parameters=names, rhat=rhat, ess_bulk=ess_bulk, ess_tail=ess_tail,
        n_divergent=int(draws.divergent.sum()), n_max_depth=max_depth_hits,
        n_total_draws=total, flagged=flagged, undefined=undefined)


# -- posterior predictive checks ----------------------------------------------

@dataclass
class PpcStatistic:
    name: str
    observed: float
    rep_mean: float
    rep_lo: float
    rep_hi: float
    p_value: float
    extreme: bool
    replicates: np.ndarray = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "observed": self.observed,
            "replicated_mean": self.rep_mean,
            "replicated_2.5%": self.rep_lo,
            "replicated_97.5%": self.rep_hi,
            "p_value": self.p_value,
            "extreme": self.extreme,
        }


@dataclass
class PpcReport:
    statistics: list
    n_replications: int
    seed: int

    def statistic(self, name: str) -> PpcStatistic:
        for s in self.statistics:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def p_values(self) -> dict:
        return {s.name: s.p_value for s in self.statistics}

    def to_dict(self) -> dict:
        return {
            "n_replications": self.n_replications,
            "seed": self.seed,
            "statistics": [s.to_dict() for s in self.statistics],
        }


def default_statistics(data):
    """The stock test statistics: per-group proportions and cross-trial extremes."""
    labels, groups = assignment_groups(data)
    trial_rows = [np.nonzero(data.trial_index == j)[0] for j in range(data.n_trials)]
    trial_rows = [rows for rows in trial_rows if rows.size]

    stats = []
    for label, rows in zip(labels, groups):
        if rows.size:
            stats.append((f"proportion[{label}]",
                          lambda y, rows=rows: float(y[rows].mean())))
    stats.append(("max_trial_proportion",
                  lambda y: float(max(y[rows].mean() for rows in trial_rows))))
    stats.append(("min_trial_proportion",
                  lambda y: float(min(y[rows].mean() for rows in trial_rows))))
    return stats


def posterior_predictive_check(draws, data, bases, seed: int = 0,
                               statistics=None, keep_replicates: bool = True) -> PpcReport:
    """Simulate replicated outcomes from every draw and compare test statistics.

    Replication conditions on each draw's fitted trial effects (within-
    sample replication).  The p-value is the mid-p tail probability
    ``P(rep > obs) + P(rep = obs)/2``; values of exactly 0 or 1 mean the
    observed statistic fell outside the replicated range and trigger a
    warning.
    """
    if draws.n_total == 0:
        raise ValueError("no posterior draws")
    if data.n_subjects == 0:
        raise ValueError("empty dataset")
    stats = statistics if statistics is not None else default_statistics(data)
    blocks = DrawBlocks(draws)
    rng = np.random.default_rng(seed)

    observed = np.array([fn(data.outcome.astype(float)) for _, fn in stats])
    reps = np.empty((draws.n_total, len(stats)))
    for sl, eta in observed_predictors(blocks, data, bases):
        y_rep = (rng.random(eta.shape) < expit(eta)).astype(float)
        for b in range(eta.shape[0]):
            for s, (_, fn) in enumerate(stats):
                reps[sl.start + b, s] = fn(y_rep[b])

    out = []
    for s, (name, _) in enumerate(stats):
        col = reps[:, s]
        greater = float((col > observed[s]).mean())
        equal = float((col == observed[s]).mean())
        p = greater + 0.5 * equal
        extreme = p in (0.0, 1.0)
        if extreme:
            warnings.warn(
                f"observed statistic {name} lies outside its replicated range "
                f"(p-value {p:.0f})", stacklevel=2)
        out.append(PpcStatistic(
            name=name, observed=float(observed[s]), rep_mean=float(col.mean()),
            rep_lo=float(np.quantile(col, 0.025)), rep_hi=float(np.quantile(col, 0.975)),
            p_value=p, extreme=extreme,
            replicates=col.copy() if keep_replicates else None))
    return PpcReport(statistics=out, n_replications=draws.n_total, seed=seed)
