"""Pointwise out-of-sample model comparison via Pareto-smoothed importance sampling.

Leave-one-out predictive densities are estimated by importance-weighting
the posterior draws with per-subject ratios, stabilizing each ratio tail
with a generalized Pareto fit.  Candidate bases of increasing knot count
are compared on the information-criterion scale with a stop-at-first-
increase rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .predict import DrawBlocks, observed_predictors

__all__ = [
    "LooResult",
    "ModelComparison",
    "pointwise_loglik",
    "psis_smooth",
    "loo",
    "compare_models",
]

KHAT_WARN = 0.7
MIN_TAIL_DRAWS = 100


def pointwise_loglik(draws, data, bases) -> np.ndarray:
    """(n_draws, n_subjects) Bernoulli-logit log-likelihood matrix."""
    y = data.outcome.astype(float)
    out = np.empty((draws.n_total, data.n_subjects))
    blocks = DrawBlocks(draws)
    for sl, eta in observed_predictors(blocks, data, bases):
        out[sl] = y[None, :] * eta - np.logaddexp(0.0, eta)
    return out


def _gpd_fit(exceedances: np.ndarray):
    """Shape/scale of a generalized Pareto from sorted exceedances.

    Empirical-Bayes estimate over the profile likelihood of the
    reparameterized single-parameter family, with the usual weak prior
    pulling the shape toward 1/2.
    """
    x = exceedances
    n = len(x)
    prior_b, prior_k = 3.0, 10.0
    m_grid = 30 + int(np.sqrt(n))
    b = 1.0 - np.sqrt(m_grid / (np.arange(1, m_grid + 1) - 0.5))
    b /= prior_b * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]

    k = np.mean(np.log1p(-b[:, None] * x), axis=1)
    log_lik = n * (np.log(-b / k) - k - 1.0)
    weights = 1.0 / np.exp(log_lik - log_lik[:, None]).sum(axis=1)
    weights /= weights.sum()

    b_post = np.sum(b * weights)
    k_post = np.mean(np.log1p(-b_post * x))
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return k_post, sigma


def _gpd_quantile(probs, k, sigma):
    if abs(k) < np.finfo(float).eps:
        return sigma * (-np.log1p(-probs))
    return sigma * np.expm1(-k * np.log1p(-probs)) / k


def _smooth_log_ratios(raw_log_ratios):
    """Tail-smoothed log-ratios (shifted so the raw maximum is 0) and k-hat.

    Truncation at the raw maximum guarantees no smoothed ratio exceeds
    the largest raw ratio.
    """
    x = np.asarray(raw_log_ratios, dtype=float).copy()
    q = x.shape[0]
    if q < MIN_TAIL_DRAWS:
        raise ValueError(f"need at least {MIN_TAIL_DRAWS} draws for a tail fit, got {q}")

    x -= x.max()
    n_tail = int(min(np.ceil(0.2 * q), np.ceil(3.0 * np.sqrt(q))))
    order = np.argsort(x)
    tail_idx = order[q - n_tail:]
    cutoff = x[order[q - n_tail - 1]]
    cutoff = max(cutoff, np.log(np.finfo(float).tiny))

    khat = np.nan
    tail = x[tail_idx]
    if np.ptp(tail) > 0 and np.unique(tail).size > 4:
        exceedances = np.exp(tail) - np.exp(cutoff)
        khat, sigma = _gpd_fit(np.sort(exceedances))
        if np.isfinite(khat):
            probs = (np.arange(1, n_tail + 1) - 0.5) / n_tail
            smoothed = np.log(_gpd_quantile(probs, khat, sigma) + np.exp(cutoff))
            x[tail_idx[np.argsort(tail)]] = smoothed
            np.minimum(x, 0.0, out=x)  # never exceed the raw maximum
    return x, float(khat)


def psis_smooth(raw_log_ratios) -> tuple[np.ndarray, float]:
    """Smooth one vector of importance log-ratios; return weights and k-hat.

    The largest ``min(ceil(0.2 Q), ceil(3 sqrt(Q)))`` ratios form the
    tail; they are replaced by generalized-Pareto quantiles at the
    plotting positions (i - 1/2)/M, truncated at the raw maximum, and
    the whole vector is self-normalized.  A degenerate tail (all values
    equal) leaves the weights unsmoothed with k-hat reported as NaN.
    """
    x, khat = _smooth_log_ratios(raw_log_ratios)
    weights = np.exp(x - logsumexp(x))
    weights /= weights.sum()
    return weights, khat


@dataclass
class LooResult:
    """Leave-one-out estimate for one fitted candidate."""

    elpd_loo: float
    loo_ic: float
    se_loo_ic: float
    elpd_i: np.ndarray
    pareto_k: np.ndarray
    n_high_k: int
    n_draws: int
    label: str = ""

    @property
    def n_points(self) -> int:
        return len(self.elpd_i)

    @property
    def se_elpd(self) -> float:
        return self.se_loo_ic / 2.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "elpd_loo": self.elpd_loo,
            "loo_ic": self.loo_ic,
            "se_loo_ic": self.se_loo_ic,
            "n_draws": self.n_draws,
            "n_high_pareto_k": self.n_high_k,
            "pareto_k": [None if np.isnan(k) else float(k) for k in self.pareto_k],
            "elpd_pointwise": [float(v) for v in self.elpd_i],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LooResult":
        elpd_i = np.array(d["elpd_pointwise"], dtype=float)
        k = np.array([np.nan if v is None else v for v in d["pareto_k"]], dtype=float)
        return cls(elpd_loo=d["elpd_loo"], loo_ic=d["loo_ic"], se_loo_ic=d["se_loo_ic"],
                   elpd_i=elpd_i, pareto_k=k, n_high_k=d["n_high_pareto_k"],
                   n_draws=d["n_draws"], label=d.get("label", ""))


def loo_from_matrix(loglik: np.ndarray, label: str = "") -> LooResult:
    """PSIS-LOO from a (n_draws, n_subjects) pointwise log-likelihood matrix."""
    n_draws, n = loglik.shape
    elpd_i = np.empty(n)
    khat = np.empty(n)
    for i in range(n):
        col = loglik[:, i]
        weights, k = psis_smooth(-col)
        khat[i] = k
        with np.errstate(divide="ignore"):
            elpd_i[i] = logsumexp(col + np.log(weights))
    elpd = float(elpd_i.sum())
    se_elpd = float(np.sqrt(n * np.var(elpd_i, ddof=1)))
    return LooResult(
        elpd_loo=elpd,
        loo_ic=-2.0 * elpd,
        se_loo_ic=2.0 * se_elpd,
        elpd_i=elpd_i,
        pareto_k=khat,
        n_high_k=int(np.sum(khat > KHAT_WARN)),
        n_draws=n_draws,
        label=label,
    )


def loo(draws, data, bases, label: str = "") -> LooResult:
    return loo_from_matrix(pointwise_loglik(draws, data, bases), label=label)


def lppd(loglik: np.ndarray) -> float:
    """In-sample log pointwise predictive density (upper bound for elpd_loo)."""
    n_draws = loglik.shape[0]
    return float(np.sum(logsumexp(loglik, axis=0) - np.log(n_draws)))


@dataclass
class ModelComparison:
    """LOO-IC ranking of candidates plus the knot-count stopping decision."""

    labels: list
    loo_ic: np.ndarray
    se_loo_ic: np.ndarray
    elpd_diff_vs_best: np.ndarray   # in candidate order
    se_diff_vs_best: np.ndarray
    ranking: list                   # candidate indices, best first
    selected: int                   # index per the stopping rule
    increase_observed: bool
    pairwise: dict = field(default_factory=dict)

    def to_rows(self):
        """Table rows in ranked order for CSV emission."""
        rows = []
        for idx in self.ranking:
            rows.append({
                "label": self.labels[idx],
                "loo_ic": self.loo_ic[idx],
                "se_loo_ic": self.se_loo_ic[idx],
                "elpd_diff_vs_best": self.elpd_diff_vs_best[idx],
                "se_elpd_diff": self.se_diff_vs_best[idx],
                "selected": idx == self.selected,
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "ranking": [self.labels[i] for i in self.ranking],
            "selected": self.labels[self.selected],
            "increase_observed": self.increase_observed,
            "rows": self.to_rows(),
        }


def compare_models(results, labels=None) -> ModelComparison:
    """Rank candidates by LOO-IC and apply the stop-before-first-increase rule.

    ``results`` must be ordered by increasing model complexity (knot
    count); the rule selects the candidate immediately before the first
    LOO-IC increase, or the last candidate (flagged) if the sequence
    never increases.
    """
    results = list(results)
    if len(results) < 2:
        raise ValueError("model comparison needs at least 2 candidates")
    n_points = {r.n_points for r in results}
    if len(n_points) != 1:
        raise ValueError("candidates were evaluated on different numbers of subjects")
    if labels is None:
        labels = [r.label or str(i) for i, r in enumerate(results)]

    loo_ic = np.array([r.loo_ic for r in results])
    se = np.array([r.se_loo_ic for r in results])
    best = int(np.argmin(loo_ic))
    diffs = np.empty(len(results))
    se_diffs = np.empty(len(results))
    pairwise = {}
    for i, ri in enumerate(results):
        delta = results[best].elpd_i - ri.elpd_i
        diffs[i] = float(delta.sum())
        se_diffs[i] = float(np.sqrt(len(delta) * np.var(delta, ddof=1)))
        for j in range(i + 1, len(results)):
            d = ri.elpd_i - results[j].elpd_i
            pairwise[(labels[i], labels[j])] = (
                float(d.sum()), float(np.sqrt(len(d) * np.var(d, ddof=1))))

    selected = len(results) - 1
    increase_observed = False
    for i in range(1, len(results)):
        if loo_ic[i] > loo_ic[i - 1]:
            selected = i - 1
            increase_observed = True
            break

    ranking = list(np.argsort(loo_ic, kind="stable"))
    return ModelComparison(
        labels=list(labels), loo_ic=loo_ic, se_loo_ic=se,
        elpd_diff_vs_best=diffs, se_diff_vs_best=se_diffs,
        ranking=[int(i) for i in ranking], selected=selected,
        increase_observed=increase_observed, pairwise=pairwise)
