"""Hamiltonian Monte Carlo with dynamic trajectory lengths.

Multinomial trajectory sampling with a no-U-turn termination rule,
dual-averaging step-size adaptation, and windowed diagonal mass-matrix
estimation during warmup.  Chains use independent sub-streams spawned
from one seed, so results are reproducible and do not depend on the
order chains are executed in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["SamplerConfig", "PosteriorDraws", "sample"]

ENERGY_ERROR_THRESHOLD = 1000.0  # energy error above this marks a divergence

# dual-averaging constants
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75


@dataclass(frozen=True)
class SamplerConfig:
    """Run configuration for :func:`sample`.

    ``max_tree_depth`` bounds the depth of the largest subtree built per
    draw; depth 0 degenerates to single-leapfrog HMC.
    """

    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    target_accept: float = 0.9
    max_tree_depth: int = 10
    seed: int = 0
    init_radius: float = 2.0

    def __post_init__(self):
        if self.n_chains < 1 or self.n_draws < 1 or self.n_warmup < 0:
            raise ValueError("chain and draw counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 0:
            raise ValueError("max_tree_depth must be >= 0")

    def to_dict(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "n_warmup": self.n_warmup,
            "n_draws": self.n_draws,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "seed": self.seed,
            "init_radius": self.init_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class PosteriorDraws:
    """Post-warmup draws in constrained space plus per-draw sampler stats."""

    params: np.ndarray          # (n_chains, n_draws, n_columns)
    names: list
    log_posterior: np.ndarray   # (n_chains, n_draws)
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    divergent: np.ndarray
    config: SamplerConfig = None
    adaptation: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.params.shape[0]

    @property
    def n_draws(self) -> int:
        return self.params.shape[1]

    @property
    def n_total(self) -> int:
        return self.params.shape[0] * self.params.shape[1]

    def stacked(self) -> np.ndarray:
        """All chains concatenated, shape (n_total, n_columns)."""
        return self.params.reshape(-1, self.params.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.stacked()[:, self.names.index(name)]

    def array(self, names) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.stacked()[:, idx]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    def to_csv(self, path):
        """One row per draw: chain, draw, sampler stats, then parameters."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "draw", "lp__", "accept_stat__",
                             "tree_depth__", "divergent__"] + list(self.names))
            for c in range(self.n_chains):
                for q in range(self.n_draws):
                    writer.writerow(
                        [c, q, repr(float(self.log_posterior[c, q])),
                         repr(float(self.accept_stat[c, q])),
                         int(self.tree_depth[c, q]), int(self.divergent[c, q])]
                        + [repr(float(v)) for v in self.params[c, q]])

    @classmethod
    def from_csv(cls, path, config=None, adaptation=None, meta=None) -> "PosteriorDraws":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            names = header[6:]
            rows = list(reader)
        chains = np.array([int(r[0]) for r in rows])
        n_chains = chains.max() + 1 if len(rows) else 0
        n_draws = len(rows) // max(n_chains, 1)
        params = np.empty((n_chains, n_draws, len(names)))
        lp = np.empty((n_chains, n_draws))
        acc = np.empty((n_chains, n_draws))
        depth = np.empty((n_chains, n_draws), dtype=int)
        div = np.empty((n_chains, n_draws), dtype=bool)
        for r in rows:
            c, q = int(r[0]), int(r[1])
            lp[c, q] = float(r[2])
            acc[c, q] = float(r[3])
            depth[c, q] = int(r[4])
            div[c, q] = bool(int(r[5]))
            params[c, q] = [float(v) for v in r[6:]]
        return cls(params=params, names=names, log_posterior=lp, accept_stat=acc,
                   tree_depth=depth, divergent=div, config=config,
                   adaptation=adaptation or {}, meta=meta or {})


# -- target adapter ----------------------------------------------------------

class _Target:
    """Uniform view of a model: density+gradient and constrained storage."""

    def __init__(self, model):
        self.n_params = model.n_params
        if hasattr(model, "logp_and_grad"):
            self.logp_and_grad = model.logp_and_grad
        else:
            def logp_and_grad(u):
                return model.log_posterior(u), model.log_posterior_gradient(u)
            self.logp_and_grad = logp_and_grad
        if hasattr(model, "constrained_array"):
            self.constrained_array = model.constrained_array
        else:
            self.constrained_array = lambda u: np.asarray(u, dtype=float).copy()
        if hasattr(model, "constrained_names"):
            self.names = list(model.constrained_names())
        else:
            self.names = [f"p[{i}]" for i in range(self.n_params)]
        self.meta = model.draw_metadata() if hasattr(model, "draw_metadata") else {}


def _check_gradient(target, u, rng, n_coords=5, h=1e-6, rtol=1e-4):
    """Spot-check the analytic gradient against central differences.

    The tolerance includes the cancellation noise floor of the central
    difference itself, so large-magnitude densities do not trip it.
    """
    lp, grad = target.logp_and_grad(u)
    coords = rng.choice(target.n_params, size=min(n_coords, target.n_params), replace=False)
    for i in coords:
        up = u.copy(); up[i] += h
        um = u.copy(); um[i] -= h
        lp_plus = target.logp_and_grad(up)[0]
        lp_minus = target.logp_and_grad(um)[0]
        if not (np.isfinite(lp_plus) and np.isfinite(lp_minus)):
            continue
        fd = (lp_plus - lp_minus) / (2 * h)
        noise = 10 * np.finfo(float).eps * max(abs(lp_plus), abs(lp_minus), 1.0) / h
        if abs(grad[i] - fd) > rtol * max(1.0, abs(fd)) + noise:
            raise ValueError(
                f"model gradient fails finite-difference check at coordinate {i}: "
                f"analytic {grad[i]:.6g}, numeric {fd:.6g}")


# -- leapfrog and trees -------------------------------------------------------

class _Tree:
    """End points, momentum sum, and proposal of one trajectory segment."""

    __slots__ = ("theta_minus", "r_minus", "grad_minus", "theta_plus", "r_plus",
                 "grad_plus", "r_sum", "theta", "logp", "grad", "log_weight",
                 "alpha_sum", "n_alpha", "stop", "divergent")

    def __init__(self, theta, r, logp, grad, log_weight, alpha, divergent):
        # vectors are shared, never mutated in place
        self.theta_minus = theta
        self.r_minus = r
        self.grad_minus = grad
        self.theta_plus = theta
        self.r_plus = r
        self.grad_plus = grad
        self.r_sum = r
        self.theta = theta
        self.logp = logp
        self.grad = grad
        self.log_weight = log_weight
        self.alpha_sum = alpha
        self.n_alpha = 1
        self.stop = divergent
        self.divergent = divergent


def _kinetic(r, inv_mass):
    return 0.5 * float(np.dot(r, inv_mass * r))


def _leapfrog(target, theta, r, grad, eps, inv_mass):
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * inv_mass * r_half
    logp_new, grad_new = target.logp_and_grad(theta_new)
    r_new = r_half + 0.5 * eps * grad_new
    return theta_new, r_new, logp_new, grad_new


def _leaf(target, theta, r, grad, eps, inv_mass, h0):
    theta_n, r_n, logp_n, grad_n = _leapfrog(target, theta, r, grad, eps, inv_mass)
    if np.isfinite(logp_n):
        h_new = logp_n - _kinetic(r_n, inv_mass)
        energy_error = h_new - h0
    else:
        energy_error = -np.inf
    divergent = bool(energy_error < -ENERGY_ERROR_THRESHOLD) or not np.isfinite(energy_error)
    log_weight = energy_error if np.isfinite(energy_error) else -np.inf
    alpha = min(1.0, math.exp(min(0.0, energy_error)))
    return _Tree(theta_n, r_n, logp_n if np.isfinite(logp_n) else -np.inf,
                 grad_n, log_weight, alpha, divergent)


def _criterion_holds(rho, sharp_back, sharp_front):
    return np.dot(rho, sharp_back) > 0 and np.dot(rho, sharp_front) > 0


def _merge(tree, other, direction, rng, inv_mass, biased):
    """Absorb ``other`` (a fresh segment built in ``direction``) into ``tree``.

    ``biased=True`` is the outer-loop merge, which favors the fresh
    subtree; inner merges use plain multinomial weights.  Termination
    applies the no-U-turn test to the merged trajectory and to the two
    segments overlapping the join.
    """
    tree.alpha_sum += other.alpha_sum
    tree.n_alpha += other.n_alpha
    tree.divergent |= other.divergent
    if other.stop:
        # invalid segment: discard its proposal entirely, keep the stats
        tree.stop = True
        return

    if direction == 1:
        rho_back, rho_front = tree.r_sum, other.r_sum
        p_back_end = tree.r_minus      # outermost backward momentum
        p_front_end = other.r_plus     # outermost forward momentum
        p_front_inner = other.r_minus  # forward subtree boundary at the join
        p_back_inner = tree.r_plus     # backward subtree boundary at the join
        tree.theta_plus = other.theta_plus
        tree.r_plus = other.r_plus
        tree.grad_plus = other.grad_plus
    else:
        rho_back, rho_front = other.r_sum, tree.r_sum
        p_back_end = other.r_minus
        p_front_end = tree.r_plus
        p_front_inner = tree.r_minus
        p_back_inner = other.r_plus
        tree.theta_minus = other.theta_minus
        tree.r_minus = other.r_minus
        tree.grad_minus = other.grad_minus

    if biased:
        # outer-loop merge favors the fresh subtree
        accept_logp = min(0.0, other.log_weight - tree.log_weight)
    else:
        accept_logp = other.log_weight - np.logaddexp(tree.log_weight, other.log_weight)
    if rng.uniform() < math.exp(min(0.0, accept_logp)):
        tree.theta = other.theta
        tree.logp = other.logp
        tree.grad = other.grad

    tree.log_weight = np.logaddexp(tree.log_weight, other.log_weight)
    tree.r_sum = tree.r_sum + other.r_sum

    ok = _criterion_holds(tree.r_sum, inv_mass * p_back_end, inv_mass * p_front_end)
    ok = ok and _criterion_holds(rho_back + p_front_inner,
                                 inv_mass * p_back_end, inv_mass * p_front_inner)
    ok = ok and _criterion_holds(rho_front + p_back_inner,
                                 inv_mass * p_back_inner, inv_mass * p_front_end)
    if not ok:
        tree.stop = True


def _build_tree(target, tree_from, direction, depth, eps, inv_mass, h0, rng):
    """Subtree of 2**depth leapfrog steps extending one end of the trajectory."""
    if direction == -1:
        theta, r, grad = tree_from.theta_minus, tree_from.r_minus, tree_from.grad_minus
    else:
        theta, r, grad = tree_from.theta_plus, tree_from.r_plus, tree_from.grad_plus

    if depth == 0:
        return _leaf(target, theta, r, grad, direction * eps, inv_mass, h0)

    first = _build_tree(target, tree_from, direction, depth - 1, eps, inv_mass, h0, rng)
    if first.stop:
        return first
    second = _build_tree(target, first, direction, depth - 1, eps, inv_mass, h0, rng)
    _merge(first, second, direction, rng, inv_mass, biased=False)
    return first


def _transition(target, theta, logp, grad, eps, inv_mass, max_tree_depth, rng):
    """One dynamic-trajectory update; returns the new point and draw stats."""
    r0 = rng.standard_normal(theta.shape[0]) / np.sqrt(inv_mass)
    h0 = logp - _kinetic(r0, inv_mass)
    tree = _Tree(theta, r0, logp, grad, log_weight=0.0, alpha=1.0, divergent=False)
    tree.n_alpha = 0
    tree.alpha_sum = 0.0

    depth = 0
    while True:
        direction = 1 if rng.uniform() < 0.5 else -1
        segment = _build_tree(target, tree, direction, depth, eps, inv_mass, h0, rng)
        _merge(tree, segment, direction, rng, inv_mass, biased=True)
        depth += 1
        if tree.stop or depth > max_tree_depth:
            break

    accept_stat = tree.alpha_sum / max(tree.n_alpha, 1)
    return tree.theta, tree.logp, tree.grad, accept_stat, depth, tree.divergent


def _find_reasonable_epsilon(target, theta, logp, grad, inv_mass, rng):
    """Double or halve the step until one-step acceptance crosses 1/2."""
    eps = 1.0
    r = rng.standard_normal(theta.shape[0]) / np.sqrt(inv_mass)
    h0 = logp - _kinetic(r, inv_mass)

    def energy_delta(e):
        _, r_new, logp_new, _ = _leapfrog(target, theta, r, grad, e, inv_mass)
        if not np.isfinite(logp_new):
            return -np.inf
        return (logp_new - _kinetic(r_new, inv_mass)) - h0

    direction = 1 if energy_delta(eps) > math.log(0.5) else -1
    for _ in range(100):
        eps_next = eps * 2.0**direction
        delta = energy_delta(eps_next)
        crossed = delta <= math.log(0.5) if direction == 1 else delta > math.log(0.5)
        if crossed and direction == -1:
            return eps_next
        if crossed:
            return eps
        eps = eps_next
        if not 1e-10 < eps < 1e7:
            break
    return eps


class _DualAveraging:
    """Step-size adaptation toward a target acceptance statistic."""

    def __init__(self, eps0, target_accept):
        self.mu = math.log(10.0 * eps0)
        self.target = target_accept
        self.log_eps = math.log(eps0)
        self.log_eps_avg = 0.0
        self.h_sum = 0.0
        self.count = 0

    def step(self, accept_stat):
        self.count += 1
        frac = 1.0 / (self.count + DA_T0)
        self.h_sum = (1 - frac) * self.h_sum + frac * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.count) / DA_GAMMA * self.h_sum
        weight = self.count ** (-DA_KAPPA)
        self.log_eps_avg = weight * self.log_eps + (1 - weight) * self.log_eps_avg
        return math.exp(self.log_eps)

    def adapted(self):
        return math.exp(self.log_eps_avg)


class _Welford:
    """Streaming mean/variance for mass-matrix estimation."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self):
        if self.count < 2:
            return None
        var = self.m2 / (self.count - 1)
        # shrink toward a small constant like a weakly informative prior
        w = self.count / (self.count + 5.0)
        return w * var + (1 - w) * 1e-3


def _warmup_windows(n_warmup):
    """(init_end, slow_window_ends, term_start) in iteration indices."""
    if n_warmup == 0:
        return 0, [], 0
    if n_warmup < 20:
        return n_warmup, [], n_warmup
    init = int(0.15 * n_warmup) if n_warmup < 150 else 75
    term = int(0.10 * n_warmup) if n_warmup < 150 else 50
    init = max(init, 1)
    term = max(term, 1)
    slow_start = init
    slow_end = n_warmup - term
    ends = []
    size = 25 if n_warmup >= 150 else max(slow_end - slow_start, 1)
    pos = slow_start
    while pos < slow_end:
        next_end = pos + size
        # final window absorbs the remainder if doubling would overshoot
        if next_end + 2 * size > slow_end:
            next_end = slow_end
        ends.append(next_end)
        pos = next_end
        size *= 2
    return init, ends, slow_end


def _init_point(target, config, rng):
    for _ in range(100):
        u = rng.uniform(-config.init_radius, config.init_radius, target.n_params)
        logp, grad = target.logp_and_grad(u)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return u, logp, grad
    raise RuntimeError(
        "could not find a finite initial density in 100 attempts; "
        "check the model and data for degeneracy")


def _run_chain(target, config: SamplerConfig, seed_seq):
    """One chain: warmup with adaptation, then fixed-parameter sampling."""
    rng = np.random.default_rng(seed_seq)
    theta, logp, grad = _init_point(target, config, rng)
    _check_gradient(target, theta, rng)

    dim = target.n_params
    inv_mass = np.ones(dim)
    eps = _find_reasonable_epsilon(target, theta, logp, grad, inv_mass, rng)
    averaging = _DualAveraging(eps, config.target_accept)
    init_end, slow_ends, term_start = _warmup_windows(config.n_warmup)
    welford = _Welford(dim)

    for i in range(config.n_warmup):
        theta, logp, grad, accept, _, _ = _transition(
            target, theta, logp, grad, eps, inv_mass, config.max_tree_depth, rng)
        eps = averaging.step(accept)
        if init_end <= i < term_start:
            welford.add(theta)
        if (i + 1) in slow_ends:
            var = welford.variance()
            if var is not None:
                inv_mass = var
            welford = _Welford(dim)
            eps = _find_reasonable_epsilon(target, theta, logp, grad, inv_mass, rng)
            averaging = _DualAveraging(eps, config.target_accept)

    if config.n_warmup:
        eps = averaging.adapted()

    n_cols = len(target.names)
    params = np.empty((config.n_draws, n_cols))
    lp = np.empty(config.n_draws)
    acc = np.empty(config.n_draws)
    depth = np.empty(config.n_draws, dtype=int)
    div = np.empty(config.n_draws, dtype=bool)
    for q in range(config.n_draws):
        theta, logp, grad, accept, tree_depth, divergent = _transition(
            target, theta, logp, grad, eps, inv_mass, config.max_tree_depth, rng)
        params[q] = target.constrained_array(theta)
        lp[q] = logp
        acc[q] = accept
        depth[q] = tree_depth
        div[q] = divergent
    return params, lp, acc, depth, div, eps, inv_mass


def sample(model, config: SamplerConfig) -> PosteriorDraws:
    """Draw posterior samples from any model exposing a density and gradient.

    The model must provide ``n_params`` and either ``logp_and_grad(u)`` or
    the pair ``log_posterior(u)`` / ``log_posterior_gradient(u)``.  Models
    with a constrained parameterization additionally expose
    ``constrained_array`` / ``constrained_names``; without them draws are
    stored in the sampled coordinates directly.
    """
    target = _Target(model)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    results = [_run_chain(target, config, s) for s in seeds]

    params = np.stack([r[0] for r in results])
    return PosteriorDraws(
        params=params,
        names=list(target.names),
        log_posterior=np.stack([r[1] for r in results]),
        accept_stat=np.stack([r[2] for r in results]),
        tree_depth=np.stack([r[3] for r in results]),
        divergent=np.stack([r[4] for r in results]),
        config=config,
        adaptation={
            "step_size": [float(r[5]) for r in results],
            "inverse_mass": [r[6].tolist() for r in results],
        },
        meta=dict(target.meta),
    )
