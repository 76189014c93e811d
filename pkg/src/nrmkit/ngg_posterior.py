"""Exact and conditional NGG posterior quantities.

Marginal partition probabilities, predictive weights, the latent-relative-mass
posterior, the reduced sampling posteriors, the posterior-measure
decomposition, and the sequential (generalized Blackwell-MacQueen) sampler
behind the power-law experiment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from . import levy_core as lc
from .levy_core import BaseMeasure, NggParams, NrmRealization
from .special_math import generalized_stirling, rising_factorial_log
from .tak import TakTable, log_T

__all__ = [
    "PartitionStats",
    "marginal_log_likelihood",
    "predictive_weights",
    "conditional_predictive_weights",
    "conditional_partition_log_probability",
    "un_posterior_logdensity",
    "un_next_logdensity",
    "sample_un",
    "sequential_sample",
    "posterior_measure_sample",
    "reduced_posterior_logjoint",
    "pdp_partition_log_probability",
    "iter_partition_shapes",
]


@dataclass(frozen=True)
class PartitionStats:
    """Cluster sizes n_1..n_K of N observations; N = sum(counts)."""

    counts: tuple

    def __init__(self, counts):
        counts = tuple(int(c) for c in counts)
        if not counts or any(c < 1 for c in counts):
            raise ValueError(f"counts must be positive integers, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return sum(self.counts)

    @property
    def k(self) -> int:
        return len(self.counts)


def _log_poch(x: float, m: int) -> float:
    return rising_factorial_log(x, m).log_magnitude if m > 0 else 0.0


def marginal_log_likelihood(stats: PartitionStats, params: NggParams,
                            log_base_densities=None, table: TakTable | None = None) -> float:
    """log of e^M a^{K-1} T^{N,K}_{a,M} / Gamma(N) * prod (1-a)_{n_k-1} h(X*_k)."""
    a, mass = params.a, params.mass
    n, k = stats.n, stats.k
    out = mass + (k - 1) * math.log(a) + log_T(n, k, params, table) - sp.gammaln(n)
    for c in stats.counts:
        out += _log_poch(1.0 - a, c - 1)
    if log_base_densities is not None:
        if len(log_base_densities) != k:
            raise ValueError("need one base density per distinct value")
        out += float(np.sum(log_base_densities))
    return out


def predictive_weights(stats: PartitionStats, params: NggParams,
                       table: TakTable | None = None) -> np.ndarray:
    """(omega_0, omega_1..omega_K): new-cluster weight then per-cluster weights.

    omega_0 ~ a T^{N+1,K+1}/T^{N+1,K}, omega_k ~ n_k - a, normalized to sum 1.
    """
    a = params.a
    n, k = stats.n, stats.k
    w0 = a * math.exp(log_T(n + 1, k + 1, params, table) - log_T(n + 1, k, params, table))
    w = np.concatenate([[w0], np.asarray(stats.counts, dtype=float) - a])
    return w / w.sum()


def conditional_predictive_weights(stats: PartitionStats, params: NggParams, u: float) -> np.ndarray:
    """Predictive weights given the latent relative mass: omega_0 ~ M a (1+u)^a."""
    if u < 0:
        raise ValueError("latent relative mass must be positive")
    w0 = params.mass * params.a * (1.0 + u) ** params.a
    w = np.concatenate([[w0], np.asarray(stats.counts, dtype=float) - params.a])
    return w / w.sum()


def conditional_partition_log_probability(stats: PartitionStats, params: NggParams,
                                          u: float, log_base_densities=None) -> float:
    """log of the conditional posterior marginal given U_N = u.

    (M a (1+u)^a)^K prod (1-a)_{n_k-1} over the normalizer
    sum_k S^N_{k,a} (M a (1+u)^a)^k.
    """
    a = params.a
    n, k = stats.n, stats.k
    log_c = math.log(params.mass * a) + a * math.log1p(u)
    log_terms = np.array([generalized_stirling(n, j, a).log_magnitude + j * log_c
                          for j in range(1, n + 1)])
    out = k * log_c - sp.logsumexp(log_terms)
    for c in stats.counts:
        out += _log_poch(1.0 - a, c - 1)
    if log_base_densities is not None:
        out += float(np.sum(log_base_densities))
    return out


def _un_log_kernel(u, n: int, k: int, params: NggParams):
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        return ((n - 1) * np.log(u) + (k * params.a - n) * np.log1p(u)
                - params.mass * np.power(1.0 + u, params.a))


def un_posterior_logdensity(u, stats: PartitionStats, params: NggParams,
                            table: TakTable | None = None):
    """log p(U_N = u | partition): a M^K / T^{N,K} u^{N-1} (1+u)^{Ka-N} e^{-M(1+u)^a}."""
    n, k = stats.n, stats.k
    log_norm = math.log(params.a) + k * math.log(params.mass) - log_T(n, k, params, table)
    out = log_norm + _un_log_kernel(u, n, k, params)
    return float(out) if np.isscalar(u) else out


def _build_log_grid(logg, slope, n_points: int):
    """Grid in x = log u covering the density's support (mode +- 46 nats)."""
    lo, hi = -5.0, 5.0
    while slope(lo) <= 0 and lo > -700:
        lo -= 10.0
    while slope(hi) >= 0 and hi < 700:
        hi += 10.0
    for _ in range(70):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            lo = mid
        else:
            hi = mid
    x_mode = 0.5 * (lo + hi)
    peak = logg(x_mode)
    x_lo, x_hi = x_mode - 1.0, x_mode + 1.0
    while logg(x_lo) > peak - 46.0 and x_lo > -700:
        x_lo -= 1.0
    while logg(x_hi) > peak - 46.0 and x_hi < 700:
        x_hi += 1.0
    xs = np.linspace(x_lo, x_hi, n_points)
    return xs, logg(xs) - peak


def _un_grid(n: int, k: int, params: NggParams, n_points: int):
    """x = log u grid and log-density (Jacobian included) of the U_N posterior."""
    a, mass = params.a, params.mass

    def logg(x):
        u = np.exp(x)
        return n * x + (k * a - n) * np.log1p(u) - mass * np.power(1.0 + u, a)

    def slope(x):
        u = np.exp(x)
        return n + (k * a - n) * u / (1.0 + u) - mass * a * u * np.power(1.0 + u, a - 1.0)

    return _build_log_grid(logg, slope, n_points)


def un_next_logdensity(u, stats: PartitionStats, params: NggParams,
                       table: TakTable | None = None):
    """Latent-mass density for the next insertion, p(U_{N+1} = u | first N data).

    Proportional to u^N (1+u)^{Ka-N-1} e^{-M(1+u)^a} [M a (1+u)^a + (N-Ka)];
    the normalizer is N T^{N,K} / (a M^K).  Mixing the conditional predictive
    weights over this density reproduces the marginal predictive weights
    exactly; mixing over the U_N posterior does not (the conditional weights
    condition on the latent mass of the enlarged sample).
    """
    a, mass = params.a, params.mass
    n, k = stats.n, stats.k
    u_arr = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        kern = (n * np.log(u_arr) + (k * a - n - 1.0) * np.log1p(u_arr)
                - mass * np.power(1.0 + u_arr, a)
                + np.log(mass * a * np.power(1.0 + u_arr, a) + (n - k * a)))
    log_z = math.log(n) + log_T(n, k, params, table) - math.log(a) - k * math.log(mass)
    out = kern - log_z
    return float(out) if np.isscalar(u) else out


def _un_next_grid(n: int, k: int, params: NggParams, n_points: int):
    """Grid for the next-insertion latent-mass density (x = log u)."""
    a, mass = params.a, params.mass
    c = n - k * a

    def logg(x):
        u = np.exp(x)
        w = mass * a * np.power(1.0 + u, a)
        return ((n + 1.0) * x + (k * a - n - 1.0) * np.log1p(u)
                - mass * np.power(1.0 + u, a) + np.log(w + c))

    def slope(x):
        u = np.exp(x)
        w = mass * a * np.power(1.0 + u, a)
        ratio = u / (1.0 + u)
        return (n + 1.0 + (k * a - n - 1.0) * ratio - w * ratio
                + a * w * ratio / (w + c))

    return _build_log_grid(logg, slope, n_points)


def sample_un(stats: PartitionStats, params: NggParams, rng: np.random.Generator,
              cdf_tol: float = 1e-8, n_points: int = 1024, size=None):
    """Draw from the U_N posterior by inverse CDF on an adaptive grid.

    The grid in x = log u is refined (doubled) until the trapezoid CDF changes
    by less than cdf_tol, then inverted piecewise-linearly.
    """
    n, k = stats.n, stats.k
    xs, logs = _un_grid(n, k, params, n_points + 1)
    cdf = _grid_cdf(xs, logs)
    while xs.size < 2 ** 18:
        xs2, logs2 = _un_grid(n, k, params, 2 * xs.size - 1)  # nested refinement
        cdf2 = _grid_cdf(xs2, logs2)
        converged = np.max(np.abs(cdf2[::2] - cdf)) < cdf_tol
        xs, cdf = xs2, cdf2
        if converged:
            break
    else:
        raise lc.NumericalError("U_N grid failed to reach the requested CDF tolerance")
    return _invert_cdf(xs, cdf, rng, size)


def _grid_cdf(xs, logs):
    from scipy.integrate import cumulative_simpson

    cdf = cumulative_simpson(np.exp(logs), x=xs, initial=0.0)
    return cdf / cdf[-1]


def _invert_cdf(xs, cdf, rng, size):
    r = rng.random(size if size is not None else 1)
    idx = np.searchsorted(cdf, r, side="right")
    idx = np.clip(idx, 1, len(xs) - 1)
    c0, c1 = cdf[idx - 1], cdf[idx]
    frac = np.where(c1 > c0, (r - c0) / np.maximum(c1 - c0, 1e-300), 0.5)
    x = xs[idx - 1] + frac * (xs[idx] - xs[idx - 1])
    u = np.exp(x)
    return u if size is not None else float(u[0])


def sequential_sample(params: NggParams, n: int, rng: np.random.Generator,
                      scheme: str = "auto", fast_grid: int = 129):
    """Generate a partition of n items by the generalized Blackwell-MacQueen
    scheme; returns (PartitionStats, K-trajectory).

    scheme="marginal" uses the T-ratio predictive weights from a recursion
    table; scheme="conditional" redraws the latent relative mass of the
    enlarged sample before each insertion (from the next-insertion density on
    a fast_grid-point grid) and applies the conditional weights, which makes
    the two schemes identical in law.  "auto" picks marginal for n <= 200
    where the table stays cheap and stable.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if scheme == "auto":
        scheme = "marginal" if n <= 200 else "conditional"
    counts = [1]
    k_traj = np.empty(n, dtype=np.int64)
    k_traj[0] = 1
    if scheme == "marginal":
        table = TakTable(params)
        for i in range(1, n):
            w = predictive_weights(PartitionStats(counts), params, table)
            j = int(rng.choice(len(w), p=w))
            if j == 0:
                counts.append(1)
            else:
                counts[j - 1] += 1
            k_traj[i] = len(counts)
        return PartitionStats(counts), k_traj
    if scheme != "conditional":
        raise ValueError(f"unknown scheme {scheme!r}")
    stats_all, traj_all = sequential_sample_batch(params, n, 1, rng, fast_grid=fast_grid)
    return stats_all[0], traj_all[0]


def sequential_sample_batch(params: NggParams, n: int, n_runs: int,
                            rng: np.random.Generator, fast_grid: int = 97):
    """n_runs independent conditional-scheme partitions of n items, vectorized
    across runs.

    The latent-mass grids for all runs are built simultaneously; allocation to
    an existing cluster uses size-biased proposals (pick a uniform previous
    item's cluster, accept with probability (n_j - a)/n_j), which keeps every
    insertion O(1) regardless of the number of clusters.

    Returns (list of PartitionStats, (n_runs, n) K-trajectory array).
    """
    a, mass = params.a, params.mass
    items = np.zeros((n_runs, n), dtype=np.int32)  # cluster id per item
    counts = np.zeros((n_runs, 256), dtype=np.int64)
    counts[:, 0] = 1
    k = np.ones(n_runs, dtype=np.int64)
    k_traj = np.empty((n_runs, n), dtype=np.int64)
    k_traj[:, 0] = 1
    runs = np.arange(n_runs)
    grid01 = np.linspace(-1.0, 1.0, fast_grid)[None, :]
    log_ma = math.log(mass * a)
    x_lo = np.full(n_runs, -1.0)
    x_hi = np.full(n_runs, 1.0)
    for i in range(1, n):
        c = i - k * a

        def slope(x):
            u = np.exp(x)
            w = mass * a * np.power(1.0 + u, a)
            ratio = u / (1.0 + u)
            return (i + 1.0 + (k * a - i - 1.0) * ratio - w * ratio
                    + a * w * ratio / (w + c))

        def logg(xs):
            u = np.exp(xs)
            ka = (k[:, None] * a) if xs.ndim == 2 else k * a
            cc = c[:, None] if xs.ndim == 2 else c
            return ((i + 1.0) * xs + (ka - i - 1.0) * np.log1p(u)
                    - mass * np.power(1.0 + u, a)
                    + np.log(mass * a * np.power(1.0 + u, a) + cc))

        # keep a bracket around the mode: widen for drift, then bisect
        x_lo -= 0.5
        x_hi += 0.5
        for _ in range(80):
            bad = slope(x_lo) <= 0
            if not bad.any():
                break
            x_lo = np.where(bad, x_lo - 3.0, x_lo)
        for _ in range(80):
            bad = slope(x_hi) >= 0
            if not bad.any():
                break
            x_hi = np.where(bad, x_hi + 3.0, x_hi)
        for _ in range(12):
            mid = 0.5 * (x_lo + x_hi)
            up = slope(mid) > 0
            x_lo = np.where(up, mid, x_lo)
            x_hi = np.where(up, x_hi, mid)
        x_mode = 0.5 * (x_lo + x_hi)
        # expand a symmetric window until the edges are 40 nats below the peak
        peak_val = logg(x_mode)
        width = np.full(n_runs, 2.0)
        for _ in range(10):
            edge = np.maximum(logg(x_mode - width), logg(x_mode + width))
            need = edge > peak_val - 40.0
            if not need.any():
                break
            width = np.where(need, width * 1.6, width)
        xs = x_mode[:, None] + width[:, None] * grid01
        lg = logg(xs)
        lg -= lg.max(axis=1, keepdims=True)
        dens = np.exp(lg)
        cdf = np.cumsum((dens[:, 1:] + dens[:, :-1]) * np.diff(xs, axis=1), axis=1)
        r = rng.random(n_runs) * cdf[:, -1]
        idx = np.clip((cdf < r[:, None]).sum(axis=1), 0, fast_grid - 2)
        left = np.where(idx > 0, cdf[runs, idx - 1], 0.0)
        frac = (r - left) / np.maximum(cdf[runs, idx] - left, 1e-300)
        x_draw = xs[runs, idx] + frac * (xs[runs, idx + 1] - xs[runs, idx])
        u = np.exp(x_draw)
        w0 = np.exp(log_ma + a * np.log1p(u))
        new_cluster = rng.random(n_runs) * (w0 + c) < w0
        chosen = np.empty(n_runs, dtype=np.int64)
        pending = ~new_cluster
        while pending.any():
            pi = np.flatnonzero(pending)
            # size-biased proposal: the cluster of a uniformly chosen old item
            j = items[pi, rng.integers(0, i, size=pi.size)]
            nj = counts[pi, j]
            accept = rng.random(pi.size) * nj < (nj - a)
            chosen[pi[accept]] = j[accept]
            pending[pi[accept]] = False
        if np.any(k[new_cluster] >= counts.shape[1]):
            counts = np.concatenate([counts, np.zeros_like(counts)], axis=1)
        chosen[new_cluster] = k[new_cluster]
        k[new_cluster] += 1
        counts[runs, chosen] += 1
        items[:, i] = chosen
        k_traj[:, i] = k
    stats = [PartitionStats(counts[r, :k[r]]) for r in range(n_runs)]
    return stats, k_traj


def posterior_measure_sample(stats: PartitionStats, params: NggParams, u: float,
                             rng: np.random.Generator, base: BaseMeasure,
                             k_max: int = 10_000, fixed_locations=None):
    """Draw the conditional posterior measure given data and U_N = u.

    mu = T/(T+J+) mu' + J+/(T+J+) sum_k p_k delta_{X*_k}, where mu' is the
    exponentially tilted NGG with Levy density (M a / Gamma(1-a)) s^{-a-1}
    e^{-(1+u)s} (sampled by scaling an NGG(a, M (1+u)^a) draw by 1/(1+u)),
    J+ ~ Gamma(N - K a, rate 1+u) and p ~ Dirichlet(n - a).

    Returns (NrmRealization, info) with info carrying the realized T, J+ and
    the truncation-bias bound on the discarded tail mean of mu'.
    """
    a, mass = params.a, params.mass
    n, k = stats.n, stats.k
    shape = n - k * a
    if shape <= 0:
        raise ValueError("requires N - K a > 0")
    tilted = NggParams(a, mass * (1.0 + u) ** a)
    crm = lc.sample_crm_decreasing(tilted, base, k_max, rng)
    cont_jumps = crm.jumps / (1.0 + u)
    t_total = float(cont_jumps.sum())
    tail_bias = (mass * a * (1.0 + u) ** (a - 1.0)
                 * sp.gammainc(1.0 - a, (1.0 + u) * cont_jumps[-1]))
    j_plus = rng.gamma(shape, 1.0 / (1.0 + u))
    p = rng.dirichlet(np.asarray(stats.counts, dtype=float) - a)
    if fixed_locations is None:
        fixed_locations = base.sampler(rng, k)
    all_jumps = np.concatenate([cont_jumps, j_plus * p])
    locations = np.vstack([crm.locations, fixed_locations])
    weights = all_jumps / all_jumps.sum()
    nrm = NrmRealization(weights, locations, float(all_jumps.sum()))
    info = {"t_continuous": t_total, "j_plus": float(j_plus),
            "expected_t": mass * a * (1.0 + u) ** (a - 1.0),
            "truncation_bias_bound": float(tail_bias)}
    return nrm, info


def reduced_posterior_logjoint(stats: PartitionStats, params: NggParams, u: float,
                               jumps=None, log_base_densities=None) -> float:
    """The reduced sampling posterior, jumps marginalized out or retained.

    Without jumps: u^{N-1} (1+u)^{Ka-N} (Ma)^K e^{M - M(1+u)^a}
    prod (1-a)_{n_k-1} h.  With jumps J_1..J_K: u^{N-1}
    (Ma/Gamma(1-a))^K e^{M - M(1+u)^a} prod J_k^{n_k-a-1} e^{-(1+u) J_k} h.
    """
    a, mass = params.a, params.mass
    n, k = stats.n, stats.k
    out = ((n - 1) * math.log(u) + mass - mass * (1.0 + u) ** a
           + k * math.log(mass * a))
    if jumps is None:
        out += (k * a - n) * math.log1p(u)
        for c in stats.counts:
            out += _log_poch(1.0 - a, c - 1)
    else:
        jumps = np.asarray(jumps, dtype=float)
        if jumps.size != k or np.any(jumps <= 0):
            raise ValueError("need K positive jumps")
        counts = np.asarray(stats.counts, dtype=float)
        out -= k * sp.gammaln(1.0 - a)
        out += float(np.sum((counts - a - 1.0) * np.log(jumps) - (1.0 + u) * jumps))
    if log_base_densities is not None:
        out += float(np.sum(log_base_densities))
    return out


def pdp_partition_log_probability(stats: PartitionStats, a: float, b: float) -> float:
    """Poisson-Dirichlet EPPF: prod_{j=1}^{K-1} (b + j a) / (b+1)_{N-1}
    * prod (1-a)_{n_k-1}; the reference value for the Gamma-mixed-mass check."""
    if not 0 < a < 1:
        raise ValueError("requires a in (0,1)")
    if b <= -a:
        raise ValueError("requires b > -a")
    n, k = stats.n, stats.k
    out = -_log_poch(b + 1.0, n - 1)
    for j in range(1, k):
        out += math.log(b + j * a)
    for c in stats.counts:
        out += _log_poch(1.0 - a, c - 1)
    return out


def iter_partition_shapes(n: int):
    """Yield (counts, multiplicity) over integer partitions of n, where
    multiplicity is the number of set partitions of {1..n} with those block
    sizes: n! / (prod_j (j!)^{m_j} m_j!)."""
    def _parts(remaining, max_part):
        if remaining == 0:
            yield []
            return
        for first in range(min(remaining, max_part), 0, -1):
            for rest in _parts(remaining - first, first):
                yield [first] + rest

    for shape in _parts(n, n):
        log_mult = sp.gammaln(n + 1)
        for size in set(shape):
            m = shape.count(size)
            log_mult -= m * sp.gammaln(size + 1) + sp.gammaln(m + 1)
        yield tuple(shape), float(round(math.exp(log_mult)))
