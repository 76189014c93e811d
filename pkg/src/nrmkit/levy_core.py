"""NGG Levy machinery: Laplace exponent, tail integrals, CRM/NRM sampling.

The NGG(a, M) has Levy density M * rho_a(t) * H(dx) with
rho_a(t) = (a / Gamma(1-a)) t^{-1-a} e^{-t}, 0 < a < 1.  Everything here is
homogeneous (rho does not depend on the location).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special as sp

from .special_math import abs_q_neg

__all__ = [
    "NumericalError",
    "NggParams",
    "BaseMeasure",
    "uniform_base",
    "gaussian_base",
    "CrmRealization",
    "NrmRealization",
    "unit_laplace_exponent",
    "unit_laplace_exponent_d1",
    "unit_laplace_exponent_d2",
    "laplace_exponent",
    "laplace_exponent_d1",
    "laplace_exponent_d2",
    "unit_tail_mass",
    "tail_mass",
    "unit_exp_tilted_tail",
    "exp_tilted_tail",
    "unit_truncated_exponent",
    "truncated_exponent",
    "unit_mean_below",
    "invert_tail_mass",
    "sample_jumps_above",
    "sample_jump_batch_above",
    "sample_crm_threshold",
    "sample_crm_decreasing",
    "normalize",
    "crm_to_json",
    "crm_from_json",
]


class NumericalError(RuntimeError):
    """A numerical routine failed to meet its contract (bad bracket, no convergence)."""


@dataclass(frozen=True)
class NggParams:
    """Shape a in (0,1) and total mass M > 0 of an NGG."""

    a: float
    mass: float

    def __post_init__(self):
        if not 0.0 < self.a < 1.0:
            raise ValueError(f"NGG shape a must lie in (0, 1), got {self.a}")
        if not self.mass > 0.0:
            raise ValueError(f"NGG mass must be positive, got {self.mass}")


@dataclass(frozen=True)
class BaseMeasure:
    """A probability measure on the location space.

    sampler(rng, n) returns an (n, dimension) array; log_density maps a
    location (or an (n, dimension) batch) to log h(x).
    """

    dimension: int
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    log_density: Callable[[np.ndarray], np.ndarray]


def uniform_base(dimension: int = 1) -> BaseMeasure:
    def _sample(rng, n):
        return rng.random((n, dimension))

    def _logpdf(x):
        x = np.atleast_2d(x)
        inside = np.all((x >= 0.0) & (x <= 1.0), axis=1)
        return np.where(inside, 0.0, -np.inf)

    return BaseMeasure(dimension, _sample, _logpdf)


def gaussian_base(mean=0.0, std=1.0, dimension: int = 1) -> BaseMeasure:
    mean_arr = np.broadcast_to(np.asarray(mean, dtype=float), (dimension,))

    def _sample(rng, n):
        return mean_arr + std * rng.standard_normal((n, dimension))

    def _logpdf(x):
        x = np.atleast_2d(x)
        z = (x - mean_arr) / std
        return -0.5 * np.sum(z * z, axis=1) - dimension * (0.5 * math.log(2 * math.pi) + math.log(std))

    return BaseMeasure(dimension, _sample, _logpdf)


@dataclass
class CrmRealization:
    """A finite truncated CRM draw: jumps, matching locations, atom ids."""

    params: NggParams
    jumps: np.ndarray
    locations: np.ndarray
    ids: np.ndarray
    truncation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.jumps = np.asarray(self.jumps, dtype=float)
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if np.any(self.jumps <= 0):
            raise ValueError("all jumps must be strictly positive")

    @property
    def total_mass(self) -> float:
        return float(self.jumps.sum())

    def __len__(self) -> int:
        return self.jumps.size


@dataclass
class NrmRealization:
    """Normalized weights plus the locations they sit on."""

    weights: np.ndarray
    locations: np.ndarray
    total_mass_before_normalization: float
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        total = self.weights.sum()
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError(f"weights must sum to 1, got {total}")


# Laplace exponent psi(v) = M ((1+v)^a - 1) and derivatives.

def unit_laplace_exponent(a: float, v):
    return np.power(1.0 + np.asarray(v, dtype=float), a) - 1.0


def unit_laplace_exponent_d1(a: float, v):
    return a * np.power(1.0 + np.asarray(v, dtype=float), a - 1.0)


def unit_laplace_exponent_d2(a: float, v):
    return a * (a - 1.0) * np.power(1.0 + np.asarray(v, dtype=float), a - 2.0)


def laplace_exponent(params: NggParams, v):
    """psi(v) = M ((1+v)^a - 1); psi(0) = 0, increasing and concave."""
    return params.mass * unit_laplace_exponent(params.a, v)


def laplace_exponent_d1(params: NggParams, v):
    return params.mass * unit_laplace_exponent_d1(params.a, v)


def laplace_exponent_d2(params: NggParams, v):
    return params.mass * unit_laplace_exponent_d2(params.a, v)


# Tail integrals of the Levy density.

def unit_tail_mass(a: float, L):
    """int_L^inf rho_a(dt) = |Q(-a, L)| per unit mass."""
    L = np.asarray(L, dtype=float)
    if np.any(L <= 0):
        raise ValueError("tail mass requires L > 0")
    return abs_q_neg(a, L)


def tail_mass(params: NggParams, L):
    """M int_L^inf rho_a(dt) = M |Q(-a, L)|."""
    return params.mass * unit_tail_mass(params.a, L)


def unit_exp_tilted_tail(a: float, v, L):
    """int_L^inf e^{-v t} rho_a(dt) = (1+v)^a |Q(-a, L(1+v))| per unit mass."""
    v = np.asarray(v, dtype=float)
    L = np.asarray(L, dtype=float)
    if np.any(L <= 0):
        raise ValueError("tilted tail requires L > 0")
    if np.any(v < 0):
        raise ValueError("tilted tail requires v >= 0")
    return np.power(1.0 + v, a) * abs_q_neg(a, L * (1.0 + v))


def exp_tilted_tail(params: NggParams, v, L):
    return params.mass * unit_exp_tilted_tail(params.a, v, L)


def unit_truncated_exponent(a: float, v, L):
    """int_0^L (1 - e^{-v t}) rho_a(t) dt per unit mass.

    Computed as ((1+v)^a - 1) + (1+v)^a |Q(-a, L(1+v))| - |Q(-a, L)|; the
    identity loses digits as L -> 0 where the true value vanishes, which is
    harmless at the tolerances used here.
    """
    v = np.asarray(v, dtype=float)
    value = unit_laplace_exponent(a, v) + unit_exp_tilted_tail(a, v, L) - unit_tail_mass(a, L)
    return np.maximum(value, 0.0)


def truncated_exponent(params: NggParams, v, L):
    return params.mass * unit_truncated_exponent(params.a, v, L)


def unit_mean_below(a: float, z):
    """int_0^z t rho_a(t) dt = a P(1-a, z) per unit mass (P = regularized lower gamma).

    The z -> inf limit is a = psi'(0) per unit mass; used as the truncation
    correction for sampled realizations.
    """
    return a * sp.gammainc(1.0 - a, np.asarray(z, dtype=float))


def invert_tail_mass(params: NggParams, targets, rel_tol: float = 1e-12, max_iter: int = 90):
    """Solve M |Q(-a, j)| = target for j, vectorized bisection in log j.

    The map is strictly decreasing with range (0, inf), so a bracket always
    exists; failure to bracket raises NumericalError rather than returning
    garbage.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    if np.any(targets <= 0):
        raise NumericalError("tail-mass inversion needs positive targets")
    a, mass = params.a, params.mass
    w = targets / mass
    # Asymptotic guess from |Q(-a,z)| ~ z^{-a}/Gamma(1-a) (small z); clip into range.
    guess = np.power(w * math.gamma(1.0 - a), -1.0 / a)
    lo = np.log(np.clip(guess, 1e-240, 680.0)) - 3.0
    hi = lo + 6.0
    for _ in range(60):
        need = mass * abs_q_neg(a, np.exp(lo)) < targets  # tail too small -> move left
        if not need.any():
            break
        lo = np.where(need, lo - 6.0, lo)
    else:
        raise NumericalError("failed to bracket tail-mass inversion from below")
    for _ in range(60):
        need = mass * abs_q_neg(a, np.exp(hi)) > targets
        if not need.any():
            break
        hi = np.where(need, np.minimum(hi + 6.0, math.log(700.0)), hi)
        if np.all(hi >= math.log(700.0) - 1e-9):
            break
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        too_small = mass * abs_q_neg(a, np.exp(mid)) < targets
        lo = np.where(too_small, lo, mid)
        hi = np.where(too_small, mid, hi)
        if np.max(hi - lo) < 0.5 * rel_tol:
            break
    return np.exp(0.5 * (lo + hi))


def _rejection_jumps_above(params: NggParams, z: float, rng: np.random.Generator) -> np.ndarray:
    """All jumps of a PoissonP(M rho_a) realization above z, by thinning.

    Piecewise dominating process: a truncated Pareto piece on (z, c] thinned
    by e^{-t}, and a shifted-exponential piece on (c, inf) thinned by
    (t/c)^{-1-a}, with c = max(z, 1).
    """
    a, mass = params.a, params.mass
    c = max(z, 1.0)
    out = []
    if z < c:
        rate1 = mass * (z ** (-a) - c ** (-a)) / math.gamma(1.0 - a)
        k1 = rng.poisson(rate1)
        if k1:
            u = rng.random(k1)
            t = (z ** (-a) + u * (c ** (-a) - z ** (-a))) ** (-1.0 / a)
            keep = rng.random(k1) < np.exp(-t)
            out.append(t[keep])
    rate2 = mass * (a / math.gamma(1.0 - a)) * c ** (-1.0 - a) * math.exp(-c)
    k2 = rng.poisson(rate2)
    if k2:
        t = c + rng.exponential(size=k2)
        keep = rng.random(k2) < (t / c) ** (-1.0 - a)
        out.append(t[keep])
    if not out:
        return np.empty(0)
    return np.concatenate(out)


def sample_jumps_above(params: NggParams, z: float, rng: np.random.Generator,
                       method: str = "inverse") -> np.ndarray:
    """Jumps of one realization above threshold z (unordered).

    method="inverse": K ~ Poisson(tail mass), then i.i.d. inverse-CDF draws by
    bisection on the tail mass.  method="rejection": piecewise thinning of a
    dominating Poisson process; identical in law, much faster for small z.
    """
    if z <= 0:
        raise ValueError("threshold z must be positive")
    if method == "rejection":
        return _rejection_jumps_above(params, z, rng)
    if method != "inverse":
        raise ValueError(f"unknown method {method!r}")
    total = tail_mass(params, z)
    k = rng.poisson(total)
    if k == 0:
        return np.empty(0)
    return invert_tail_mass(params, rng.random(k) * total)


def sample_jump_batch_above(params: NggParams, z: float, rng: np.random.Generator,
                            n_real: int, method: str = "rejection"):
    """(counts, flat_jumps) for n_real independent realizations above z.

    Vectorized across realizations; flat_jumps concatenates the per-realization
    jump vectors in order.
    """
    if method == "inverse":
        total = tail_mass(params, z)
        counts = rng.poisson(total, size=n_real)
        n = int(counts.sum())
        jumps = invert_tail_mass(params, rng.random(n) * total) if n else np.empty(0)
        return counts, jumps
    if method != "rejection":
        raise ValueError(f"unknown method {method!r}")
    a, mass = params.a, params.mass
    c = max(z, 1.0)
    parts_j, parts_r = [], []
    if z < c:
        rate1 = mass * (z ** (-a) - c ** (-a)) / math.gamma(1.0 - a)
        k1 = rng.poisson(rate1, size=n_real)
        n1 = int(k1.sum())
        if n1:
            u = rng.random(n1)
            t = (z ** (-a) + u * (c ** (-a) - z ** (-a))) ** (-1.0 / a)
            keep = rng.random(n1) < np.exp(-t)
            parts_j.append(t[keep])
            parts_r.append(np.repeat(np.arange(n_real), k1)[keep])
    rate2 = mass * (a / math.gamma(1.0 - a)) * c ** (-1.0 - a) * math.exp(-c)
    k2 = rng.poisson(rate2, size=n_real)
    n2 = int(k2.sum())
    if n2:
        t = c + rng.exponential(size=n2)
        keep = rng.random(n2) < (t / c) ** (-1.0 - a)
        parts_j.append(t[keep])
        parts_r.append(np.repeat(np.arange(n_real), k2)[keep])
    if not parts_j:
        return np.zeros(n_real, dtype=int), np.empty(0)
    jumps = np.concatenate(parts_j)
    reals = np.concatenate(parts_r)
    order = np.argsort(reals, kind="stable")
    counts = np.bincount(reals, minlength=n_real)
    return counts, jumps[order]


def _new_ids(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.integers(0, 2 ** 64, size=k, dtype=np.uint64)


def sample_crm_threshold(params: NggParams, base: BaseMeasure, z: float,
                         rng: np.random.Generator, method: str = "inverse") -> CrmRealization:
    """Block sampler: every jump above z, locations i.i.d. from the base."""
    jumps = sample_jumps_above(params, z, rng, method=method)
    k = jumps.size
    locations = base.sampler(rng, k) if k else np.empty((0, base.dimension))
    return CrmRealization(params, jumps, locations, _new_ids(rng, k),
                          truncation={"kind": "threshold", "z": z})


def sample_crm_decreasing(params: NggParams, base: BaseMeasure, k_max: int,
                          rng: np.random.Generator) -> CrmRealization:
    """Ferguson-Klass sampler: the k_max largest jumps, in decreasing order.

    The running targets T_k = T_{k-1} + Exp(1) are the tail masses at which
    the jumps sit, so J_k = tail_mass^{-1}(T_k) and the J_k are strictly
    decreasing for any seed.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    targets = np.cumsum(rng.exponential(size=k_max))
    jumps = invert_tail_mass(params, targets)
    if np.any(np.diff(jumps) >= 0):
        raise NumericalError("decreasing-jump inversion produced a non-decreasing pair")
    locations = base.sampler(rng, k_max)
    return CrmRealization(params, jumps, locations, _new_ids(rng, k_max),
                          truncation={"kind": "count", "k_max": k_max})


def normalize(crm: CrmRealization) -> NrmRealization:
    """weights = jumps / sum(jumps); scale-invariant by construction."""
    if len(crm) == 0:
        raise ValueError("cannot normalize an empty realization")
    total = crm.total_mass
    return NrmRealization(crm.jumps / total, crm.locations, total, ids=crm.ids)


def crm_to_json(crm: CrmRealization) -> str:
    """JSON with enough decimal digits that doubles round-trip bit-exactly."""
    obj = {
        "params": {"a": crm.params.a, "mass": crm.params.mass},
        "atoms": [
            {"jump": float(j), "location": [float(c) for c in loc], "id": int(i)}
            for j, loc, i in zip(crm.jumps, crm.locations, crm.ids)
        ],
        "truncation": crm.truncation,
    }
    return json.dumps(obj)


def crm_from_json(text: str) -> CrmRealization:
    obj = json.loads(text)
    params = NggParams(obj["params"]["a"], obj["params"]["mass"])
    atoms = obj["atoms"]
    jumps = np.array([atom["jump"] for atom in atoms])
    dim = len(atoms[0]["location"]) if atoms else 1
    locations = np.array([atom["location"] for atom in atoms]).reshape(len(atoms), dim)
    ids = np.array([atom["id"] for atom in atoms], dtype=np.uint64)
    return CrmRealization(params, jumps, locations, ids, truncation=obj.get("truncation", {}))
