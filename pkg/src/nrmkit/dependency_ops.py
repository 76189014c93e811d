"""The three dependency operators on CRMs/NRMs and their composition algebra.

Superposition concatenates atoms, subsampling thins them by independent
Bernoulli trials, point transition moves their locations through a kernel.
Compositions with constant acceptance rates admit a normal form (thinning
innermost, transitions next, one flat superposition outermost).

Keyed randomness makes the rewrite identities testable as exact equalities:
every atom owns one thinning uniform (derived by hashing its 64-bit id with
the evaluation seed) that is compared against the product of the acceptance
rates along its path, and the j-th transition an atom undergoes draws from a
generator keyed by (atom id, j, seed).  Both constructions are invariant
under the rewrite rules, while remaining faithful samplers of the operators'
law for any single expression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special as sp

from . import levy_core as lc
from .levy_core import CrmRealization, NggParams

__all__ = [
    "Leaf",
    "Subsample",
    "Transition",
    "Superpose",
    "TransitionKernel",
    "gaussian_rw_kernel",
    "resample_kernel",
    "superpose",
    "subsample",
    "point_transition",
    "normal_form",
    "evaluate_expr",
    "chain_weights",
    "parse_expr",
    "format_expr",
    "SuperpositionPosterior",
    "superposition_posterior",
    "subsample_z_posterior",
    "hierarchical_z_posterior",
]


# ---------------------------------------------------------------------------
# Expression tree


@dataclass(frozen=True)
class Leaf:
    measure_id: str
    params: NggParams | None = None


@dataclass(frozen=True)
class Subsample:
    q: float
    child: object

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"subsampling rate must lie in [0,1], got {self.q}")


@dataclass(frozen=True)
class Transition:
    kernel_id: str
    child: object


@dataclass(frozen=True)
class Superpose:
    children: tuple

    def __init__(self, children):
        children = tuple(children)
        if len(children) < 2:
            raise ValueError("superposition needs at least two children")
        object.__setattr__(self, "children", children)


@dataclass(frozen=True)
class TransitionKernel:
    """kernel_id plus apply(locations, rng) -> new locations (vectorized)."""

    kernel_id: str
    apply: Callable[[np.ndarray, np.random.Generator], np.ndarray]


def gaussian_rw_kernel(sigma: float = 0.1, kernel_id: str = "rw") -> TransitionKernel:
    def _apply(locations, rng):
        return locations + sigma * rng.standard_normal(locations.shape)

    return TransitionKernel(kernel_id, _apply)


def resample_kernel(base: lc.BaseMeasure, kernel_id: str = "resample") -> TransitionKernel:
    def _apply(locations, rng):
        return base.sampler(rng, locations.shape[0])

    return TransitionKernel(kernel_id, _apply)


# ---------------------------------------------------------------------------
# Operators on realizations


def superpose(crms: list[CrmRealization]) -> CrmRealization:
    """Concatenate atom lists; total mass is exactly additive."""
    if not crms:
        raise ValueError("nothing to superpose")
    dims = {crm.locations.shape[1] for crm in crms}
    if len(dims) != 1:
        raise ValueError(f"location dimensions differ: {sorted(dims)}")
    params = crms[0].params
    return CrmRealization(
        params,
        np.concatenate([crm.jumps for crm in crms]),
        np.vstack([crm.locations for crm in crms]),
        np.concatenate([crm.ids for crm in crms]),
        truncation={"kind": "superposition"},
    )


def subsample(crm: CrmRealization, q: float, rng: np.random.Generator) -> CrmRealization:
    """Keep each atom independently with probability q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0,1]")
    keep = rng.random(len(crm)) < q
    return CrmRealization(crm.params, crm.jumps[keep], crm.locations[keep],
                          crm.ids[keep], truncation=dict(crm.truncation))


def point_transition(crm: CrmRealization, kernel: TransitionKernel,
                     rng: np.random.Generator) -> CrmRealization:
    """Move every location through the kernel; jumps and ids are untouched."""
    return CrmRealization(crm.params, crm.jumps.copy(), kernel.apply(crm.locations, rng),
                          crm.ids.copy(), truncation=dict(crm.truncation))


# ---------------------------------------------------------------------------
# Normal form


def normal_form(expr):
    """Rewrite to a flat superposition of T^m(S^q(Leaf)) chains.

    Rules: S^q S^{q'} -> S^{qq'}; S^q T -> T S^q; S and T distribute over
    superposition; nested superpositions flatten.  The result is a fixed
    point of all rules and normal_form is idempotent.
    """
    if isinstance(expr, Leaf):
        return expr
    if isinstance(expr, Superpose):
        flat = []
        for child in expr.children:
            norm = normal_form(child)
            if isinstance(norm, Superpose):
                flat.extend(norm.children)
            else:
                flat.append(norm)
        return Superpose(flat)
    if isinstance(expr, Transition):
        child = normal_form(expr.child)
        if isinstance(child, Superpose):
            return Superpose([normal_form(Transition(expr.kernel_id, c))
                              for c in child.children])
        return Transition(expr.kernel_id, child)
    if isinstance(expr, Subsample):
        child = normal_form(expr.child)
        if isinstance(child, Subsample):
            return Subsample(expr.q * child.q, child.child)
        if isinstance(child, Transition):
            return Transition(child.kernel_id, normal_form(Subsample(expr.q, child.child)))
        if isinstance(child, Superpose):
            return Superpose([normal_form(Subsample(expr.q, c)) for c in child.children])
        return Subsample(expr.q, child)
    raise TypeError(f"not an operator expression: {expr!r}")


# ---------------------------------------------------------------------------
# Keyed evaluation


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer: a stable uint64 -> uint64 mixer."""
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _keyed_uniform(ids: np.ndarray, seed: int, tag: int) -> np.ndarray:
    mixed = _mix64(ids.astype(np.uint64)
                   ^ _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(tag)))
    return (mixed >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass
class _EvalState:
    jumps: np.ndarray
    locations: np.ndarray
    ids: np.ndarray
    acc_q: np.ndarray     # product of acceptance rates along the path so far
    t_count: np.ndarray   # number of transitions already applied per atom


def evaluate_expr(expr, realizations: dict, seed: int,
                  kernels: dict | None = None) -> CrmRealization:
    """Interpret an operator expression over bound leaf realizations.

    Thinning keeps an atom while its keyed uniform stays below the product of
    the acceptance rates it has passed through, and the j-th transition of an
    atom is keyed by (atom id, j, seed); both are invariant under normal-form
    rewriting, so evaluate_expr(e) == evaluate_expr(normal_form(e)) atom for
    atom.
    """
    kernels = kernels or {}

    def walk(node) -> _EvalState:
        if isinstance(node, Leaf):
            if node.measure_id not in realizations:
                raise KeyError(f"unbound leaf {node.measure_id!r}")
            crm = realizations[node.measure_id]
            return _EvalState(crm.jumps.copy(), crm.locations.copy(), crm.ids.copy(),
                              np.ones(len(crm)), np.zeros(len(crm), dtype=np.int64))
        if isinstance(node, Superpose):
            parts = [walk(c) for c in node.children]
            return _EvalState(*[np.concatenate([getattr(s, f) for s in parts])
                                if f != "locations"
                                else np.vstack([s.locations for s in parts])
                                for f in ("jumps", "locations", "ids", "acc_q", "t_count")])
        if isinstance(node, Subsample):
            state = walk(node.child)
            acc = state.acc_q * node.q
            keep = _keyed_uniform(state.ids, seed, tag=0x7468696E) < acc
            return _EvalState(state.jumps[keep], state.locations[keep], state.ids[keep],
                              acc[keep], state.t_count[keep])
        if isinstance(node, Transition):
            state = walk(node.child)
            if node.kernel_id not in kernels:
                raise KeyError(f"unknown kernel {node.kernel_id!r}")
            kernel = kernels[node.kernel_id]
            locations = state.locations.copy()
            for i in range(state.ids.size):
                key = int(_mix64(np.uint64(int(state.ids[i]) & 0xFFFFFFFFFFFFFFFF)
                                 ^ _mix64(np.uint64(seed) ^ np.uint64(0x74 + state.t_count[i]))))
                sub_rng = np.random.Generator(np.random.PCG64(key))
                locations[i] = kernel.apply(locations[i:i + 1], sub_rng)[0]
            return _EvalState(state.jumps, locations, state.ids,
                              state.acc_q, state.t_count + 1)
        raise TypeError(f"not an operator expression: {node!r}")

    state = walk(expr)
    params = next(iter(realizations.values())).params
    order = np.argsort(state.ids, kind="stable")
    return CrmRealization(params, state.jumps[order], state.locations[order],
                          state.ids[order], truncation={"kind": "expression"})


def chain_weights(realized_masses, q: float) -> np.ndarray:
    """Mixing proportions of the epoch measures inside the chained NRM:
    weight_j ~ q^{m-j} * (realized mass of epoch j)."""
    masses = np.asarray(realized_masses, dtype=float)
    if masses.ndim != 1 or masses.size < 1:
        raise ValueError("need at least one epoch mass")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0,1]")
    m = masses.size
    w = q ** (m - 1 - np.arange(m)) * masses
    return w / w.sum()


# ---------------------------------------------------------------------------
# Expression text syntax: (superpose (transition rw (subsample 0.5 (leaf m1))) (leaf m2))


def parse_expr(text: str):
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()

    def read(pos):
        if tokens[pos] != "(":
            raise ValueError(f"expected '(' at token {pos}")
        head = tokens[pos + 1]
        if head == "leaf":
            name = tokens[pos + 2]
            if tokens[pos + 3] != ")":
                raise ValueError("leaf takes exactly one name")
            return Leaf(name), pos + 4
        if head == "subsample":
            q = float(tokens[pos + 2])
            child, nxt = read(pos + 3)
            if tokens[nxt] != ")":
                raise ValueError("subsample takes a rate and one child")
            return Subsample(q, child), nxt + 1
        if head == "transition":
            kernel_id = tokens[pos + 2]
            child, nxt = read(pos + 3)
            if tokens[nxt] != ")":
                raise ValueError("transition takes a kernel and one child")
            return Transition(kernel_id, child), nxt + 1
        if head == "superpose":
            children = []
            nxt = pos + 2
            while tokens[nxt] != ")":
                child, nxt = read(nxt)
                children.append(child)
            return Superpose(children), nxt + 1
        raise ValueError(f"unknown operator {head!r}")

    expr, end = read(0)
    if end != len(tokens):
        raise ValueError("trailing tokens after expression")
    return expr


def format_expr(expr) -> str:
    if isinstance(expr, Leaf):
        return f"(leaf {expr.measure_id})"
    if isinstance(expr, Subsample):
        return f"(subsample {expr.q:g} {format_expr(expr.child)})"
    if isinstance(expr, Transition):
        return f"(transition {expr.kernel_id} {format_expr(expr.child)})"
    if isinstance(expr, Superpose):
        return "(superpose " + " ".join(format_expr(c) for c in expr.children) + ")"
    raise TypeError(f"not an operator expression: {expr!r}")


# ---------------------------------------------------------------------------
# Posterior structure under the operators


class SuperpositionPosterior:
    """Posterior pieces of a superposition of NGG components given data.

    Continuous part: Levy density e^{-u t} sum_i M_i rho_{a_i}(t).  Each fixed
    point with n_k attached observations has jump density proportional to
    t^{n_k} e^{-u t} sum_i M_i rho_{a_i}(t), an exact mixture of Gamma
    densities with component weights M_i a_i Gamma(n_k - a_i) /
    (Gamma(1-a_i) (1+u)^{n_k - a_i}).
    """

    def __init__(self, components: list[NggParams], u: float, counts):
        if u < 0:
            raise ValueError("u must be nonnegative")
        self.components = list(components)
        self.u = float(u)
        self.counts = [int(c) for c in counts]
        if any(c < 1 for c in self.counts):
            raise ValueError("fixed points need n_k >= 1")

    def continuous_levy_density(self, t):
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for p in self.components:
            total += (p.mass * p.a / sp.gamma(1.0 - p.a)) * t ** (-1.0 - p.a) * np.exp(-t)
        return np.exp(-self.u * t) * total

    def continuous_laplace_exponent(self, v):
        """int (1 - e^{-vt}) e^{-ut} sum_i nu_i(dt) in closed form."""
        u = self.u
        return sum(p.mass * ((1.0 + u + v) ** p.a - (1.0 + u) ** p.a)
                   for p in self.components)

    def _mixture(self, k: int):
        n_k = self.counts[k]
        log_w = np.array([
            math.log(p.mass * p.a) - sp.gammaln(1.0 - p.a) + sp.gammaln(n_k - p.a)
            - (n_k - p.a) * math.log1p(self.u)
            for p in self.components])
        return log_w, n_k

    def fixed_point_log_normalizer(self, k: int) -> float:
        log_w, _ = self._mixture(k)
        return float(sp.logsumexp(log_w))

    def fixed_point_log_normalizer_quadrature(self, k: int) -> float:
        n_k = self.counts[k]
        val, _ = integrate.quad(
            lambda t: t ** n_k * self.continuous_levy_density(t), 0.0, np.inf, limit=300)
        return math.log(val)

    def fixed_point_logpdf(self, k: int, t):
        t = np.asarray(t, dtype=float)
        n_k = self.counts[k]
        dens = t ** n_k * self.continuous_levy_density(t)
        with np.errstate(divide="ignore"):
            return np.log(dens) - self.fixed_point_log_normalizer(k)

    def sample_fixed_jump(self, k: int, rng: np.random.Generator, size=None):
        log_w, n_k = self._mixture(k)
        w = np.exp(log_w - sp.logsumexp(log_w))
        idx = rng.choice(len(self.components), p=w, size=size)
        shapes = np.array([n_k - p.a for p in self.components])
        return rng.gamma(shapes[idx], 1.0 / (1.0 + self.u))


def superposition_posterior(components, u, counts) -> SuperpositionPosterior:
    return SuperpositionPosterior(components, u, counts)


def subsample_z_posterior(jumps, z_current, q: float, k: int, n: int, n_k: int) -> float:
    """P(z_k = 1 | ...) after observing n data on the subsampled NRM.

    1 when n_k > 0; otherwise (q/J) / (q/J + (1-q)/J^{-k}) with
    J = (sum_{k'} z_{k'} J_{k'} with z_k = 1)^n and J^{-k} the same sum
    without atom k, computed in log space.
    """
    jumps = np.asarray(jumps, dtype=float)
    z = np.asarray(z_current, dtype=int)
    if jumps.shape != z.shape:
        raise ValueError("jumps and z must align")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0,1]")
    if n_k > 0:
        if z[k] != 1:
            raise ValueError("an atom with data attached must have z_k = 1")
        return 1.0
    rest = float(np.sum(z * jumps)) - z[k] * jumps[k]
    if rest <= 0.0 and n > 0 and q < 1.0:
        # the alternative (z_k = 0) has zero likelihood
        return 1.0
    log_on = math.log(q) - n * math.log(rest + jumps[k])
    log_off = math.log1p(-q) - n * math.log(rest) if q < 1.0 else -math.inf
    return float(math.exp(log_on - np.logaddexp(log_on, log_off)))


def hierarchical_z_posterior(jumps_by_epoch, z_by_epoch, q: float,
                             epoch_gap: int, k: int, n_m_dot: int, n_mk: int) -> float:
    """Acceptance posterior for an epoch-m' jump inside the epoch-m measure.

    epoch_gap = m - m' >= 0 sets the thinning prior q^{m-m'}; sums run over
    all epochs' currently accepted jumps and the exponent is the total count
    n_m_dot attached to the epoch-m measure.  The single-epoch case (gap 1,
    one epoch list) reduces to subsample_z_posterior.
    """
    if epoch_gap < 0:
        raise ValueError("epoch gap must be >= 0")
    if n_mk > 0:
        return 1.0
    q_eff = q ** epoch_gap
    total = 0.0
    target_jump = None
    for jumps, z in zip(jumps_by_epoch, z_by_epoch):
        jumps = np.asarray(jumps, dtype=float)
        z = np.asarray(z, dtype=int)
        total += float(np.sum(z * jumps))
    jumps0 = np.asarray(jumps_by_epoch[0], dtype=float)
    z0 = np.asarray(z_by_epoch[0], dtype=int)
    target_jump = jumps0[k]
    rest = total - z0[k] * target_jump
    if q_eff >= 1.0:
        return 1.0
    if rest <= 0.0 and n_m_dot > 0:
        return 1.0
    log_on = math.log(q_eff) - n_m_dot * math.log(rest + target_jump)
    log_off = math.log1p(-q_eff) - n_m_dot * math.log(rest)
    return float(math.exp(log_on - np.logaddexp(log_on, log_off)))
