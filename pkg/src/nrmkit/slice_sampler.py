"""Gibbs slice sampler for NRM (NGG) mixture models.

State: components theta_k, jumps J_k (all above the slice floor L),
allocations s_i, slice variables u_i in (0, J_{s_i}], latent relative mass U,
and total mass M.  One sweep updates, in order: allocations, U, components,
attached jumps, unattached jumps, slices (with L and the unattached-set
maintenance that a moving L requires), and M.

Two details keep every step an exact conditional of the joint in
svmarglikelihood form:

* attached jumps are drawn from Gamma(n_k - a, 1 + U) truncated to
  (max attached u_i, infinity) - the plain Gamma is the conditional only with
  the slices integrated out, which would break the u_i <= J_{s_i} invariant
  mid-sweep;
* when the slice update lowers L, the unattached set is topped up with the
  compound-Poisson band on (L_new, L_old); when it raises L, unattached jumps
  below the new floor are pruned.  Either way the unattached set stays a
  complete Poisson draw above the current L.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as sp

from . import levy_core as lc
from .levy_core import NggParams

logger = logging.getLogger("nrmkit")

__all__ = [
    "LikelihoodModel",
    "gaussian_model",
    "MixtureState",
    "ChainConfig",
    "sample_allocations",
    "sample_latent_mass",
    "sample_components",
    "sample_fixed_jumps",
    "sample_new_jumps",
    "sample_slices",
    "sample_mass",
    "log_joint",
    "gibbs_sweep",
    "run_chain",
    "forward_joint_draw",
    "pp_correlation",
]


@dataclass
class LikelihoodModel:
    """Mixture component family: data density g0, component prior h, and an
    exact conjugate posterior sampler (or a random-walk proposal scale for
    the generic Metropolis update)."""

    dim: int
    log_g0_matrix: callable          # (data (N,d), thetas (K,d)) -> (N,K)
    prior_log_h: callable            # thetas (K,d) -> (K,)
    prior_sampler: callable          # (rng, n) -> (n,d)
    posterior_sampler: callable | None = None   # (data subset, rng) -> (d,)
    data_sampler: callable | None = None        # (per-datum thetas, rng) -> data
    conjugate: bool = False
    proposal_std: float | None = None


def gaussian_model(prior_mean=0.0, prior_std=3.0, obs_std=1.0, dim: int = 1) -> LikelihoodModel:
    """Gaussian likelihood with fixed observation covariance and a Gaussian
    prior on the component mean: the conjugate workhorse."""
    mean0 = np.broadcast_to(np.asarray(prior_mean, dtype=float), (dim,))

    def log_g0_matrix(data, thetas):
        diff = data[:, None, :] - thetas[None, :, :]
        return (-0.5 * np.sum((diff / obs_std) ** 2, axis=2)
                - dim * (0.5 * math.log(2 * math.pi) + math.log(obs_std)))

    def prior_log_h(thetas):
        z = (thetas - mean0) / prior_std
        return (-0.5 * np.sum(z * z, axis=1)
                - dim * (0.5 * math.log(2 * math.pi) + math.log(prior_std)))

    def prior_sampler(rng, n):
        return mean0 + prior_std * rng.standard_normal((n, dim))

    def posterior_sampler(subset, rng):
        n = subset.shape[0]
        var = 1.0 / (1.0 / prior_std ** 2 + n / obs_std ** 2)
        mean = var * (mean0 / prior_std ** 2 + subset.sum(axis=0) / obs_std ** 2)
        return mean + math.sqrt(var) * rng.standard_normal(dim)

    def data_sampler(means, rng):
        return means + obs_std * rng.standard_normal(means.shape)

    return LikelihoodModel(dim, log_g0_matrix, prior_log_h, prior_sampler,
                           posterior_sampler, data_sampler, conjugate=True)


@dataclass
class MixtureState:
    """Full Gibbs state; components are occupied and unattached together."""

    a: float
    mass: float
    thetas: np.ndarray        # (K_total, d)
    jumps: np.ndarray         # (K_total,)
    alloc: np.ndarray         # (N,) indices into the component arrays
    slices: np.ndarray        # (N,)
    latent_u: float
    floor: float              # L = min(slices)

    @property
    def params(self) -> NggParams:
        return NggParams(self.a, self.mass)

    @property
    def n(self) -> int:
        return self.alloc.size

    @property
    def k_total(self) -> int:
        return self.jumps.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.alloc, minlength=self.k_total)

    def k_occupied(self) -> int:
        return int(np.unique(self.alloc).size)

    def check_invariants(self) -> None:
        if not math.isclose(self.floor, float(self.slices.min()), rel_tol=1e-12):
            raise lc.NumericalError("floor L != min slice variable")
        if np.any(self.slices <= 0) or np.any(self.slices > self.jumps[self.alloc]):
            raise lc.NumericalError("slice variables must lie in (0, J_{s_i}]")
        if np.any(self.jumps <= 0):
            raise lc.NumericalError("jumps must be positive")
        occupied = np.unique(self.alloc)
        if np.any(self.jumps[occupied] <= self.floor):
            raise lc.NumericalError("an occupied jump fell to or below the floor")
        counts = self.counts()
        unattached = np.flatnonzero(counts == 0)
        if np.any(self.jumps[unattached] <= self.floor):
            raise lc.NumericalError("an unattached jump fell to or below the floor")


@dataclass
class ChainConfig:
    iters: int = 1000
    burn_in: int = 200
    thin: int = 1
    a: float = 0.5
    mass_init: float = 1.0
    mass_prior: tuple | None = (1.0, 1.0)   # Gamma(shape, rate); None fixes M
    validate: bool = False
    record_allocations: bool = True


# ---------------------------------------------------------------------------
# Individual conditional updates


def sample_allocations(state: MixtureState, data: np.ndarray, model: LikelihoodModel,
                       rng: np.random.Generator) -> MixtureState:
    """s_i from the finite set {k : J_k > u_i}, weighted by g0(x_i | theta_k)."""
    loglik = model.log_g0_matrix(data, state.thetas)
    masked = np.where(state.jumps[None, :] > state.slices[:, None], loglik, -np.inf)
    if np.any(np.all(np.isinf(masked) & (masked < 0), axis=1)):
        raise lc.NumericalError("a datum has no component above its slice variable")
    gumbel = -np.log(-np.log(rng.random(masked.shape)))
    state.alloc = np.argmax(masked + gumbel, axis=1).astype(np.int64)
    return state


def sample_latent_mass(state: MixtureState, rng: np.random.Generator,
                       max_tries: int = 10_000) -> MixtureState:
    """U from u^{N-1} exp(-u sum J) exp(-M int_0^L (1-e^{-ut}) rho): rejection
    with a Gamma(N, sum J) proposal whose acceptance ratio is the truncated
    exponent factor (always <= 1); falls back to a grid draw if the ratio
    degenerates."""
    n = state.n
    total_j = float(state.jumps.sum())
    params = state.params
    accepted = None
    for _ in range(max_tries):
        u = rng.gamma(n, 1.0 / total_j)
        if u <= 0.0:
            continue
        log_ratio = -lc.truncated_exponent(params, u, state.floor)
        if math.log(rng.random() + 1e-300) < log_ratio:
            accepted = u
            break
    if accepted is None:
        logger.warning("latent-mass rejection sampler starved; using grid fallback")
        from .ngg_posterior import _build_log_grid, _grid_cdf, _invert_cdf

        def logg(x):
            u = np.exp(x)
            return (n * x - u * total_j
                    - lc.truncated_exponent(params, u, state.floor))

        def slope(x):
            u = np.exp(x)
            eps = 1e-5
            return (logg(x + eps) - logg(x - eps)) / (2 * eps)

        xs, logs = _build_log_grid(logg, slope, 2048)
        accepted = _invert_cdf(xs, _grid_cdf(xs, logs), rng, None)
    state.latent_u = float(accepted)
    return state


def sample_components(state: MixtureState, data: np.ndarray, model: LikelihoodModel,
                      rng: np.random.Generator) -> MixtureState:
    """theta_k from h(theta) prod_{i: s_i=k} g0(x_i | theta); prior draw when
    no data is attached; exact when conjugate, random-walk Metropolis else."""
    counts = state.counts()
    for k in range(state.k_total):
        if counts[k] == 0:
            state.thetas[k] = model.prior_sampler(rng, 1)[0]
            continue
        subset = data[state.alloc == k]
        if model.conjugate:
            state.thetas[k] = model.posterior_sampler(subset, rng)
        else:
            if model.proposal_std is None:
                raise ValueError("non-conjugate model needs a proposal_std")
            cur = state.thetas[k]
            prop = cur + model.proposal_std * rng.standard_normal(cur.shape)
            cur2, prop2 = cur[None, :], prop[None, :]
            log_acc = (model.prior_log_h(prop2)[0] - model.prior_log_h(cur2)[0]
                       + model.log_g0_matrix(subset, prop2).sum()
                       - model.log_g0_matrix(subset, cur2).sum())
            if math.log(rng.random() + 1e-300) < log_acc:
                state.thetas[k] = prop
    return state


def _truncated_gamma(shape, rate, lower, rng, size=None):
    """Exact draw from Gamma(shape, rate) conditioned on exceeding lower."""
    tail = sp.gammaincc(shape, lower * rate)
    v = rng.random(size)
    return sp.gammainccinv(shape, np.maximum(tail * v, 1e-300)) / rate


def sample_fixed_jumps(state: MixtureState, rng: np.random.Generator) -> MixtureState:
    """Attached jumps: J_k ~ Gamma(n_k - a, 1 + U) truncated to the maximum
    attached slice variable (the truncation vanishes as the slices allow)."""
    counts = state.counts()
    rate = 1.0 + state.latent_u
    occupied = np.flatnonzero(counts > 0)
    floors = np.zeros(state.k_total)
    np.maximum.at(floors, state.alloc, state.slices)
    shapes = counts[occupied] - state.a
    draws = _truncated_gamma(shapes, rate, floors[occupied], rng, size=occupied.size)
    state.jumps[occupied] = draws
    return state


def _tilted_jumps_above(params: NggParams, u: float, lower: float,
                        rng: np.random.Generator) -> np.ndarray:
    """All jumps of the e^{-ut}-tilted process above lower: a plain NGG tail
    draw at threshold lower*(1+u) scaled back by 1/(1+u)."""
    tilted = NggParams(params.a, params.mass * (1.0 + u) ** params.a)
    return lc.sample_jumps_above(tilted, lower * (1.0 + u), rng, method="rejection") / (1.0 + u)


def sample_new_jumps(state: MixtureState, model: LikelihoodModel,
                     rng: np.random.Generator) -> MixtureState:
    """Replace the unattached components with a fresh compound-Poisson draw:
    count ~ Poisson(M int_L^inf e^{-Ut} rho(dt)), sizes from the tilted tail,
    components from the prior."""
    counts = state.counts()
    keep = counts > 0
    new_jumps = _tilted_jumps_above(state.params, state.latent_u, state.floor, rng)
    state.alloc = _reindex(state.alloc, keep)
    state.jumps = np.concatenate([state.jumps[keep], new_jumps])
    state.thetas = np.vstack([state.thetas[keep], model.prior_sampler(rng, new_jumps.size)])
    return state


def _reindex(alloc: np.ndarray, keep: np.ndarray) -> np.ndarray:
    mapping = -np.ones(keep.size, dtype=np.int64)
    mapping[keep] = np.arange(int(keep.sum()))
    out = mapping[alloc]
    if np.any(out < 0):
        raise lc.NumericalError("attempted to drop an occupied component")
    return out


def sample_slices(state: MixtureState, model: LikelihoodModel,
                  rng: np.random.Generator) -> MixtureState:
    """u_i ~ Uniform(0, J_{s_i}], then maintain the unattached set against the
    new floor: prune below it, top up the (L_new, L_old) band if it fell."""
    old_floor = state.floor
    state.slices = state.jumps[state.alloc] * (1.0 - rng.random(state.n))  # in (0, J]
    new_floor = float(state.slices.min())
    counts = state.counts()
    if new_floor < old_floor:
        band = _tilted_jumps_above(state.params, state.latent_u, new_floor, rng)
        band = band[band <= old_floor]
        if band.size:
            state.jumps = np.concatenate([state.jumps, band])
            state.thetas = np.vstack([state.thetas, model.prior_sampler(rng, band.size)])
    elif new_floor > old_floor:
        keep = (counts > 0) | (state.jumps > new_floor)
        state.alloc = _reindex(state.alloc, keep)
        state.jumps = state.jumps[keep]
        state.thetas = state.thetas[keep]
    state.floor = new_floor
    return state


def sample_mass(state: MixtureState, prior: tuple, rng: np.random.Generator) -> MixtureState:
    """M ~ Gamma(alpha + K, beta + int_L^inf rho + int_0^L (1-e^{-Ut}) rho),
    the integrals per unit mass; exact conjugate update."""
    alpha, beta = prior
    integral = (lc.unit_tail_mass(state.a, state.floor)
                + lc.unit_truncated_exponent(state.a, state.latent_u, state.floor))
    state.mass = float(rng.gamma(alpha + state.k_total, 1.0 / (beta + integral)))
    return state


def log_joint(state: MixtureState, data: np.ndarray, model: LikelihoodModel) -> float:
    """The augmented joint density (svmarglikelihood form), with the
    compound-Poisson factor over (K, J) included so values are comparable
    across states with different K; u-, x-independent constants dropped."""
    params = state.params
    u, floor, n = state.latent_u, state.floor, state.n
    counts = state.counts()
    rho_log = (math.log(params.mass * params.a) - sp.gammaln(1.0 - params.a)
               - (1.0 + params.a) * np.log(state.jumps) - state.jumps)
    out = (-u * float(state.jumps.sum())
           - lc.truncated_exponent(params, u, floor)
           + (n - 1) * math.log(u)
           - lc.tail_mass(params, floor)
           + float(np.sum(rho_log)) - sp.gammaln(state.k_total + 1))
    out += float(np.sum(model.prior_log_h(state.thetas)))
    loglik = model.log_g0_matrix(data, state.thetas)
    out += float(loglik[np.arange(n), state.alloc].sum())
    return out


def gibbs_sweep(state: MixtureState, data: np.ndarray, model: LikelihoodModel,
                config: ChainConfig, rng: np.random.Generator) -> MixtureState:
    steps = [
        lambda: sample_allocations(state, data, model, rng),
        lambda: sample_latent_mass(state, rng),
        lambda: sample_components(state, data, model, rng),
        lambda: sample_fixed_jumps(state, rng),
        lambda: sample_new_jumps(state, model, rng),
        lambda: sample_slices(state, model, rng),
    ]
    if config.mass_prior is not None:
        steps.append(lambda: sample_mass(state, config.mass_prior, rng))
    for step in steps:
        step()
        if config.validate:
            state.check_invariants()
    return state


def initial_state(data: np.ndarray, model: LikelihoodModel, config: ChainConfig,
                  rng: np.random.Generator) -> MixtureState:
    """Single-cluster start: J_1 ~ Gamma(N - a, 1), slices uniform under it."""
    n = data.shape[0]
    mass = config.mass_init
    if config.mass_prior is not None:
        alpha, beta = config.mass_prior
        mass = float(rng.gamma(alpha, 1.0 / beta))
    j1 = float(rng.gamma(n - config.a, 1.0))
    slices = j1 * (1.0 - rng.random(n))
    state = MixtureState(
        a=config.a, mass=mass,
        thetas=model.prior_sampler(rng, 1),
        jumps=np.array([j1]),
        alloc=np.zeros(n, dtype=np.int64),
        slices=slices,
        latent_u=n / j1,
        floor=float(slices.min()),
    )
    return state


def run_chain(data: np.ndarray, model: LikelihoodModel, config: ChainConfig,
              rng: np.random.Generator):
    """Run the sampler; returns a list of per-kept-iteration records."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.size == 0:
        raise ValueError("run_chain needs at least one observation")
    if data.shape[1] != model.dim:
        raise ValueError(f"data dimension {data.shape[1]} != model dimension {model.dim}")
    state = initial_state(data, model, config, rng)
    records = []
    for it in range(config.iters):
        gibbs_sweep(state, data, model, config, rng)
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            rec = {
                "iter": it,
                "K": state.k_occupied(),
                "K_total": state.k_total,
                "M": state.mass,
                "U_N": state.latent_u,
                "L": state.floor,
                "log_joint": log_joint(state, data, model),
            }
            if config.record_allocations:
                rec["allocations"] = state.alloc.tolist()
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# Geweke joint-distribution testing


def forward_joint_draw(n: int, model: LikelihoodModel, config: ChainConfig,
                       rng: np.random.Generator):
    """Exact draw of (state, data) from the augmented prior.

    Uses the posterior decomposition: partition by the sequential scheme,
    U from its posterior given the partition, attached jumps from
    Gamma(n_k - a, 1+U), slices uniform, unattached jumps compound-Poisson
    above the realized floor, components from the prior, data from g0.
    """
    from .ngg_posterior import PartitionStats, sample_un, sequential_sample

    mass = config.mass_init
    if config.mass_prior is not None:
        alpha, beta = config.mass_prior
        mass = float(rng.gamma(alpha, 1.0 / beta))
    params = NggParams(config.a, mass)
    stats, _ = sequential_sample(params, n, rng, scheme="marginal")
    counts = np.asarray(stats.counts)
    k = counts.size
    u = sample_un(PartitionStats(stats.counts), params, rng, cdf_tol=1e-6)
    jumps_att = rng.gamma(counts - config.a, 1.0 / (1.0 + u))
    alloc = np.repeat(np.arange(k), counts)
    rng.shuffle(alloc)
    slices = jumps_att[alloc] * (1.0 - rng.random(n))
    floor = float(slices.min())
    jumps_un = _tilted_jumps_above(params, u, floor, rng)
    thetas = model.prior_sampler(rng, k + jumps_un.size)
    state = MixtureState(
        a=config.a, mass=mass, thetas=thetas,
        jumps=np.concatenate([jumps_att, jumps_un]),
        alloc=alloc.astype(np.int64), slices=slices, latent_u=float(u), floor=floor,
    )
    data = draw_data(state, model, rng)
    return state, data


def draw_data(state: MixtureState, model: LikelihoodModel,
              rng: np.random.Generator) -> np.ndarray:
    """x_i ~ g0(. | theta_{s_i})."""
    if model.data_sampler is None:
        raise ValueError("model has no data_sampler; needed for joint simulation")
    return model.data_sampler(state.thetas[state.alloc], rng)


def pp_correlation(sample_a, sample_b) -> float:
    """Pearson correlation of the two empirical CDFs on the pooled grid."""
    grid = np.sort(np.concatenate([sample_a, sample_b]))
    fa = np.searchsorted(np.sort(sample_a), grid, side="right") / len(sample_a)
    fb = np.searchsorted(np.sort(sample_b), grid, side="right") / len(sample_b)
    return float(np.corrcoef(fa, fb)[0, 1])
