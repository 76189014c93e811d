"""The incomplete-gamma-type integral T^{N,K}_{a,M} behind every NGG posterior.

    T^{N,K}_{a,M} = int_M^inf (1 - (M/t)^{1/a})^{N-1} t^{K-1} e^{-t} dt

Three evaluation routes: adaptive quadrature (the trustworthy oracle, in two
parameterizations), the alternating binomial series (seeds, small N only),
and recursions that march a cached table.

The recursion marching K upward is derived by integration by parts,

    T^{N,K+1} = K T^{N,K} + (N-1)/a (T^{N-1,K} - T^{N,K}),   N >= 2,

with all coefficients positive.  Note the published form of this recursion
(coupling (N,K+2) to (N+1,K)) does not verify numerically; the form above
checks against quadrature to 1e-11 cell by cell.  When a = 1/R the table
marches N upward instead via T^{N+1,K} = T^{N,K} - M^R T^{N,K-R} (K > R).

Either march amplifies input error, by up to ~10x per K-column, so the fill
tracks a first-order error bound per cell and recomputes any cell whose bound
crosses the rescue threshold by quadrature.  The provenance map records which
route produced each stored value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .levy_core import NggParams, NumericalError
from .special_math import LogReal, gamma_upper_log, signed_logsumexp

__all__ = ["TakTable", "tak_quadrature", "tak_series", "tak_recursion_fill", "log_T"]

_EPS = float(np.finfo(float).eps)


def _quad_log_integrand(logf, lo, hi, rel_tol, points=None):
    """Integrate exp(logf) on [lo, hi] with the max factored out; returns LogReal."""
    grid = np.linspace(lo, hi, 800)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = logf(grid)
    logs = np.where(np.isfinite(logs), logs, -np.inf)
    shift = float(np.max(logs))
    if shift == -np.inf:
        return LogReal.zero()
    val, err = integrate.quad(lambda t: np.exp(logf(t) - shift), lo, hi,
                              epsabs=0.0, epsrel=rel_tol, limit=400, points=points)
    if val <= 0.0 or err > 50 * rel_tol * val:
        raise NumericalError(
            f"quadrature did not converge: value={val:.3e}, achieved rel err={err / max(val, 1e-300):.1e}, "
            f"requested {rel_tol:.1e}")
    return LogReal(math.log(val) + shift, 1)


def tak_quadrature(n: int, k: int, a: float, mass: float,
                   rel_tol: float = 1e-10, param: str = "direct") -> LogReal:
    """T^{N,K}_{a,M} by adaptive quadrature, integrand evaluated in log domain.

    param="direct" integrates over t on (M, inf); param="substituted" uses
    t = M (1+u)^a, i.e. a M^K int u^{N-1} (1+u)^{Ka-N} e^{-M (1+u)^a} du.
    The two must agree; tests use that as an internal cross-check.
    """
    if n < 1 or k < 1:
        raise ValueError("tak requires N >= 1, K >= 1")
    if not 0 < a < 1 or mass <= 0:
        raise ValueError("tak requires a in (0,1) and M > 0")
    if param == "direct":
        log_m = math.log(mass)

        def logf(t):
            t = np.asarray(t, dtype=float)
            log_t = np.log(t)
            bracket = np.log1p(-np.exp(np.minimum((log_m - log_t) / a, 0.0)))
            return (n - 1) * bracket + (k - 1) * log_t - t

        hi = mass + 60.0 + 6.0 * k + 2.0 * math.sqrt(max(n, 1))
        return _quad_log_integrand(logf, mass, hi, rel_tol)
    if param == "substituted":

        def logf(u):
            u = np.asarray(u, dtype=float)
            return (n - 1) * np.log(u) + (k * a - n) * np.log1p(u) - mass * np.power(1.0 + u, a)

        # restrict to where the integrand is within e^-150 of its peak
        grid = np.exp(np.linspace(math.log(1e-12), math.log(1e14), 4000))
        with np.errstate(divide="ignore"):
            logs = logf(grid)
        alive = np.flatnonzero(logs > np.max(logs) - 150.0)
        lo = grid[max(alive[0] - 1, 0)]
        hi = grid[min(alive[-1] + 1, grid.size - 1)]
        peak = float(grid[int(np.argmax(logs))])
        core = _quad_log_integrand(logf, lo, hi, rel_tol, points=[peak])
        prefix = LogReal(math.log(a) + k * math.log(mass), 1)
        return prefix * core
    raise ValueError(f"unknown parameterization {param!r}")


def tak_series(n: int, k: int, a: float, mass: float,
               n_max_series: int = 60) -> tuple[LogReal, float]:
    """The alternating binomial series for T^{N,K}_{a,M}.

    Returns (value, cancellation diagnostic), the diagnostic being
    largest-term magnitude over result magnitude.  Above ~1e12 the result has
    lost too many digits to trust and callers should fall back to quadrature.

    For N >= K the reduced form with terms
    [prod_{j=1}^{K-1}(j - n/a)] Gamma(1 - n/a, M) is used (the published
    version; its derivation drops boundary terms that only cancel when
    N >= K, so it is wrong outside that range).  For N < K the direct
    binomial expansion with terms Gamma(K - n/a, M) applies for all N, K.
    """
    if n > n_max_series:
        raise ValueError(f"series unstable beyond N={n_max_series}, got N={n}")
    reduced = n >= k
    if reduced:
        for j in range(1, k):
            if abs(j * a - round(j * a)) < 1e-9:
                raise ValueError(f"series requires k*a non-integral for k<K; k={j}, a={a}")
    log_m = math.log(mass)
    log_mags = np.empty(n)
    signs = np.empty(n, dtype=int)
    for i in range(n):
        sign = 1 if i % 2 == 0 else -1
        log_mag = (math.lgamma(n) - math.lgamma(i + 1) - math.lgamma(n - i)
                   + (i / a) * log_m)
        if reduced:
            for j in range(1, k):
                factor = j - i / a
                log_mag += math.log(abs(factor))
                if factor < 0:
                    sign = -sign
            tail = gamma_upper_log(1.0 - i / a, mass)
        else:
            tail = gamma_upper_log(k - i / a, mass)
        log_mag += tail.log_magnitude
        sign *= tail.sign
        log_mags[i] = log_mag
        signs[i] = sign
    result = signed_logsumexp(log_mags, signs)
    if result.sign == 0:
        return result, math.inf
    diagnostic = math.exp(min(float(np.max(log_mags)) - result.log_magnitude, 700.0))
    return result, diagnostic


@dataclass
class TakTable:
    """Consistency-checked cache of log T^{N,K} for one (a, M).

    Every insert enforces the Gamma(K, M) upper bound and strict monotonicity
    (decreasing in N, increasing in K); rel_errors carries the first-order
    error bound the recursion fill propagates.
    """

    params: NggParams
    values: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    rel_errors: dict = field(default_factory=dict)
    _log_gamma_bounds: dict = field(default_factory=dict)

    def _bound(self, k: int) -> float:
        if k not in self._log_gamma_bounds:
            self._log_gamma_bounds[k] = gamma_upper_log(float(k), self.params.mass).log_magnitude
        return self._log_gamma_bounds[k]

    def insert(self, n: int, k: int, value: LogReal, source: str, rel_error: float) -> None:
        if value.sign != 1:
            raise NumericalError(f"T^{{{n},{k}}} must be positive, got {value!r}")
        log_v = value.log_magnitude
        if log_v > self._bound(k) + 1e-9:
            raise NumericalError(
                f"T^{{{n},{k}}} violates the Gamma(K,M) bound: {log_v:.12g} > {self._bound(k):.12g}")
        prev_n = self.values.get((n - 1, k))
        if prev_n is not None and log_v >= prev_n.log_magnitude + 1e-9:
            raise NumericalError(f"T^{{{n},{k}}} not decreasing in N")
        prev_k = self.values.get((n, k - 1))
        if prev_k is not None and log_v <= prev_k.log_magnitude - 1e-9:
            raise NumericalError(f"T^{{{n},{k}}} not increasing in K")
        self.values[(n, k)] = value
        self.provenance[(n, k)] = source
        self.rel_errors[(n, k)] = rel_error

    def get(self, n: int, k: int) -> LogReal:
        return self.values[(n, k)]

    def ensure(self, n_max: int, k_max: int, **kwargs) -> "TakTable":
        have = all((n, k) in self.values for n in (1, n_max) for k in (1, k_max))
        if not have:
            tak_recursion_fill(self, n_max, k_max, **kwargs)
        return self

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["N", "K", "log_value", "method"])
            for (n, k) in sorted(self.values):
                writer.writerow([n, k, repr(self.values[(n, k)].log_magnitude),
                                 self.provenance[(n, k)]])

    @classmethod
    def from_csv(cls, path, params: NggParams) -> "TakTable":
        table = cls(params)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                key = (int(row["N"]), int(row["K"]))
                table.values[key] = LogReal(float(row["log_value"]), 1)
                table.provenance[key] = row["method"]
                table.rel_errors[key] = math.nan
        return table


def _reciprocal_integer(a: float) -> int | None:
    r = 1.0 / a
    if abs(r - round(r)) < 1e-9 and round(r) > 1:
        return int(round(r))
    return None


def _seed(table: TakTable, n: int, k: int, quad_rel: float, series_diag_max: float = 1e4) -> None:
    a, mass = table.params.a, table.params.mass
    if n == 1:
        # bracket factor is 1: T^{1,K} = Gamma(K, M), which is the series' single term
        table.insert(n, k, gamma_upper_log(float(k), mass), "series", 4 * _EPS)
        return
    try:
        value, diag = tak_series(n, k, a, mass)
        if diag < series_diag_max:
            table.insert(n, k, value, "series", max(diag * _EPS, 4 * _EPS))
            return
    except ValueError:
        pass
    table.insert(n, k, tak_quadrature(n, k, a, mass, rel_tol=quad_rel), "quadrature", quad_rel)


def tak_recursion_fill(table: TakTable, n_max: int, k_max: int,
                       rescue_rel: float = 1e-7, quad_rel: float = 1e-12) -> TakTable:
    """Fill the table for all N <= n_max, K <= k_max.

    Seeds rows/columns come from the series (when its cancellation diagnostic
    is tight) or quadrature; the recursion march then fills the rest, and any
    cell whose propagated error bound crosses rescue_rel is recomputed by
    quadrature, resetting the growth.
    """
    a, mass = table.params.a, table.params.mass
    r = _reciprocal_integer(a)
    for k in range(1, k_max + 1):
        if (1, k) not in table.values:
            _seed(table, 1, k, quad_rel)
    for n in range(2, n_max + 1):
        for k in (1, 2):
            if k <= k_max and (n, k) not in table.values:
                _seed(table, n, k, quad_rel)
    if r is not None:
        # columns 3..R have no recursion source; seed them directly
        for k in range(3, min(r, k_max) + 1):
            for n in range(2, n_max + 1):
                if (n, k) not in table.values:
                    table.insert(n, k, tak_quadrature(n, k, a, mass, rel_tol=quad_rel),
                                 "quadrature", quad_rel)
        log_mr = r * math.log(mass)
        for n in range(2, n_max + 1):
            for k in range(r + 1, k_max + 1):
                if (n, k) in table.values:
                    continue
                t_up = table.get(n - 1, k)
                t_low = table.get(n - 1, k - r)
                value = t_up - LogReal(log_mr + t_low.log_magnitude, t_low.sign)
                if value.sign != 1:
                    value = None
                else:
                    ratio_up = math.exp(t_up.log_magnitude - value.log_magnitude)
                    ratio_low = math.exp(log_mr + t_low.log_magnitude - value.log_magnitude)
                    rel = (table.rel_errors[(n - 1, k)] * ratio_up
                           + table.rel_errors[(n - 1, k - r)] * ratio_low
                           + _EPS * (ratio_up + ratio_low))
                if value is None or rel > rescue_rel:
                    table.insert(n, k, tak_quadrature(n, k, a, mass, rel_tol=quad_rel),
                                 "quadrature", quad_rel)
                else:
                    table.insert(n, k, value, "recursionN", rel)
        return table
    for k in range(2, k_max):
        inv_a = 1.0 / a
        for n in range(2, n_max + 1):
            if (n, k + 1) in table.values:
                continue
            t_nk = table.get(n, k)
            t_up = table.get(n - 1, k)
            diff = t_up - t_nk  # positive: T decreases in N
            term1 = LogReal(math.log(k) + t_nk.log_magnitude, 1)
            term2 = LogReal(math.log((n - 1) * inv_a) + diff.log_magnitude, diff.sign)
            value = term1 + term2
            ok = value.sign == 1 and diff.sign == 1
            if ok:
                amp = math.exp(math.log((n - 1) * inv_a) + t_up.log_magnitude
                               - value.log_magnitude)
                r1 = math.exp(math.log(k) + t_nk.log_magnitude - value.log_magnitude)
                rel = (table.rel_errors[(n, k)] * (r1 + amp)
                       + table.rel_errors[(n - 1, k)] * amp + 4 * _EPS * (1.0 + amp))
            if not ok or rel > rescue_rel:
                table.insert(n, k + 1, tak_quadrature(n, k + 1, a, mass, rel_tol=quad_rel),
                             "quadrature", quad_rel)
            else:
                table.insert(n, k + 1, value, "recursionK", rel)
    return table


_quad_cache: dict = {}


def log_T(n: int, k: int, params: NggParams, table: TakTable | None = None,
          rel_tol: float = 1e-10) -> float:
    """log T^{N,K} for posterior formulas: from a filled table if given,
    else memoized quadrature."""
    if table is not None:
        table.ensure(max(n, 1), max(k, 1))
        return table.get(n, k).log_magnitude
    key = (n, k, params.a, params.mass, rel_tol)
    if key not in _quad_cache:
        if len(_quad_cache) > 200_000:
            _quad_cache.clear()
        _quad_cache[key] = tak_quadrature(n, k, params.a, params.mass, rel_tol=rel_tol).log_magnitude
    return _quad_cache[key]
