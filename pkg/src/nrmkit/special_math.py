"""Signed log-domain scalars and the special functions everything else leans on.

The incomplete-gamma helpers extend scipy's positive-argument routines to
negative first arguments with the downward recursion

    Gamma(x, z) = (Gamma(x+1, z) - z^x e^{-z}) / x,

equivalently Q(x, z) = Q(x+1, z) - z^x e^{-z} / Gamma(x+1), applied until the
first argument is positive.  For the long chains needed by the alternating
series in :mod:`nrmkit.tak` the recursion runs in signed log space so it never
overflows.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy import special as sp

__all__ = [
    "LogReal",
    "signed_logsumexp",
    "gamma_upper_log",
    "reg_inc_gamma_q",
    "abs_q_neg",
    "rising_factorial_log",
    "generalized_stirling",
]

_NEG_INF = float("-inf")


class LogReal:
    """A real number stored as (sign, log |value|).

    sign is +1, -1 or 0; when sign == 0 the magnitude is ignored and the
    represented value is exactly zero.
    """

    __slots__ = ("log_magnitude", "sign")

    def __init__(self, log_magnitude: float, sign: int):
        if sign not in (-1, 0, 1):
            raise ValueError(f"sign must be -1, 0 or +1, got {sign}")
        if sign == 0:
            log_magnitude = _NEG_INF
        self.log_magnitude = float(log_magnitude)
        self.sign = int(sign)

    @classmethod
    def from_float(cls, x: float) -> "LogReal":
        if x == 0.0:
            return cls(_NEG_INF, 0)
        return cls(math.log(abs(x)), 1 if x > 0 else -1)

    @classmethod
    def zero(cls) -> "LogReal":
        return cls(_NEG_INF, 0)

    @classmethod
    def one(cls) -> "LogReal":
        return cls(0.0, 1)

    def to_float(self) -> float:
        if self.sign == 0:
            return 0.0
        if self.log_magnitude > 709.0:
            return self.sign * math.inf
        return self.sign * math.exp(self.log_magnitude)

    def __mul__(self, other: "LogReal") -> "LogReal":
        if self.sign == 0 or other.sign == 0:
            return LogReal.zero()
        return LogReal(self.log_magnitude + other.log_magnitude, self.sign * other.sign)

    def __truediv__(self, other: "LogReal") -> "LogReal":
        if other.sign == 0:
            raise ZeroDivisionError("LogReal division by zero")
        if self.sign == 0:
            return LogReal.zero()
        return LogReal(self.log_magnitude - other.log_magnitude, self.sign * other.sign)

    def __neg__(self) -> "LogReal":
        return LogReal(self.log_magnitude, -self.sign)

    def __add__(self, other: "LogReal") -> "LogReal":
        if self.sign == 0:
            return other
        if other.sign == 0:
            return self
        hi, lo = (self, other) if self.log_magnitude >= other.log_magnitude else (other, self)
        delta = lo.log_magnitude - hi.log_magnitude  # <= 0
        if self.sign == other.sign:
            return LogReal(hi.log_magnitude + math.log1p(math.exp(delta)), hi.sign)
        diff = -math.expm1(delta)  # 1 - exp(delta) in [0, 1]
        if diff == 0.0:
            return LogReal.zero()
        return LogReal(hi.log_magnitude + math.log(diff), hi.sign)

    def __sub__(self, other: "LogReal") -> "LogReal":
        return self + (-other)

    def scaled(self, factor: int) -> "LogReal":
        """Multiply by an integer power scale exp(factor) keeping the sign."""
        if self.sign == 0:
            return self
        return LogReal(self.log_magnitude + factor, self.sign)

    def __repr__(self) -> str:
        return f"LogReal(log={self.log_magnitude:.6g}, sign={self.sign:+d})"


def signed_logsumexp(log_mags, signs) -> LogReal:
    """Sum of signed log-domain terms, returned as a LogReal.

    Works by separating positive and negative terms, logsumexp-ing each pile
    and combining.  The ratio max-term / |result| is the caller's cancellation
    diagnostic.
    """
    log_mags = np.asarray(log_mags, dtype=float)
    signs = np.asarray(signs)
    pos = signs > 0
    neg = signs < 0
    lp = sp.logsumexp(log_mags[pos]) if pos.any() else _NEG_INF
    ln = sp.logsumexp(log_mags[neg]) if neg.any() else _NEG_INF
    if lp == _NEG_INF and ln == _NEG_INF:
        return LogReal.zero()
    return LogReal(lp, 1) + LogReal(ln, -1)


def _log_gamma_upper_positive(x: float, z: float) -> float:
    """log Gamma(x, z) for x > 0, robust when gammaincc underflows."""
    q = sp.gammaincc(x, z)
    if q > 1e-280:
        return math.log(q) + sp.gammaln(x)
    # deep tail: Gamma(x,z) ~ z^{x-1} e^{-z} (1 + (x-1)/z + ...)
    ratio = 1.0
    term = 1.0
    for j in range(1, 40):
        term *= (x - j) / z
        ratio += term
        if abs(term) < 1e-17 * abs(ratio):
            break
    return (x - 1.0) * math.log(z) - z + math.log(ratio)


def _log_e1(z: float) -> float:
    """log E_1(z) = log Gamma(0, z), robust for large z."""
    e1 = sp.exp1(z)
    if e1 > 1e-280:
        return math.log(e1)
    # continued fraction E_1(z) = e^{-z}/(z+1 - 1/(z+3 - 4/(z+5 - ...)))
    cf = 0.0
    for k in range(60, 0, -1):
        cf = k * k / (z + 2 * k + 1 - cf)
    return -z - math.log(z + 1 - cf)


def gamma_upper_log(x: float, z: float) -> LogReal:
    """Upper incomplete gamma Gamma(x, z) for any real x and z > 0, as a LogReal.

    For x <= 0 the downward recursion is applied in signed log space starting
    from a positive first argument (or from Gamma(0, z) = E_1(z) when x is a
    non-positive integer).
    """
    if z <= 0:
        raise ValueError(f"gamma_upper_log requires z > 0, got z={z}")
    if x > 0:
        return LogReal(_log_gamma_upper_positive(x, z), 1)
    n_int = round(x)
    is_integer = abs(x - n_int) < 1e-12 * max(1.0, abs(x))
    if is_integer:
        steps = int(-n_int)
        cur = LogReal(_log_e1(z), 1)
        top = 0.0
    else:
        steps = int(math.ceil(-x))
        top = x + steps  # in (0, 1)
        cur = LogReal(_log_gamma_upper_positive(top, z), 1)
    # Gamma(s-1, z) = (Gamma(s, z) - z^{s-1} e^{-z}) / (s - 1)
    log_z = math.log(z)
    for j in range(1, steps + 1):
        s1 = (top if not is_integer else 0.0) - j  # target argument s-1
        power = LogReal(s1 * log_z - z, 1)
        num = cur - power
        cur = num / LogReal.from_float(s1)
    return cur


def reg_inc_gamma_q(x: float, y: float) -> float:
    """Regularized upper incomplete gamma Q(x, y) = Gamma(x, y)/Gamma(x).

    Supports negative non-integer first arguments through the recursion
    Q(x, y) = Q(x+1, y) - y^x e^{-y} / Gamma(x+1), applied repeatedly until
    the first argument is positive.
    """
    if y <= 0:
        raise ValueError(f"Q(x, y) requires y > 0, got y={y}")
    if x <= 0 and abs(x - round(x)) < 1e-12 * max(1.0, abs(x)):
        raise ValueError(f"Q(x, y) undefined for non-positive integer x={x}")
    if x > 0:
        return float(sp.gammaincc(x, y))
    q = float(sp.gammaincc(x + math.ceil(-x) + 1, y))
    steps = int(math.ceil(-x)) + 1
    for j in range(steps, 0, -1):
        s = x + j  # current argument being stepped down from
        # Q(s-1, y) = Q(s, y) - y^{s-1} e^{-y} / Gamma(s)
        log_term = (s - 1.0) * math.log(y) - y - sp.gammaln(s)
        q = q - sp.gammasgn(s) * math.exp(log_term)
    return q


def _abs_q_neg_cf(a, z):
    """|Q(-a, z)| via a continued fraction for Gamma(-a, z); needs z >~ 20."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    s = -a
    cf = np.zeros(np.broadcast_shapes(a.shape, z.shape))
    for k in range(64, 0, -1):
        cf = k * (k - s) / (z + 2 * k + 1 - s - cf)
    log_gamma_upper = s * np.log(z) - z - np.log(z + 1 - s - cf)
    # |Gamma(-a)| = Gamma(1-a)/a
    log_abs_gamma = sp.gammaln(1.0 - a) - np.log(a)
    return np.exp(log_gamma_upper - log_abs_gamma)


def abs_q_neg(a, z):
    """|Q(-a, z)| for a in (0, 1), vectorized over z.

    Equals the unit-mass NGG tail integral int_z^inf rho_a(dt).  Uses the
    one-step recursion for moderate z and a continued fraction in the far
    tail where the recursion's two terms cancel.
    """
    a_arr = np.asarray(a, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr <= 0):
        raise ValueError("abs_q_neg requires z > 0")
    out = np.empty(np.broadcast_shapes(a_arr.shape, z_arr.shape))
    a_b, z_b = np.broadcast_arrays(a_arr, z_arr)
    near = z_b <= 20.0
    if near.any():
        an, zn = a_b[near], z_b[near]
        direct = np.exp(-an * np.log(zn) - zn - sp.gammaln(1.0 - an))
        out[near] = direct - sp.gammaincc(1.0 - an, zn)
    if (~near).any():
        out[~near] = _abs_q_neg_cf(a_b[~near], z_b[~near])
    if np.isscalar(a) and np.isscalar(z):
        return float(out)
    return out


def rising_factorial_log(x: float, n: int) -> LogReal:
    """Pochhammer symbol (x)_n = x (x+1) ... (x+n-1) as a LogReal; (x)_0 = 1."""
    if n < 0:
        raise ValueError("rising_factorial_log requires n >= 0")
    if n == 0:
        return LogReal.one()
    if x > 0:
        return LogReal(sp.gammaln(x + n) - sp.gammaln(x), 1)
    log_mag = 0.0
    sign = 1
    for j in range(n):
        f = x + j
        if f == 0.0:
            return LogReal.zero()
        log_mag += math.log(abs(f))
        sign *= 1 if f > 0 else -1
    return LogReal(log_mag, sign)


class _StirlingCache:
    """Triangular table of log S^N_{k,a}, grown on demand, one per value of a.

    Safe for concurrent reads; growth is serialized by a lock.  All entries
    are positive for a in (0, 1), so plain log storage suffices.
    """

    def __init__(self, a: float):
        self.a = a
        self.rows = [np.array([0.0])]  # rows[N-1][k-1] = log S^{N}_{k,a}
        self.lock = threading.Lock()

    def grow_to(self, n_target: int) -> None:
        with self.lock:
            while len(self.rows) < n_target:
                prev = self.rows[-1]
                n = len(self.rows)  # S^{n+1} from S^n
                nxt = np.full(n + 1, -np.inf)
                ks = np.arange(1, n + 1)
                shifted = np.concatenate(([-np.inf], prev[:-1]))  # S^n_{k-1}
                factor = np.log(n - ks * self.a)  # n - k a > 0 for k <= n, a < 1
                nxt[: n] = np.logaddexp(shifted, factor + prev)
                nxt[n] = 0.0  # S^{n+1}_{n+1} = 1
                self.rows.append(nxt)


_stirling_caches: dict[float, _StirlingCache] = {}
_stirling_lock = threading.Lock()


def generalized_stirling(n: int, k: int, a: float) -> LogReal:
    """Generalized Stirling number S^N_{k,a} by the triangular recursion.

    S^{N+1}_{k,a} = S^N_{k-1,a} + (N - k a) S^N_{k,a},  S^1_{1,a} = 1,
    S^N_{0,a} = 0.  Equals the sum over set partitions of {1..N} into k
    blocks of prod_blocks (1-a)_{|block|-1}.
    """
    if not 0 < a < 1:
        raise ValueError(f"generalized_stirling requires a in (0,1), got {a}")
    if n < 1 or k < 1 or k > n:
        raise ValueError(f"generalized_stirling requires 1 <= k <= N, got N={n}, k={k}")
    with _stirling_lock:
        cache = _stirling_caches.setdefault(a, _StirlingCache(a))
    cache.grow_to(n)
    return LogReal(float(cache.rows[n - 1][k - 1]), 1)
