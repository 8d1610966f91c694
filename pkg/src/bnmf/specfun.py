"""Scalar special functions used throughout the package.

This module collects the Gamma/Pochhammer helpers, Gegenbauer polynomials
(both the classical normalization and the version scaled to equal 1 at
x = 1), the harmonic dimensions of the sphere that turn Gegenbauer
coefficients into second moments, and the arccosine kernel family J_alpha
together with its extension J_phi to positive-homogeneous activations.

Everything here is a pure function of its arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gammaln

__all__ = [
    "c_alpha",
    "log_poch",
    "poch",
    "gegenbauer",
    "gegenbauer_normalized",
    "gegenbauer_norm",
    "zonal_normalizer",
    "log_harmonic_dim",
    "kappa2",
    "kappa0",
    "kappa_m2",
    "j_alpha",
    "j_alpha_integral",
    "j_alpha_deriv",
    "j_alpha_deriv_lifted",
    "j_phi",
    "j_phi_deriv",
    "k_alpha_b",
    "GegenbauerBasis",
    "PosHomDecomposition",
]

# Integer degrees up to this bound go through the closed forms and the
# three-term recurrence; everything else through adaptive quadrature.
RECURRENCE_MAX_DEGREE = 30
# Offset used in place of c = +-1 for formulas singular at the endpoints.
ENDPOINT_OFFSET = 1e-7


def _check_alpha(alpha: float) -> None:
    if not alpha > -0.5:
        raise ValueError(f"weight/degree alpha must exceed -1/2, got {alpha!r}")


def _check_unit_interval(c: float, name: str = "c") -> float:
    c = float(c)
    if not (-1.0 - 1e-12 <= c <= 1.0 + 1e-12) or math.isnan(c):
        raise ValueError(f"{name} must lie in [-1, 1], got {c!r}")
    return min(1.0, max(-1.0, c))


def c_alpha(alpha: float) -> float:
    """Second moment constant ``E[relu(x)^(2 alpha)]`` for standard normal x."""
    _check_alpha(alpha)
    return math.exp((alpha - 1.0) * math.log(2.0) + math.lgamma(alpha + 0.5)) / math.sqrt(math.pi)


def log_poch(a, n):
    """Logarithm of the rising factorial Gamma(a + n) / Gamma(a)."""
    return gammaln(np.add(a, n)) - gammaln(a)


def poch(a, n):
    """Rising factorial Poch(a, n) = Gamma(a + n) / Gamma(a), via log-Gamma."""
    return np.exp(log_poch(a, n))


# ---------------------------------------------------------------------------
# Gegenbauer polynomials
# ---------------------------------------------------------------------------

def gegenbauer(alpha: float, l: int, x: float) -> float:
    """Classical Gegenbauer polynomial C^alpha_l(x) by the upward recurrence.

    >>> gegenbauer(1.0, 1, 0.5)
    1.0
    """
    _check_alpha(alpha)
    if l < 0 or int(l) != l:
        raise ValueError(f"degree l must be a nonnegative integer, got {l!r}")
    x = float(x)
    if not -1.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [-1, 1], got {x!r}")
    l = int(l)
    if l == 0:
        return 1.0
    prev, cur = 1.0, 2.0 * alpha * x
    for n in range(2, l + 1):
        prev, cur = cur, (2.0 * (n - 1 + alpha) * x * cur - (n - 2 + 2.0 * alpha) * prev) / n
    return cur


def gegenbauer_norm(alpha: float, n: int) -> float:
    """Integral of C^alpha_n(x)^2 (1 - x^2)^(alpha - 1/2) over [-1, 1]."""
    _check_alpha(alpha)
    if alpha == 0.0:
        # C^0_n vanishes identically for n >= 1 under the classical convention.
        return math.pi if n == 0 else 0.0
    log_val = (
        math.log(math.pi)
        + (1.0 - 2.0 * alpha) * math.log(2.0)
        + math.lgamma(n + 2.0 * alpha)
        - math.lgamma(n + 1.0)
        - math.log(n + alpha)
        - 2.0 * math.lgamma(alpha)
    )
    return math.exp(log_val)


def gegenbauer_normalized(lam: float, l_max: int, x) -> np.ndarray:
    """Table of P_l(x) = C^lam_l(x) / C^lam_l(1) for l = 0..l_max.

    The normalized polynomials satisfy |P_l| <= 1 on [-1, 1], which keeps the
    recurrence free of the binomial growth of C^lam_l(1) when lam is large.
    For lam = 0 the limit is the Chebyshev polynomial T_l.

    Returns an array of shape ``(l_max + 1,) + np.shape(x)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((l_max + 1,) + x.shape)
    out[0] = 1.0
    if l_max >= 1:
        out[1] = x
    for n in range(2, l_max + 1):
        out[n] = (2.0 * (n - 1 + lam) * x * out[n - 1] - (n - 1) * out[n - 2]) / (n - 1 + 2.0 * lam)
    return out


def zonal_normalizer(B: int, l):
    """c_{B,l} = (B - 2) / (B + 2l - 2), the zonal harmonic normalizer on S^(B-1)."""
    return (B - 2.0) / (B + 2.0 * np.asarray(l, dtype=float) - 2.0)


def log_harmonic_dim(B: int, l):
    """log of c_{B-1,l}^{-1} C^{(B-3)/2}_l(1) for a batch of size B.

    This is the dimension of degree-l spherical harmonics on S^(B-2); it is the
    factor that turns a Gegenbauer coefficient a_l into its contribution
    a_l^2 * d_l to a second moment.
    """
    if B < 4:
        raise ValueError("harmonic dimensions are tabulated for B >= 4")
    l = np.asarray(l, dtype=float)
    # C^lam_l(1) = binom(l + 2 lam - 1, l) with 2 lam = B - 3.
    log_c1 = gammaln(l + B - 3.0) - gammaln(l + 1.0) - gammaln(B - 3.0)
    return np.log(B + 2.0 * l - 3.0) - math.log(B - 3.0) + log_c1


def kappa2(n, lam):
    """Coefficient of C_{n+2} in the expansion of x^2 C^lam_n."""
    return (n + 1.0) * (n + 2.0) / (4.0 * (n + lam) * (n + 1.0 + lam))


def kappa0(n, lam):
    """Coefficient of C_n in the expansion of x^2 C^lam_n."""
    first = (n + 1.0) * (n + 2.0 * lam) / (4.0 * (n + lam) * (n + 1.0 + lam))
    if n == 0:
        return first
    return first + (n - 1.0 + 2.0 * lam) * n / (4.0 * (n + lam) * (n - 1.0 + lam))


def kappa_m2(n, lam):
    """Coefficient of C_{n-2} in the expansion of x^2 C^lam_n (zero for n < 2)."""
    if n < 2:
        return 0.0
    return (n - 1.0 + 2.0 * lam) * (n - 2.0 + 2.0 * lam) / (4.0 * (n + lam) * (n - 1.0 + lam))


@dataclass(frozen=True)
class GegenbauerBasis:
    """Gegenbauer polynomials of a fixed weight, truncated at degree ``l_max``."""

    alpha: float
    l_max: int

    def __post_init__(self):
        _check_alpha(self.alpha)
        if self.l_max < 0:
            raise ValueError("l_max must be nonnegative")

    @classmethod
    def for_batch(cls, B: int, l_max: int) -> "GegenbauerBasis":
        return cls((B - 3) / 2.0, l_max)

    def evaluate(self, x) -> np.ndarray:
        """Classical C^alpha_l(x) for all l <= l_max, shape (l_max + 1, ...)."""
        x = np.asarray(x, dtype=float)
        out = np.empty((self.l_max + 1,) + x.shape)
        out[0] = 1.0
        if self.l_max >= 1:
            out[1] = 2.0 * self.alpha * x
        for n in range(2, self.l_max + 1):
            out[n] = (2.0 * (n - 1 + self.alpha) * x * out[n - 1]
                      - (n - 2 + 2.0 * self.alpha) * out[n - 2]) / n
        return out

    def normalized(self, x) -> np.ndarray:
        return gegenbauer_normalized(self.alpha, self.l_max, x)

    def norm(self, n: int) -> float:
        return gegenbauer_norm(self.alpha, n)

    def value_at_one(self, n: int) -> float:
        """C^alpha_n(1) = binom(n + 2 alpha - 1, n)."""
        if n == 0:
            return 1.0
        return math.exp(math.lgamma(n + 2.0 * self.alpha) - math.lgamma(n + 1.0)
                        - math.lgamma(2.0 * self.alpha)) if self.alpha > 0 else 0.0


# ---------------------------------------------------------------------------
# Arccosine kernels
# ---------------------------------------------------------------------------

def _j_closed(n: int, c: float) -> float:
    s = math.sqrt(max(0.0, 1.0 - c * c))
    t = math.pi - math.acos(c)
    if n == 0:
        return t / math.pi
    if n == 1:
        return (s + t * c) / math.pi
    if n == 2:
        return (3.0 * c * s + t * (1.0 + 2.0 * c * c)) / (3.0 * math.pi)
    raise ValueError(n)


def _j_recurrence(n: int, c: float) -> float:
    if n <= 2:
        return _j_closed(n, c)
    jm2, jm1 = _j_closed(1, c), _j_closed(2, c)
    for a in range(3, n + 1):
        jm2, jm1 = jm1, c * jm1 + (a - 1.0) ** 2 / ((2.0 * a - 1.0) * (2.0 * a - 3.0)) * (1.0 - c * c) * jm2
    return jm1


def j_alpha_integral(alpha: float, c: float) -> float:
    """J_alpha(c) from its defining one-dimensional integral.

    Uses adaptive Gauss-Kronrod quadrature (``scipy.integrate.quad``) with
    absolute tolerance 1e-12.  The integrand concentrates near eta = 0 as
    c -> 1, so the interval is split at eta = theta.
    """
    _check_alpha(alpha)
    c = _check_unit_interval(c)
    if c == 1.0:
        return 1.0
    if c == -1.0:
        return 0.0
    theta = math.acos(c)
    log_pref = (math.lgamma(alpha + 1.0) - math.log(2.0 * math.pi)
                - math.log(c_alpha(alpha)) + (2.0 * alpha + 1.0) * math.log(math.sin(theta)))

    def integrand(eta):
        ce = math.cos(eta)
        return ce ** alpha / (1.0 - c * ce) ** (1.0 + alpha)

    pts = [theta] if 0.0 < theta < math.pi / 2 else None
    # The integral scales like sin(theta)^-(2 alpha + 1); rescale the absolute
    # tolerance so the final product meets 1e-12.
    scale = math.exp(-log_pref)
    val, _ = integrate.quad(integrand, 0.0, math.pi / 2, points=pts,
                            epsabs=1e-12 * scale, epsrel=1e-13, limit=400)
    return math.exp(log_pref) * val


def j_alpha(alpha: float, c: float) -> float:
    """Arccosine kernel J_alpha(c), normalized so that J_alpha(1) = 1.

    For standard normals x, y with correlation c,
    ``E[relu(x)^alpha relu(y)^alpha] = c_alpha(alpha) * J_alpha(c)``.
    Integer degrees up to 30 use closed forms and the three-term recurrence;
    other degrees fall back to :func:`j_alpha_integral`.

    >>> round(j_alpha(1, 0.0) * math.pi, 12)
    1.0
    """
    _check_alpha(alpha)
    c = _check_unit_interval(c)
    if float(alpha).is_integer() and 0 <= alpha <= RECURRENCE_MAX_DEGREE:
        return _j_recurrence(int(alpha), c)
    return j_alpha_integral(alpha, c)


def j_alpha_deriv(alpha: float, c: float) -> float:
    """Derivative of J_alpha at c via J'_alpha = alpha^2 / (2 alpha - 1) J_{alpha-1}."""
    if not alpha > 0.5:
        raise ValueError(f"j_alpha_deriv requires alpha > 1/2, got {alpha!r}")
    return alpha * alpha / (2.0 * alpha - 1.0) * j_alpha(alpha - 1.0, c)


def j_alpha_deriv_lifted(alpha: float, c: float) -> float:
    """Derivative of J_alpha from the degree-raised identity.

    Computes (2 alpha + 1)(1 - c^2)^{-1}(J_{alpha+1}(c) - c J_alpha(c)).  At
    c = +-1 the formula is 0/0; it is replaced by its value at
    c = +-(1 - 1e-7), which approximates the one-sided limit.
    """
    _check_alpha(alpha)
    c = _check_unit_interval(c)
    if abs(c) >= 1.0 - ENDPOINT_OFFSET:
        c = math.copysign(1.0 - ENDPOINT_OFFSET, c)
    return (2.0 * alpha + 1.0) * (j_alpha(alpha + 1.0, c) - c * j_alpha(alpha, c)) / (1.0 - c * c)


@dataclass(frozen=True)
class PosHomDecomposition:
    """phi(x) = a relu(x)^degree - b relu(-x)^degree for x != 0."""

    degree: float
    pos_coeff: float
    neg_coeff: float

    def __post_init__(self):
        _check_alpha(self.degree)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        al = self.degree
        return (self.pos_coeff * np.where(x > 0, np.abs(x) ** al, 0.0)
                - self.neg_coeff * np.where(x < 0, np.abs(x) ** al, 0.0))

    def j(self, c: float) -> float:
        return j_phi(self, c)

    def j_deriv(self, c: float) -> float:
        return j_phi_deriv(self, c)


def j_phi(decomp: PosHomDecomposition, c: float) -> float:
    """J_phi(c) = (a^2 + b^2) J_alpha(c) - 2ab J_alpha(-c)."""
    a, b, al = decomp.pos_coeff, decomp.neg_coeff, decomp.degree
    val = (a * a + b * b) * j_alpha(al, c)
    if b != 0.0 and a != 0.0:
        val -= 2.0 * a * b * j_alpha(al, -c)
    return val


def j_phi_deriv(decomp: PosHomDecomposition, c: float) -> float:
    """Derivative of J_phi, (a^2 + b^2) J'_alpha(c) + 2ab J'_alpha(-c)."""
    a, b, al = decomp.pos_coeff, decomp.neg_coeff, decomp.degree
    val = (a * a + b * b) * j_alpha_deriv(al, c)
    if b != 0.0 and a != 0.0:
        val += 2.0 * a * b * j_alpha_deriv(al, -c)
    return val


@lru_cache(maxsize=1024)
def k_alpha_b(alpha: float, B: int) -> float:
    """K_{alpha,B} = c_alpha ((B-1)/2)^alpha / Poch((B-1)/2, alpha).

    Tends to c_alpha as B grows; equals 1/2 for alpha = 1 at every B.
    """
    _check_alpha(alpha)
    h = (B - 1) / 2.0
    return c_alpha(alpha) * math.exp(alpha * math.log(h) - float(log_poch(h, alpha)))
