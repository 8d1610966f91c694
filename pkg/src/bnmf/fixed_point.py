"""Fixed points of the batchnorm covariance recursion.

The forward recursion Sigma^l = V(Sigma^{l-1}) maps every BSB1 matrix (one
diagonal value, one off-diagonal value) to the same BSB1 image, so the BSB1
fixed point needs a single evaluation of the V-transform.  Three routes are
offered:

``laplace``
    closed form K_{alpha,B} J_phi(.) for positive-homogeneous phi;
``spherical``
    one- and two-angle quadrature over the sphere;
``gegenbauer``
    quadratic forms in the Gegenbauer coefficients of phi(sqrt(B-1) x).

The module also provides the cross-batch constant, the closed-form
rank-one-projected fixed point with one distinguished sample, and raw
iteration of the forward map from an arbitrary covariance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import kernels
from .kernels import QuadratureSpec, bsb1, mean_center
from .nonlin import NonlinearityDescriptor, project_on_sphere
from .quadrature import single_quadrature
from .specfun import c_alpha, gegenbauer_normalized, j_phi, log_harmonic_dim, log_poch

__all__ = [
    "Bsb1Point",
    "CrossBatchPoint",
    "Bsb2HatPoint",
    "ForwardTrajectory",
    "MethodInapplicableError",
    "bsb1_fixed_point",
    "cross_batch_constant",
    "bsb2_hat1_fixed_point",
    "iterate_forward",
    "offdiag_series",
    "METHODS",
]

METHODS = ("laplace", "spherical", "gegenbauer")


class MethodInapplicableError(ValueError):
    """The requested analytic route does not apply to this activation."""


def check_batch_size(B: int, minimum: int = 3) -> None:
    if B <= 2:
        raise ValueError(
            f"batch size B={B} is degenerate: with B = 2 batchnorm outputs are constant "
            "+-1 patterns and all gradients vanish; use B >= 3")
    if B < minimum:
        raise ValueError(f"this computation needs B >= {minimum}, got B={B}")


@dataclass
class Bsb1Point:
    """BSB1 fixed point q* [(1 - c*) I + c* 11^T]."""

    B: int
    q_star: float
    c_star: float
    upsilon_star: float
    nu_star: float
    method: str
    diagnostics: dict = field(default_factory=dict)

    def matrix(self) -> np.ndarray:
        return bsb1(self.B, self.q_star, self.nu_star)


@dataclass
class CrossBatchPoint:
    """Cross-batch constant c*_CB alongside the within-batch BSB1 point."""

    bsb1: Bsb1Point
    c_cb: float
    c_cb_gegenbauer: float = float("nan")
    c_cb_closed_form: Optional[float] = None


@dataclass
class Bsb2HatPoint:
    """Fixed point with one distinguished sample: [[d, c 1^T], [c 1, b 11^T]]."""

    B: int
    d_star: float
    c_star: float
    b_star: float
    lambda_star: float

    def matrix(self) -> np.ndarray:
        B = self.B
        m = np.full((B, B), self.b_star)
        m[0, 1:] = m[1:, 0] = self.c_star
        m[0, 0] = self.d_star
        return m

    @property
    def q_hat(self) -> np.ndarray:
        B = self.B
        q = np.full(B, -1.0 / (B - 1))
        q[0] = 1.0
        return q * math.sqrt((B - 1) / B)


def offdiag_series(functions, B: int, rho: float, breaks, spec: QuadratureSpec,
                   degree_weight=None):
    """Funk-Hecke sums sum_l w(l) d_l f_l g_l P_l(rho) for all pairs of ``functions``.

    Each function f(x) on [-1, 1] is projected on the normalized Gegenbauer
    basis; with w = 1 the pair sum equals E[f(u1.v) g(u2.v)] for unit vectors
    with u1.u2 = rho.  ``degree_weight`` maps an array of degrees to extra
    per-degree factors.  The truncation order starts at ``spec.l_max`` and
    doubles until the matrix of sums changes by less than ``spec.tolerance``
    (relative to its largest entry) or ``spec.l_cap`` is reached.

    Returns ``(S, info)`` with S[i, j] the pair sums.
    """
    L = max(int(spec.l_max), 8)
    prev = None
    history = []
    while True:
        coeffs, log_d = _project_many(functions, B, L, breaks)
        P = gegenbauer_normalized((B - 3) / 2.0, L, rho)
        with np.errstate(divide="ignore"):
            kern = np.sign(P) * np.exp(log_d + np.log(np.abs(P)))
        if degree_weight is not None:
            kern = kern * degree_weight(np.arange(L + 1, dtype=float))
        S = (coeffs * kern[:, None]).T @ coeffs
        if prev is not None:
            change = float(np.abs(S - prev).max())
            scale = max(float(np.abs(S).max()), 1e-300)
            history.append((L, change))
            if change <= spec.tolerance * scale or 2 * L > spec.l_cap:
                return S, {"l_max": L, "last_change": change, "history": history}
        prev = S
        L *= 2


def _project_many(functions, B: int, L: int, breaks):
    x, w = single_quadrature(B, 4 * L + 64, breaks)
    F = np.column_stack([np.asarray(f(x), dtype=float) for f in functions])
    table = gegenbauer_normalized((B - 3) / 2.0, L, x)
    coeffs = table @ (w[:, None] * F)
    return coeffs, log_harmonic_dim(B, np.arange(L + 1))


def _gegenbauer_fixed_point(desc: NonlinearityDescriptor, B: int, spec: QuadratureSpec):
    r = math.sqrt(B - 1.0)
    breaks = [k / r for k in desc.kinks()]
    f = lambda x: desc.eval(r * x)  # noqa: E731
    # Diagonal sum over P_l(1) = 1: Parseval closure, exact 1-D quadrature.
    x, w = single_quadrature(B, spec.nodes_per_angle, breaks)
    q = float(w @ desc.eval(r * x) ** 2)
    S, info = offdiag_series([f], B, -1.0 / (B - 1), breaks, spec)
    nu = float(S[0, 0])
    series = project_on_sphere(f, B, spec.l_max, breaks, label=desc.text())
    info = dict(info, q_truncated=series.mass(), tail_bound=series.tail_bound)
    return q, nu, info


def bsb1_fixed_point(desc: NonlinearityDescriptor, B: int, method: str = "gegenbauer",
                     spec: Optional[QuadratureSpec] = None) -> Bsb1Point:
    """The unique BSB1 fixed point of the forward recursion by the chosen route."""
    spec = spec or QuadratureSpec()
    check_batch_size(B)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    info = {}
    if method == "laplace":
        ph = desc.pos_hom
        if ph is None:
            raise MethodInapplicableError(f"{desc.text()} is not positive-homogeneous; "
                                          "the Laplace route does not apply")
        q, nu = kernels.v_transform_laplace(ph, B)
    elif method == "spherical":
        q, nu = kernels.v_transform_bsb1(desc, B, spec)
    else:
        if B < 4:
            raise MethodInapplicableError("the Gegenbauer route needs B >= 4")
        q, nu, info = _gegenbauer_fixed_point(desc, B, spec)
    if not q > 0:
        raise ValueError(f"degenerate fixed point for {desc.text()}: q* = {q}")
    return Bsb1Point(B, q, nu / q, q - nu, nu, method, info)


def cross_batch_constant(desc: NonlinearityDescriptor, B: int,
                         spec: Optional[QuadratureSpec] = None,
                         method: str = "spherical") -> CrossBatchPoint:
    """Cross-batch covariance constant c*_CB = (E phi(sqrt(B-1) x))^2.

    Computed by one-dimensional quadrature, cross-checked against a_0^2 from
    a truncated Gegenbauer projection and, for positive-homogeneous phi,
    against the closed form
    c_alpha ((B-1)/2)^alpha Poch((B-1)/2, alpha/2)^-2 J_phi(0).
    """
    spec = spec or QuadratureSpec()
    check_batch_size(B)
    point = bsb1_fixed_point(desc, B, method, spec)
    r = math.sqrt(B - 1.0)
    breaks = [k / r for k in desc.kinks()]
    x, w = single_quadrature(B, spec.nodes_per_angle, breaks)
    mean = float(w @ desc.eval(r * x))
    a0 = float("nan")
    if B >= 4:
        a0 = float(project_on_sphere(lambda t: desc.eval(r * t), B, spec.l_max, breaks).coeffs[0])
    closed = None
    ph = desc.pos_hom
    if ph is not None:
        al = ph.degree
        h = (B - 1) / 2.0
        closed = c_alpha(al) * h ** al * math.exp(-2.0 * float(log_poch(h, al / 2.0))) * j_phi(ph, 0.0)
    return CrossBatchPoint(point, mean * mean, a0 * a0, closed)


def bsb2_hat1_fixed_point(desc: NonlinearityDescriptor, B: int) -> Bsb2HatPoint:
    """Closed-form fixed point whose centered part is rank one along q_hat."""
    check_batch_size(B, 4)
    r = math.sqrt(B - 1.0)
    hi_p, hi_m = desc.eval(r), desc.eval(-r)
    lo_m, lo_p = desc.eval(-1.0 / r), desc.eval(1.0 / r)
    d = 0.5 * (hi_p ** 2 + hi_m ** 2)
    c = 0.5 * (hi_p * lo_m + hi_m * lo_p)
    b = 0.5 * (lo_m ** 2 + lo_p ** 2)
    lam = (B - 1) / (2.0 * B) * ((hi_p - lo_m) ** 2 + (hi_m - lo_p) ** 2)
    return Bsb2HatPoint(B, d, c, b, lam)


@dataclass
class ForwardTrajectory:
    """Output of :func:`iterate_forward`."""

    sigmas: List[np.ndarray]
    rel_change: List[float]
    distance_to_bsb1: List[float]
    spread: List[float]
    gap_ratio: List[float]
    converged: bool
    method: str
    fixed_point: Optional[Bsb1Point] = None

    @property
    def final(self) -> np.ndarray:
        return self.sigmas[-1]


def _relative_spread(S: np.ndarray, rank: int) -> float:
    ev = np.sort(np.linalg.eigvalsh(mean_center(S)))[::-1][:rank]
    return float((ev.max() - ev.min()) / ev.mean())


def iterate_forward(desc: NonlinearityDescriptor, sigma0, steps: int = 50,
                    spec: Optional[QuadratureSpec] = None, method: str = "auto",
                    tol: float = 1e-8) -> ForwardTrajectory:
    """Apply Sigma <- V(Sigma) without damping, starting from ``sigma0``.

    ``method`` is ``laplace`` (deterministic, positive-homogeneous phi only),
    ``mc`` (sampling estimator, any phi; step l uses seed ``spec.seed + l``)
    or ``auto`` (Laplace when available).  Iteration stops when the relative
    Frobenius change drops below ``tol`` or after ``steps`` steps.

    Diagnostics per step: relative change, Frobenius distance to the BSB1
    fixed point (when it can be computed), the relative spread
    (max - min) / mean of the nonzero eigenvalues of G Sigma G, and the ratio
    of consecutive spreads.
    """
    spec = spec or QuadratureSpec()
    S = np.asarray(sigma0.entries if hasattr(sigma0, "entries") else sigma0, dtype=float)
    B = S.shape[0]
    check_batch_size(B)
    ph = desc.pos_hom
    if method == "auto":
        method = "laplace" if ph is not None else "mc"
    if method == "laplace" and ph is None:
        raise MethodInapplicableError("Laplace iteration needs a positive-homogeneous activation")
    kernels._check_rank(mean_center(S))
    rank = B - 1
    try:
        point = bsb1_fixed_point(desc, B, "laplace" if ph is not None else "spherical", spec)
        star = point.matrix()
    except ValueError:
        point, star = None, None
    sigmas = [S]
    rel, dist, spread, ratio = [], [], [_relative_spread(S, rank)], []
    converged = False
    for step in range(steps):
        try:
            if method == "laplace":
                new = kernels.v_transform_laplace_general(ph, S)
            else:
                sub = QuadratureSpec(nodes_per_angle=spec.nodes_per_angle, tolerance=spec.tolerance,
                                     mc_samples=spec.mc_samples, seed=spec.seed + step, chunk=spec.chunk)
                new = kernels.v_transform_general(desc, S, sub)
        except kernels.SingularCovarianceError as exc:
            raise kernels.SingularCovarianceError(f"step {step + 1}: {exc}") from exc
        new = 0.5 * (new + new.T)
        change = float(np.linalg.norm(new - S) / max(np.linalg.norm(new), 1e-300))
        rel.append(change)
        if star is not None:
            dist.append(float(np.linalg.norm(new - star)))
        sp = _relative_spread(new, rank)
        ratio.append(sp / spread[-1] if spread[-1] > 0 else float("nan"))
        spread.append(sp)
        sigmas.append(new)
        S = new
        if change < tol:
            converged = True
            break
    return ForwardTrajectory(sigmas, rel, dist, spread, ratio, converged, method, point)
