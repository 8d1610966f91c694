"""Evaluators of the batchnorm V-transform and related sphere expectations.

For a covariance Sigma and activation phi, the batchnorm V-transform is

    V(Sigma) = E_{h ~ N(0, Sigma)} [ B_phi(h) B_phi(h)^T ],
    B_phi(h) = phi( sqrt(B) G h / |G h| ),   G = I - 11^T / B.

Because B_phi only sees the direction of Gh, every expectation reduces to an
average over the unit sphere of the (B-1)-dimensional subspace of vectors
summing to zero.  This module provides

* deterministic angular quadrature for one- and two-coordinate marginals of
  that sphere (the workhorse of the "spherical" route),
* exact conditional moments of the remaining coordinates given one or two
  coordinates, so that polynomial weights in any coordinates reduce to the
  same low-dimensional quadratures,
* the closed-form BSB1 image for positive-homogeneous phi,
* the Laplace-transform representation of V for positive-homogeneous phi at
  arbitrary Sigma, and
* a seeded Monte Carlo estimator of V at arbitrary Sigma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .nonlin import NonlinearityDescriptor
from .quadrature import angle_rule, pair_quadrature, single_quadrature
from .specfun import PosHomDecomposition, c_alpha, j_alpha, k_alpha_b

__all__ = [
    "CovarianceMatrix",
    "QuadratureSpec",
    "SingularCovarianceError",
    "centering",
    "basis_e",
    "bsb1",
    "is_bsb1",
    "is_g_projected",
    "mean_center",
    "angle_rule",
    "single_quadrature",
    "pair_quadrature",
    "SphereMoments",
    "v_transform_bsb1",
    "v_transform_laplace",
    "v_transform_laplace_general",
    "v_transform_general",
    "laplace_master",
    "v_phi_poshom",
    "j_alpha_array",
]


class SingularCovarianceError(ValueError):
    """Raised when the centered covariance has rank below B - 1."""


@dataclass
class QuadratureSpec:
    """Numerical settings shared by the quadrature and sampling routines.

    ``nodes_per_angle`` is the Gauss-Legendre order per panel and angle;
    ``mc_samples`` and ``seed`` drive the sampling estimators; ``l_max`` is the
    starting Gegenbauer truncation (the Gegenbauer route doubles it until the
    requested ``tolerance`` is met or ``l_cap`` is reached).
    """

    nodes_per_angle: int = 96
    tolerance: float = 1e-10
    method: str = "angular_reduced"
    mc_samples: int = 200_000
    seed: int = 0
    chunk: int = 20_000
    l_max: int = 80
    l_cap: int = 1280

    def __post_init__(self):
        if self.nodes_per_angle < 16:
            raise ValueError("nodes_per_angle must be at least 16")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.method not in ("angular_reduced", "full_sphere_mc"):
            raise ValueError(f"unknown quadrature method {self.method!r}")


@dataclass
class CovarianceMatrix:
    """A symmetric positive semi-definite B x B matrix."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ValueError("covariance must be symmetric")
        m = 0.5 * (m + m.T)
        ev = np.linalg.eigvalsh(m)
        if ev.min() < -1e-9 * max(1.0, np.abs(ev).max()):
            raise ValueError("covariance must be positive semi-definite")
        self.entries = m

    @property
    def B(self) -> int:
        return self.entries.shape[0]

    def is_bsb1(self, tol: float = 1e-10) -> bool:
        return is_bsb1(self.entries, tol)

    def g_projected(self, tol: float = 1e-10) -> bool:
        return is_g_projected(self.entries, tol)


def _as_array(sigma) -> np.ndarray:
    if isinstance(sigma, CovarianceMatrix):
        return sigma.entries
    return np.asarray(sigma, dtype=float)


def centering(B: int) -> np.ndarray:
    """G = I - 11^T / B."""
    return np.eye(B) - np.full((B, B), 1.0 / B)


def basis_e(B: int) -> np.ndarray:
    """B x (B-1) matrix whose orthonormal columns span the sum-zero subspace.

    Column k (0-based) is proportional to (1, ..., 1, -(k+1), 0, ..., 0) with
    k+1 leading ones, a Helmert basis.
    """
    e = np.zeros((B, B - 1))
    for k in range(B - 1):
        e[: k + 1, k] = 1.0
        e[k + 1, k] = -(k + 1.0)
        e[:, k] /= math.sqrt((k + 1.0) * (k + 2.0))
    return e


def bsb1(B: int, diag: float, offdiag: float) -> np.ndarray:
    """Matrix with ``diag`` on the diagonal and ``offdiag`` elsewhere."""
    m = np.full((B, B), float(offdiag))
    np.fill_diagonal(m, diag)
    return m


def is_bsb1(sigma, tol: float = 1e-10) -> bool:
    m = _as_array(sigma)
    B = m.shape[0]
    scale = max(1.0, np.abs(m).max())
    d = np.diag(m)
    off = m[~np.eye(B, dtype=bool)]
    return bool(np.ptp(d) <= tol * scale and (off.size == 0 or np.ptp(off) <= tol * scale))


def is_g_projected(sigma, tol: float = 1e-10) -> bool:
    m = _as_array(sigma)
    return bool(np.abs(m.sum(axis=1)).max() <= tol * max(1.0, np.abs(m).max()))


def mean_center(sigma) -> np.ndarray:
    """G Sigma G."""
    m = _as_array(sigma)
    G = centering(m.shape[0])
    return G @ m @ G


# ---------------------------------------------------------------------------
# Conditional moments of the uniform vector on the sum-zero unit sphere
# ---------------------------------------------------------------------------

def _padd(p, q, s=1.0):
    out = dict(p)
    for k, v in q.items():
        out[k] = out.get(k, 0.0) + s * v
    return out


def _pmul(p, q):
    out = {}
    for (a, b), u in p.items():
        for (c, d), v in q.items():
            key = (a + c, b + d)
            out[key] = out.get(key, 0.0) + u * v
    return out


def _pscale(p, s):
    return {k: s * v for k, v in p.items()}


class SphereMoments:
    """Expectations over w uniform on the unit sphere of {w in R^B : sum w = 0}.

    Coordinates 1 and 2 of w are written w1, w2.  Given them, the remaining
    m = B - k coordinates (k conditioned coordinates) are uniform on a sphere
    of radius^2 R = 1 - w1^2 - w2^2 inside the hyperplane summing to
    s = -(w1 + w2).  Their moments up to order four are polynomials in
    (w1, w2); :meth:`cond_poly` returns them as ``{(p, q): coeff}``.
    """

    def __init__(self, B: int):
        if B < 4:
            raise ValueError("SphereMoments requires B >= 4")
        self.B = B

    def _base_polys(self, k: int):
        m = self.B - k
        if k == 1:
            s = {(1, 0): -1.0}
            R = {(0, 0): 1.0, (2, 0): -1.0}
        else:
            s = {(1, 0): -1.0, (0, 1): -1.0}
            R = {(0, 0): 1.0, (2, 0): -1.0, (0, 2): -1.0}
        mu = _pscale(s, 1.0 / m)
        rho2 = _padd(R, _pscale(_pmul(s, s), 1.0 / m), -1.0)
        return m, mu, rho2

    def cond_poly(self, monomial: Sequence, k: int = 2):
        """E[prod_t w_{label_t} | conditioned coordinates] as a polynomial.

        Labels 1 and 2 (only 1 when k = 1) are the conditioned coordinates;
        any other hashable label denotes a distinct free coordinate, and equal
        labels denote the same coordinate.
        """
        cond = {1} if k == 1 else {1, 2}
        fixed = {(0, 0): 1.0}
        free = []
        for lab in monomial:
            if lab == 1:
                fixed = _pmul(fixed, {(1, 0): 1.0})
            elif lab == 2 and k == 2:
                fixed = _pmul(fixed, {(0, 1): 1.0})
            else:
                if lab in cond:
                    raise ValueError("bad label")
                free.append(lab)
        if len(free) > 4:
            raise ValueError("conditional moments are implemented up to order four")
        m, mu, rho2 = self._base_polys(k)
        nz = m - 1.0

        def pproj(a, b):
            return (1.0 if a == b else 0.0) - 1.0 / m

        total = {}
        nfree = len(free)
        for r in range(0, nfree + 1, 2):
            for S in combinations(range(nfree), r):
                rest = nfree - r
                mu_pow = {(0, 0): 1.0}
                for _ in range(rest):
                    mu_pow = _pmul(mu_pow, mu)
                labs = [free[i] for i in S]
                if r == 0:
                    term = mu_pow
                elif r == 2:
                    term = _pscale(_pmul(mu_pow, rho2), pproj(labs[0], labs[1]) / nz)
                else:
                    a, b, c, d = labs
                    pair = pproj(a, b) * pproj(c, d) + pproj(a, c) * pproj(b, d) + pproj(a, d) * pproj(b, c)
                    term = _pscale(_pmul(mu_pow, _pmul(rho2, rho2)), pair / (nz * (nz + 2.0)))
                total = _padd(total, term)
        return _pmul(fixed, total)

    def poly_expect(self, poly_terms, k: int = 2):
        """Combine ``[(coeff, monomial), ...]`` into one conditional polynomial."""
        total = {}
        for coeff, mono in poly_terms:
            total = _padd(total, self.cond_poly(mono, k), coeff)
        return {key: v for key, v in total.items() if v != 0.0}

    @staticmethod
    def eval_poly(poly, w1, w2=None):
        out = 0.0
        for (p, q), c in poly.items():
            term = c * w1 ** p
            if q:
                term = term * w2 ** q
            out = out + term
        return out


# ---------------------------------------------------------------------------
# BSB1 images
# ---------------------------------------------------------------------------

def v_transform_bsb1(desc: NonlinearityDescriptor, B: int, spec: Optional[QuadratureSpec] = None):
    """Image (diag, offdiag) of any BSB1 matrix under the batchnorm V-transform.

    Uses one-dimensional angular quadrature for the diagonal and the
    two-angle reduction for the off-diagonal entry.  For B = 3 the sphere is
    a circle and both entries are one-dimensional integrals over the angle.
    """
    spec = spec or QuadratureSpec()
    if B < 3:
        raise ValueError("batch size must be at least 3")
    r = math.sqrt(B - 1.0)
    kinks = [k / r for k in desc.kinks()]
    if spec.method == "full_sphere_mc":
        return _v_bsb1_mc(desc, B, spec)
    if B == 3:
        # u1, u2 at angle 2 pi / 3 in the plane; v = (cos t, sin t).
        br = set()
        for k in kinks:
            a = math.acos(k)
            br.update([a, 2 * math.pi - a, (a + 2 * math.pi / 3) % (2 * math.pi),
                       (2 * math.pi - a + 2 * math.pi / 3) % (2 * math.pi)])
        edges = [0.0] + sorted(b for b in br if 1e-15 < b < 2 * math.pi - 1e-15) + [2 * math.pi]
        gx, gw = np.polynomial.legendre.leggauss(spec.nodes_per_angle)
        t = np.concatenate([a + 0.5 * (b - a) * (gx + 1) for a, b in zip(edges[:-1], edges[1:])])
        w = np.concatenate([0.5 * (b - a) * gw for a, b in zip(edges[:-1], edges[1:])])
        w = w / w.sum()
        f1 = desc.eval(r * np.cos(t))
        f2 = desc.eval(r * np.cos(t - 2 * math.pi / 3))
        return float(w @ (f1 * f1)), float(w @ (f1 * f2))
    x, w = single_quadrature(B, spec.nodes_per_angle, kinks)
    f = desc.eval(r * x)
    diag = float(w @ (f * f))
    X, Y, W = pair_quadrature(B, -1.0 / (B - 1), spec.nodes_per_angle, kinks)
    off = float(W @ (desc.eval(r * X) * desc.eval(r * Y)))
    return diag, off


def _sample_sphere_directions(B: int, spec: QuadratureSpec):
    """Yield chunks of uniform unit vectors of the sum-zero subspace (as B-vectors)."""
    e = basis_e(B)
    n_chunks = -(-spec.mc_samples // spec.chunk)
    seeds = np.random.SeedSequence(spec.seed).spawn(n_chunks)
    left = spec.mc_samples
    for ss in seeds:
        n = min(spec.chunk, left)
        left -= n
        rng = np.random.Generator(np.random.Philox(ss))
        z = rng.standard_normal((n, B - 1))
        v = z / np.linalg.norm(z, axis=1, keepdims=True)
        yield v, v @ e.T


def _v_bsb1_mc(desc, B, spec):
    acc_d, acc_o, sq_d, sq_o, n = 0.0, 0.0, 0.0, 0.0, 0
    for _, w in _sample_sphere_directions(B, spec):
        f = desc.eval(math.sqrt(B) * w)
        d = f[:, 0] ** 2
        o = f[:, 0] * f[:, 1]
        acc_d += d.sum(); sq_d += (d * d).sum()
        acc_o += o.sum(); sq_o += (o * o).sum()
        n += len(d)
    return acc_d / n, acc_o / n


def v_transform_laplace(decomp: PosHomDecomposition, B: int):
    """Closed-form BSB1 image (K J_phi(1), K J_phi(-1/(B-1))) for positive-homogeneous phi."""
    al = decomp.degree
    if B < 3:
        raise ValueError("batch size must be at least 3")
    if not (B - 1) / 2.0 + 2.0 > al:
        raise ValueError(f"degree {al} too large for the Laplace route at B={B}")
    K = k_alpha_b(al, B)
    return K * decomp.j(1.0), K * decomp.j(-1.0 / (B - 1))


# ---------------------------------------------------------------------------
# Laplace-transform evaluation at a general covariance
# ---------------------------------------------------------------------------

def j_alpha_array(alpha: float, c: np.ndarray) -> np.ndarray:
    """Vectorized J_alpha for integer degrees; falls back to scalar calls otherwise."""
    c = np.clip(np.asarray(c, dtype=float), -1.0, 1.0)
    if float(alpha).is_integer() and 0 <= alpha <= 30:
        s = np.sqrt(np.maximum(0.0, 1.0 - c * c))
        t = np.pi - np.arccos(c)
        j0 = t / np.pi
        j1 = (s + t * c) / np.pi
        if alpha == 0:
            return j0
        if alpha == 1:
            return j1
        jm2, jm1 = j0, j1
        for a in range(2, int(alpha) + 1):
            jm2, jm1 = jm1, c * jm1 + (a - 1.0) ** 2 / ((2.0 * a - 1.0) * (2.0 * a - 3.0)) * (1.0 - c * c) * jm2
        return jm1
    return np.vectorize(lambda cc: j_alpha(alpha, cc))(c)


def v_phi_poshom(decomp: PosHomDecomposition, M: np.ndarray) -> np.ndarray:
    """Gaussian second moments E[phi(h) phi(h)^T], h ~ N(0, M), for positive-homogeneous phi."""
    al, a, b = decomp.degree, decomp.pos_coeff, decomp.neg_coeff
    d = np.sqrt(np.maximum(np.diag(M), 0.0))
    dd = np.outer(d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(dd > 0, M / dd, 0.0)
    np.fill_diagonal(c, 1.0)
    jp = (a * a + b * b) * j_alpha_array(al, c)
    if a != 0 and b != 0:
        jp = jp - 2 * a * b * j_alpha_array(al, -c)
    return c_alpha(al) * dd ** al * jp


def laplace_master(moment: Callable[[np.ndarray], np.ndarray], sigma, k: float,
                   tol: float = 1e-13, moment_degree: float = 0.0):
    """E[|y|^(-2k) f(y)] for y ~ N(0, Sigma), by the Laplace-transform identity.

    ``moment(M)`` must return E f(y) for y ~ N(0, M) (a scalar or an array).
    Uses |y|^(-2k) = Gamma(k)^-1 int_0^inf s^(k-1) exp(-s |y|^2) ds, which
    turns the weighted expectation into an s-integral of
    det(I + 2 s Sigma)^(-1/2) moment(Sigma (I + 2 s Sigma)^(-1)).  The
    substitution x = 2 u s / (1 + 2 u s) (u the mean nonzero eigenvalue)
    maps the s-range to [0, 1).

    ``moment_degree`` is the homogeneity degree of f (e.g. 2 alpha for
    phi(y) phi(y)^T with phi of degree alpha); the integral converges when
    rank(Sigma) + moment_degree > 2k.
    """
    S = _as_array(sigma)
    if k == 0:
        return moment(S)
    evals, Q = np.linalg.eigh(S)
    scale = max(np.abs(evals).max(), 1e-300)
    evals = np.where(np.abs(evals) < 1e-13 * scale, 0.0, evals)
    rank = int(np.count_nonzero(evals))
    if not rank + moment_degree > 2 * k:
        raise ValueError(f"rank {rank} too small for the moment |y|^(-2k), k = {k}")
    u = evals[evals > 0].mean()
    log_gk = math.lgamma(k)
    zero = 0.0 * np.asarray(moment(S), dtype=float)

    def integrand(x):
        if x >= 1.0 or x <= 0.0:
            return zero
        s = x / (2.0 * u * (1.0 - x))
        ds = 1.0 / (2.0 * u * (1.0 - x) ** 2)
        den = 1.0 + 2.0 * s * evals
        logdet = -0.5 * np.log(den).sum()
        shr = (Q * (evals / den)) @ Q.T
        wt = math.exp((k - 1.0) * math.log(s) + logdet - log_gk) * ds
        return wt * moment(shr)

    val, _ = integrate.quad_vec(integrand, 0.0, 1.0, epsabs=tol, epsrel=tol, limit=2000)
    return val


def v_transform_laplace_general(decomp: PosHomDecomposition, sigma) -> np.ndarray:
    """V(Sigma) at an arbitrary covariance for positive-homogeneous phi.

    B_phi(h) = B^(alpha/2) |Gh|^(-alpha) phi(Gh), so
    V(Sigma) = B^alpha E[|y|^(-2 alpha) phi(y) phi(y)^T] with y ~ N(0, G Sigma G).
    """
    S = _as_array(sigma)
    B = S.shape[0]
    SG = mean_center(S)
    _check_rank(SG)
    al = decomp.degree
    return B ** al * laplace_master(lambda M: v_phi_poshom(decomp, M), SG, al,
                                    moment_degree=2.0 * al)


def _check_rank(SG: np.ndarray):
    B = SG.shape[0]
    e = basis_e(B)
    core = e.T @ SG @ e
    ev = np.linalg.eigvalsh(core)
    tr = max(np.trace(core), 1e-300)
    if ev.min() < 1e-10 * tr:
        raise SingularCovarianceError(
            f"centered covariance is rank deficient (smallest eigenvalue {ev.min():.3e}, trace {tr:.3e})")
    return core


# ---------------------------------------------------------------------------
# Monte Carlo evaluation at a general covariance
# ---------------------------------------------------------------------------

def v_transform_general(desc: NonlinearityDescriptor, sigma, spec: Optional[QuadratureSpec] = None,
                        return_stderr: bool = False):
    """Monte Carlo estimate of V(Sigma) for a general covariance.

    Directions v are drawn uniformly on S^(B-2) and weighted by the angular
    central Gaussian density of the direction of e^T G h relative to the
    uniform measure, K(v) = det(A)^(-1/2) (v^T A^-1 v)^(-(B-1)/2) with
    A = e^T Sigma e.  K = 1 when Sigma is BSB1.  Samples are generated in
    fixed-size chunks, each from its own Philox stream spawned from the
    master seed, so results do not depend on how chunks are scheduled.
    """
    spec = spec or QuadratureSpec()
    S = _as_array(sigma)
    B = S.shape[0]
    if B < 3:
        raise ValueError("batch size must be at least 3")
    A = _check_rank(mean_center(S))
    Ainv = np.linalg.inv(A)
    _, logdet = np.linalg.slogdet(A)
    e = basis_e(B)
    acc = np.zeros((B, B))
    acc2 = np.zeros((B, B))
    n = 0
    for v, _ in _sample_sphere_directions(B, spec):
        quad = np.einsum("ni,ij,nj->n", v, Ainv, v)
        k = np.exp(-0.5 * logdet - 0.5 * (B - 1) * np.log(quad))
        # direction of the centered Gaussian, mapped back into R^B
        f = desc.eval(math.sqrt(B) * (v @ e.T))
        outer = np.einsum("n,ni,nj->nij", k, f, f)
        acc += outer.sum(axis=0)
        acc2 += (outer ** 2).sum(axis=0)
        n += len(k)
    mean = acc / n
    if return_stderr:
        var = np.maximum(acc2 / n - mean ** 2, 0.0)
        return mean, np.sqrt(var / n)
    return mean
