"""Eigenvalues of the linearized forward and backward dynamics at the BSB1 point.

Both the forward Jacobian dV and the backward gradient map Pi -> E[J^T Pi J]
are ultrasymmetric 4-tensors at a BSB1 fixed point: their entries
[kl|ij] = T(delta_i delta_j^T)_kl depend only on the equality pattern of the
indices.  After projection onto centred symmetric matrices they have three
eigenspaces (multiples of G, the centred diagonals L, the zero-diagonal
matrices M) whose eigenvalues are fixed linear combinations of ten
representative entries.

Every bracket reduces to a sphere expectation E[f(w_1) g(w_2) Q(w_1, w_2)]
with Q a polynomial, obtained by integrating out the remaining coordinates of
w analytically (:class:`bnmf.kernels.SphereMoments`).  The expectation is
evaluated either by angular quadrature or by Funk-Hecke sums over Gegenbauer
coefficients.  For positive-homogeneous activations the arccosine closed
forms are available as a third route.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional

import numpy as np

from .fixed_point import (Bsb1Point, MethodInapplicableError, bsb1_fixed_point, check_batch_size,
                          offdiag_series)
from .kernels import QuadratureSpec, SphereMoments, v_transform_laplace_general
from .nonlin import NonlinearityDescriptor
from .quadrature import angle_rule, pair_quadrature, single_quadrature
from .specfun import c_alpha, j_phi, j_phi_deriv, log_poch

METHODS = ("laplace", "spherical", "gegenbauer")

# Representative index patterns (k, l, i, j) of the ten bracket classes.
BRACKET_KEYS = ("11|11", "11|12", "11|22", "11|23", "12|11",
                "12|12", "12|13", "12|21", "12|33", "12|34")


class DegenerateGradientError(ValueError):
    """The activation makes the batchnorm output constant, so all gradients vanish."""


@dataclass
class UltrasymmetricBrackets:
    """The ten representative entries of an ultrasymmetric operator.

    ``b12_13`` stands for [12|13]; inputs are treated as symmetric matrices,
    so [12|13] and [12|31] coincide.
    """

    b11_11: float = 0.0
    b11_12: float = 0.0
    b11_22: float = 0.0
    b11_23: float = 0.0
    b12_11: float = 0.0
    b12_12: float = 0.0
    b12_13: float = 0.0
    b12_21: float = 0.0
    b12_33: float = 0.0
    b12_34: float = 0.0

    @classmethod
    def from_mapping(cls, values: Dict[str, float]) -> "UltrasymmetricBrackets":
        return cls(**{"b" + k.replace("|", "_"): float(v) for k, v in values.items()})

    def as_dict(self) -> Dict[str, float]:
        return {f.name[1:].replace("_", "|"): getattr(self, f.name) for f in fields(self)}

    @classmethod
    def identity(cls) -> "UltrasymmetricBrackets":
        return cls(b11_11=1.0, b12_12=1.0)

    @classmethod
    def dos(cls, u: float, v: float, w: float) -> "UltrasymmetricBrackets":
        """Brackets with [11|11] = u, [12|11] = v, [12|12] = w and all others zero."""
        return cls(b11_11=u, b12_11=v, b12_12=w)

    @classmethod
    def from_tensor(cls, T: np.ndarray) -> "UltrasymmetricBrackets":
        """Average an explicit tensor T[k, l, i, j] = T(delta_i delta_j^T)_kl over each class.

        The input slot is symmetrized first, so the tensor only needs to be
        ultrasymmetric up to sampling noise.
        """
        T = np.asarray(T, dtype=float)
        B = T.shape[0]
        if T.shape != (B,) * 4 or B < 4:
            raise ValueError("expected a (B, B, B, B) tensor with B >= 4")
        Ts = 0.5 * (T + T.transpose(0, 1, 3, 2))
        sums = dict.fromkeys(BRACKET_KEYS, 0.0)
        counts = dict.fromkeys(BRACKET_KEYS, 0)
        for idx in itertools.product(range(B), repeat=4):
            key = bracket_class(*idx)
            sums[key] += Ts[idx]
            counts[key] += 1
        return cls.from_mapping({k: sums[k] / counts[k] for k in BRACKET_KEYS})


def bracket_class(k: int, l: int, i: int, j: int) -> str:
    """Representative of the class of T(delta_i delta_j^T)_kl (symmetric inputs)."""
    if k == l:
        if i == j:
            return "11|11" if i == k else "11|22"
        return "11|12" if k in (i, j) else "11|23"
    # k != l
    if i == j:
        return "12|11" if i in (k, l) else "12|33"
    if {i, j} == {k, l}:
        return "12|12" if (i, j) == (k, l) else "12|21"
    if i in (k, l) or j in (k, l):
        return "12|13"
    return "12|34"


def ultrasym_eigen(br: UltrasymmetricBrackets, B: int) -> Dict[str, float]:
    """Eigenvalues of G^{(x)2} o T on multiples of G, on L and on M."""
    if B < 4:
        raise ValueError("ultrasymmetric eigenvalues need B >= 4")
    b = br
    a11 = b.b11_11 + (B - 1) * b.b11_22
    a12 = 2 * (B - 1) * b.b11_12 + (B - 2) * (B - 1) * b.b11_23
    a21 = 2 * b.b12_11 + (B - 2) * b.b12_33
    a22 = b.b12_12 + 4 * (B - 2) * b.b12_13 + b.b12_21 + (B - 2) * (B - 3) * b.b12_34
    lam_g = ((B - 1) * (a11 - a21) - (a12 - a22)) / B
    c11 = b.b11_11 - b.b11_22
    c12 = 2 * (B - 2) * (b.b11_23 - b.b11_12)
    c21 = b.b12_33 - b.b12_11
    c22 = b.b12_21 + b.b12_12 + 2 * (B - 4) * b.b12_13 - 2 * (B - 3) * b.b12_34
    lam_l = ((B - 2) * c11 + c12 + 2 * (B - 2) * c21 + 2 * c22) / B
    lam_m = b.b12_12 + b.b12_21 - 4 * b.b12_13 + 2 * b.b12_34
    return {"lambda_G": lam_g, "lambda_L": lam_l, "lambda_M": lam_m}


# ---------------------------------------------------------------------------
# Bracket evaluation
# ---------------------------------------------------------------------------

class _BracketEngine:
    """Evaluates sphere expectations E[F(w_a) F(w_b) prod w] for one activation."""

    MAX_POWER = 4

    def __init__(self, desc: NonlinearityDescriptor, B: int, route: str, spec: QuadratureSpec,
                 derivative: bool):
        self.desc, self.B, self.route, self.spec = desc, B, route, spec
        self.sm = SphereMoments(B)
        self.kappa = math.sqrt((B - 1) / B)
        r = math.sqrt(B - 1.0)
        self.breaks = [k / r for k in desc.kinks()]
        ev = desc.eval_deriv if derivative else desc.eval
        self.fx = lambda x: ev(r * x)  # function of x = w / kappa
        self.info: dict = {}
        self._single = single_quadrature(B, spec.nodes_per_angle, self.breaks)
        self._pair = None
        self._series = None

    def _pair_sums(self):
        if self._series is None:
            funcs = [(lambda x, p=p: x ** p * self.fx(x)) for p in range(self.MAX_POWER + 1)]
            self._series, info = offdiag_series(funcs, self.B, -1.0 / (self.B - 1), self.breaks,
                                                self.spec)
            self.info.update(info)
        return self._series

    def expect(self, coef_terms, a: int, b: int) -> float:
        """E[F(w_a) F(w_b) sum_c coef prod_t w_t] for ``coef_terms = [(coef, labels)]``."""
        k = 1 if a == b else 2
        relabel = {a: 1, b: 2} if k == 2 else {a: 1}
        terms = [(c, [relabel.get(t, ("free", t)) for t in labs]) for c, labs in coef_terms]
        poly = self.sm.poly_expect(terms, k)
        if not poly:
            return 0.0
        kap = self.kappa
        if k == 1:
            x, w = self._single
            f = self.fx(x)
            return float(w @ (f * f * self.sm.eval_poly(poly, kap * x)))
        if self.route == "gegenbauer":
            S = self._pair_sums()
            total = 0.0
            for (p, q), c in poly.items():
                if max(p, q) > self.MAX_POWER:
                    raise RuntimeError("polynomial degree exceeds the projected basis")
                total += c * kap ** (p + q) * S[p, q]
            return float(total)
        if self._pair is None:
            X, Y, W = pair_quadrature(self.B, -1.0 / (self.B - 1), self.spec.nodes_per_angle,
                                      self.breaks)
            self._pair = (X, Y, W, self.fx(X) * self.fx(Y))
        X, Y, W, FF = self._pair
        return float(W @ (FF * self.sm.eval_poly(poly, kap * X, kap * Y)))


def _rep_indices(key: str):
    k, l, i, j = (int(ch) for ch in key.replace("|", ""))
    return k, l, i, j


def forward_brackets(desc: NonlinearityDescriptor, B: int, point: Bsb1Point, route: str,
                     spec: QuadratureSpec):
    """Brackets of dV at the BSB1 point, from

    dV[delta_c delta_d^T]_ab = ((B-1)/2 E[phi_a phi_b w_c w_d] - Sigma*_ab (1(c=d) - 1/B)/2) / upsilon*

    where phi_a = phi(sqrt(B) w_a) and w is uniform on the centred unit sphere.
    """
    eng = _BracketEngine(desc, B, route, spec, derivative=False)
    ups = point.upsilon_star
    out = {}
    for key in BRACKET_KEYS:
        k, l, i, j = _rep_indices(key)
        val = 0.5 * (B - 1) * eng.expect([(1.0, [i, j])], k, l)
        sig = point.q_star if k == l else point.nu_star
        val -= 0.5 * sig * ((1.0 if i == j else 0.0) - 1.0 / B)
        out[key] = val / ups
    return UltrasymmetricBrackets.from_mapping(out), eng.info


def backward_brackets(desc: NonlinearityDescriptor, B: int, point: Bsb1Point, route: str,
                      spec: QuadratureSpec):
    """Brackets of Pi -> E[J^T Pi J], J the Jacobian of the batchnorm layer.

    With J = sqrt(B) r^{-1} D (G - w w^T), r = |Gh| independent of the
    direction w and E r^{-2} = 1 / (upsilon* (B - 3)), the entry for a
    symmetric input is the average over (i, j) and (j, i) of
    B / (upsilon* (B-3)) E[phi'_i phi'_j (G_ki - w_k w_i)(G_jl - w_j w_l)].
    """
    eng = _BracketEngine(desc, B, route, spec, derivative=True)
    pref = B / (point.upsilon_star * (B - 3))

    def g(a, b):
        return (1.0 if a == b else 0.0) - 1.0 / B

    def one(k, l, i, j):
        terms = [(g(k, i) * g(j, l), []), (-g(k, i), [j, l]), (-g(j, l), [k, i]), (1.0, [k, i, j, l])]
        terms = [(c, labs) for c, labs in terms if c != 0.0]
        return eng.expect(terms, i, j)

    out = {}
    for key in BRACKET_KEYS:
        k, l, i, j = _rep_indices(key)
        val = one(k, l, i, j) if i == j else 0.5 * (one(k, l, i, j) + one(k, l, j, i))
        out[key] = pref * val
    return UltrasymmetricBrackets.from_mapping(out), eng.info


# ---------------------------------------------------------------------------
# Public eigenvalue routines
# ---------------------------------------------------------------------------

def _point(desc, B, method, spec):
    check_batch_size(B, 4)
    base = "spherical" if method == "laplace" and desc.pos_hom is None else method
    point = bsb1_fixed_point(desc, B, base, spec)
    if desc.is_constant or point.upsilon_star <= 1e-14 * max(point.q_star, 1.0):
        raise DegenerateGradientError(
            f"{desc.text()}: batchnorm output does not depend on its input (upsilon* = "
            f"{point.upsilon_star:.3g}); eigenvalues are 0/0")
    return point


def _poshom_or_raise(desc):
    ph = desc.pos_hom
    if ph is None:
        raise MethodInapplicableError(f"{desc.text()} is not positive-homogeneous; "
                                      "the Laplace route does not apply")
    return ph


def _laplace_pieces(desc, B):
    ph = _poshom_or_raise(desc)
    if ph.degree <= 0.5:
        raise MethodInapplicableError("the Laplace eigenvalue formulas need degree alpha > 1/2")
    rho = -1.0 / (B - 1)
    J1, Jr, dJr = j_phi(ph, 1.0), j_phi(ph, rho), j_phi_deriv(ph, rho)
    return ph, J1, Jr, dJr


def forward_eigen(desc: NonlinearityDescriptor, B: int, method: str = "laplace",
                  spec: Optional[QuadratureSpec] = None) -> Dict:
    """Forward local-convergence rates lambda_L_up and lambda_M_up (lambda_G_up = 0)."""
    spec = spec or QuadratureSpec()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    point = _point(desc, B, method, spec)
    info = {}
    if method == "laplace":
        ph, J1, Jr, dJr = _laplace_pieces(desc, B)
        al = ph.degree
        ups = point.upsilon_star
        pref = (c_alpha(al) * (B - 1.0) ** (al - 1) / ups * 2.0 ** (-al)
                * math.exp(-float(log_poch((B + 1) / 2.0, al))))
        lam_m = pref * B * dJr
        lam_l = pref * ((B - 2) * al * (J1 - Jr) + B / (B - 1.0) * dJr)
    else:
        br, info = forward_brackets(desc, B, point, method, spec)
        ev = ultrasym_eigen(br, B)
        lam_l, lam_m = ev["lambda_L"], ev["lambda_M"]
        info = dict(info, lambda_G=ev["lambda_G"])
    return {"lambda_G_up": 0.0, "lambda_L_up": float(lam_l), "lambda_M_up": float(lam_m),
            "bsb1_stable": bool(lam_l < 1.0 and lam_m < 1.0),
            "m_exceeds_l": bool(lam_m > lam_l), "method": method, "diagnostics": info}


def _dirichlet_at_one(desc, B, spec):
    r = math.sqrt(B - 1.0)
    x, w = single_quadrature(B, spec.nodes_per_angle, [k / r for k in desc.kinks()])
    d = desc.eval_deriv(r * x)
    return float((B - 1) * (w @ ((1.0 - x * x) * d * d)))


def _lambda_g_gegenbauer(desc, B, point, spec):
    """lambda_G_down as a ratio of Gegenbauer quadratic forms.

    Sums at P_l(1) = 1 are closed exactly by one-dimensional quadrature
    (mean square and Dirichlet energy); only the off-diagonal sums use the
    truncated series.
    """
    r = math.sqrt(B - 1.0)
    breaks = [k / r for k in desc.kinks()]
    f = lambda x: desc.eval(r * x)  # noqa: E731
    S, info = offdiag_series([f], B, -1.0 / (B - 1), breaks, spec,
                             degree_weight=lambda l: l * (l + B - 3.0))
    num = _dirichlet_at_one(desc, B, spec) - float(S[0, 0])
    return num / ((B - 3) * point.upsilon_star), info


def backward_eigen(desc: NonlinearityDescriptor, B: int, method: str = "laplace",
                   spec: Optional[QuadratureSpec] = None) -> Dict:
    """Backward gradient rates lambda_G_down, lambda_L_down, lambda_M_down."""
    spec = spec or QuadratureSpec()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    point = _point(desc, B, method, spec)
    info = {}
    if method == "laplace":
        ph, J1, Jr, dJr = _laplace_pieces(desc, B)
        a = ph.degree
        Jd = J1 - Jr
        lam_g = ((B - 3 + 2 * a) * ((2 * a - 1) * dJr + a * a * (B - 1) * J1)
                 / ((2 * a - 1) * (B - 3) * (B - 1) * Jd) - a * a / (B - 3))
        den = (B - 3) * (B - 1) * (B - 1 + 2 * a)
        lam_l = (-2 * a * a * (B - 2) * (B - 1 + a) / den
                 + 2 * (a * a * (3 * B - 4) + a * (3 * B * B - 11 * B + 8) + (B - 3) * (B - 1) ** 2)
                 / ((B - 1) * den) * dJr / Jd
                 + a * a * (B - 2) * (B - 3 + 2 * a) / ((2 * a - 1) * (B - 3) * (B - 1)) * J1 / Jd)
        lam_m = B * (B * B + 2 * (a - 2) * B + 2 * (a - 3) * a + 3) / den * dJr / Jd
    else:
        br, info = backward_brackets(desc, B, point, method, spec)
        ev = ultrasym_eigen(br, B)
        lam_g, lam_l, lam_m = ev["lambda_G"], ev["lambda_L"], ev["lambda_M"]
        if method == "gegenbauer":
            info = {"brackets": info, "lambda_G_brackets": lam_g}
            lam_g, info["lambda_G_series"] = _lambda_g_gegenbauer(desc, B, point, spec)
    return {"lambda_G_down": float(lam_g), "lambda_L_down": float(lam_l),
            "lambda_M_down": float(lam_m), "method": method, "diagnostics": info}


def _log_poch_half(B):
    return float(log_poch(B / 2.0, 0.5))


def cross_batch_eigen(desc: NonlinearityDescriptor, B: int, method: str = "gegenbauer",
                      spec: Optional[QuadratureSpec] = None) -> float:
    """Cross-batch rate shared by forward correlations and backward covariances.

    ``gegenbauer``: a_1^2 B (B-1) / (2 upsilon* Poch(B/2, 1/2)^2) from the
    forward linearization; ``spherical``: the backward one-dimensional
    integral B (int_0^pi sin^{B-1} t phi'(-sqrt(B-1) cos t) dt)^2 / (2 pi upsilon*);
    ``laplace``: the arccosine closed form for positive-homogeneous phi.
    """
    spec = spec or QuadratureSpec()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    point = _point(desc, B, method, spec)
    ups = point.upsilon_star
    r = math.sqrt(B - 1.0)
    if method == "gegenbauer":
        x, w = single_quadrature(B, spec.nodes_per_angle, [k / r for k in desc.kinks()])
        a1 = float(w @ (desc.eval(r * x) * x))
        return a1 * a1 * 0.5 * B * (B - 1) / ups * math.exp(-2.0 * _log_poch_half(B))
    if method == "spherical":
        cl = [math.acos(max(-1.0, min(1.0, -k / r))) for k in desc.kinks() if abs(k) < r]
        theta, w = angle_rule(B - 1, spec.nodes_per_angle, cl, cl)
        # The normalized rule integrates against sin^{B-1}; rescale by its total mass.
        mass = math.sqrt(math.pi) * math.exp(-_log_poch_half(B))
        integral = mass * float(w @ desc.eval_deriv(-r * np.cos(theta)))
        return B * integral * integral / (2.0 * math.pi * ups)
    ph = _poshom_or_raise(desc)
    al = ph.degree
    Jd = j_phi(ph, 1.0) - j_phi(ph, -1.0 / (B - 1))
    return (B / (B - 1.0) * math.exp(float(log_poch((B - 1) / 2.0, al)) - 2 * float(log_poch(B / 2.0, al / 2.0)))
            * j_phi_deriv(ph, 0.0) / Jd)


def identity_cross_batch_bound(B: int) -> float:
    """Largest possible cross-batch rate, ((B-1)/2) Poch(B/2, 1/2)^-2, attained by phi = id."""
    return 0.5 * (B - 1) * math.exp(-2.0 * _log_poch_half(B))


def dirichlet_form(desc: NonlinearityDescriptor, B: int, u1_dot_u2: float,
                   spec: Optional[QuadratureSpec] = None, l_max: Optional[int] = None) -> float:
    """sum_l a_l^2 l (l + B - 3) d_l P_l(t), the Dirichlet form of phi(sqrt(B-1) x) at t.

    It equals (B-1) E[(t - x_1 x_2) phi'(sqrt(B-1) x_1) phi'(sqrt(B-1) x_2)] with
    x_i = u_i.v, v uniform on S^{B-2}; see :func:`dirichlet_form_mc`.  At t = 1
    the sum is closed exactly by one-dimensional quadrature.
    """
    spec = spec or QuadratureSpec()
    check_batch_size(B, 4)
    t = float(u1_dot_u2)
    if not -1.0 <= t <= 1.0:
        raise ValueError("u1_dot_u2 must lie in [-1, 1]")
    if t == 1.0:
        return _dirichlet_at_one(desc, B, spec)
    r = math.sqrt(B - 1.0)
    if l_max is not None:
        spec = QuadratureSpec(nodes_per_angle=spec.nodes_per_angle, l_max=l_max, l_cap=l_max,
                              tolerance=spec.tolerance)
    S, _ = offdiag_series([lambda x: desc.eval(r * x)], B, t, [k / r for k in desc.kinks()], spec,
                          degree_weight=lambda l: l * (l + B - 3.0))
    return float(S[0, 0])


def dirichlet_form_mc(desc: NonlinearityDescriptor, B: int, u1_dot_u2: float,
                      n_samples: int = 1_000_000, seed: int = 0, chunk: int = 200_000):
    """Monte Carlo estimate (mean, standard error) of (B-1) E[(t - x_1 x_2) phi'_1 phi'_2]."""
    t = float(u1_dot_u2)
    rng = np.random.default_rng(seed)
    r = math.sqrt(B - 1.0)
    s = math.sqrt(max(0.0, 1.0 - t * t))
    total = total2 = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        v = rng.standard_normal((m, B - 1))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        x1 = v[:, 0]
        x2 = t * v[:, 0] + s * v[:, 1]
        val = (B - 1) * (t - x1 * x2) * desc.eval_deriv(r * x1) * desc.eval_deriv(r * x2)
        total += float(val.sum())
        total2 += float((val * val).sum())
        done += m
    mean = total / n_samples
    var = max(total2 / n_samples - mean * mean, 0.0)
    return mean, math.sqrt(var / n_samples)


# ---------------------------------------------------------------------------
# Derived quantities
# ---------------------------------------------------------------------------

class NoExplosion(float):
    """Depth scale returned when gradients do not grow (lambda <= 1): +inf, tagged."""

    def __new__(cls):
        return super().__new__(cls, math.inf)

    def __repr__(self):
        return "NoExplosion(inf)"


def weight_gradient_scale(point: Bsb1Point, trace_Pi: float) -> float:
    """Expected squared weight-gradient entry upsilon* tr(Pi) at one layer."""
    if trace_Pi < 0:
        raise ValueError("trace of a gradient covariance cannot be negative")
    return point.upsilon_star * float(trace_Pi)


def depth_scale(lambda_G_down: float) -> float:
    """xi = 1 / log(lambda); a tagged infinity when lambda <= 1."""
    if lambda_G_down <= 1.0:
        return NoExplosion()
    return 1.0 / math.log(lambda_G_down)


def trainable_depth(xi: float, factor: float = 16.0) -> float:
    """Predicted maximal trainable depth, factor * xi."""
    if isinstance(xi, NoExplosion):
        return xi
    return factor * xi


# ---------------------------------------------------------------------------
# Method-independent oracles
# ---------------------------------------------------------------------------

def forward_brackets_fd(desc: NonlinearityDescriptor, B: int, rel_step: float = 1e-4):
    """Brackets of dV at the BSB1 point by central differences of the full V-transform.

    V is evaluated for general covariances by the Laplace-method integral, so
    this needs a positive-homogeneous activation.  Perturbations are the
    symmetric matrices tau_11 and tau_12 with step rel_step * upsilon*.
    """
    ph = _poshom_or_raise(desc)
    point = bsb1_fixed_point(desc, B, "laplace")
    star = point.matrix()
    h = rel_step * point.upsilon_star

    def deriv(tau):
        plus = v_transform_laplace_general(ph, star + h * tau)
        minus = v_transform_laplace_general(ph, star - h * tau)
        return (plus - minus) / (2.0 * h)

    t11 = np.zeros((B, B))
    t11[0, 0] = 1.0
    t12 = np.zeros((B, B))
    t12[0, 1] = t12[1, 0] = 0.5
    d11, d12 = deriv(t11), deriv(t12)
    vals = {"11|11": d11[0, 0], "11|22": d11[1, 1], "12|11": d11[0, 1], "12|33": d11[1, 2],
            "11|12": d12[0, 0], "12|12": d12[0, 1], "12|21": d12[0, 1], "12|13": d12[0, 2],
            "11|23": d12[2, 2], "12|34": d12[2, 3]}
    return UltrasymmetricBrackets.from_mapping(vals)


def _batchnorm_unit(desc, H):
    """phi(sqrt(B) G h / |G h|) applied row-wise."""
    B = H.shape[-1]
    Z = H - H.mean(axis=-1, keepdims=True)
    Z = Z / np.linalg.norm(Z, axis=-1, keepdims=True)
    return desc.eval(math.sqrt(B) * Z)


def backward_brackets_mc(desc: NonlinearityDescriptor, B: int, n_samples: int = 2_000_000,
                         seed: int = 0, fd_step: float = 1e-6, chunk: int = 50_000):
    """Brackets of the backward map from sampled, numerically differentiated Jacobians.

    Directions w are drawn uniformly on the centred unit sphere; the layer
    Jacobian at w is obtained by central differences of the batchnorm map
    (no analytic derivative is used) and the radial factor enters through
    E r^{-2} = 1 / (upsilon* (B - 3)).  Every index tuple of a class is
    averaged, which removes most of the sampling noise.

    Returns ``(brackets, stderr_lambda_G)`` where the standard error refers to
    the direct estimate E|G J|_F^2 / (B - 1) E r^{-2} of the G eigenvalue.
    """
    check_batch_size(B, 4)
    point = bsb1_fixed_point(desc, B, "spherical")
    rng = np.random.default_rng(seed)
    E = np.eye(B)
    acc = np.zeros((B, B, B, B))
    s1 = s2 = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        W = rng.standard_normal((m, B))
        W -= W.mean(axis=1, keepdims=True)
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        J = np.empty((m, B, B))
        for b in range(B):
            J[:, :, b] = (_batchnorm_unit(desc, W + fd_step * E[b])
                          - _batchnorm_unit(desc, W - fd_step * E[b])) / (2.0 * fd_step)
        # acc[k, l, i, j] += sum_n J[n, i, k] J[n, j, l]
        Jf = J.transpose(0, 2, 1).reshape(m, B * B)  # index (k, i)
        acc += (Jf.T @ Jf).reshape(B, B, B, B).transpose(0, 2, 1, 3)
        GJ = J - J.mean(axis=1, keepdims=True)
        fro = (GJ * GJ).sum(axis=(1, 2)) / (B - 1)
        s1 += float(fro.sum())
        s2 += float((fro * fro).sum())
        done += m
    scale = 1.0 / (point.upsilon_star * (B - 3) * n_samples)
    br = UltrasymmetricBrackets.from_tensor(acc * scale)
    mean = s1 / n_samples
    se = math.sqrt(max(s2 / n_samples - mean * mean, 0.0) / n_samples)
    return br, se / (point.upsilon_star * (B - 3))


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

@dataclass
class EigenReport:
    B: int
    lambda_G_down: float
    lambda_L_down: float
    lambda_M_down: float
    lambda_L_up: float
    lambda_M_up: float
    lambda_cb: float
    xi: float
    method: str
    bsb1_stability_flag: bool
    status: str = "ok"
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["xi"] = float(self.xi)
        return d


def eigen_report(desc: NonlinearityDescriptor, B: int, method: str = "laplace",
                 spec: Optional[QuadratureSpec] = None) -> EigenReport:
    """All eigenvalues and the depth scale for one activation and batch size."""
    spec = spec or QuadratureSpec()
    fw = forward_eigen(desc, B, method, spec)
    bw = backward_eigen(desc, B, method, spec)
    lam_cb = cross_batch_eigen(desc, B, method, spec)
    status = "ok"
    if method == "gegenbauer":
        from .nonlin import gegenbauer_coeffs

        series = gegenbauer_coeffs(desc, B, spec.l_max)
        if series.slowly_decaying:
            status = f"warn: slowly decaying Gegenbauer series (tail {series.tail_bound:.2e})"
    return EigenReport(B, bw["lambda_G_down"], bw["lambda_L_down"], bw["lambda_M_down"],
                       fw["lambda_L_up"], fw["lambda_M_up"], lam_cb, depth_scale(bw["lambda_G_down"]),
                       method, fw["bsb1_stable"], status,
                       {"forward": fw["diagnostics"], "backward": bw["diagnostics"],
                        "m_exceeds_l": fw["m_exceeds_l"]})
