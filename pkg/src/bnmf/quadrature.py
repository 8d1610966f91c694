"""Angular quadrature rules for averages over a sphere.

Let v be uniform on the unit sphere S^(B-2) of the (B-1)-dimensional
subspace of R^B whose coordinates sum to zero, and let u1, u2 be unit
vectors in that subspace.  The projections x = u1.v and y = u2.v have
densities proportional to (1 - x^2)^((B-4)/2) (one projection) and to the
corresponding two-dimensional density (a pair).  After the substitutions
x = cos(t1), y = rho cos(t1) + sqrt(1 - rho^2) sin(t1) cos(t2) the weights
become sin^(B-3)(t1) sin^(B-4)(t2), smooth on [0, pi], and Gauss-Legendre
panels converge exponentially once kinks of the integrand are placed at
panel boundaries.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Sequence

import numpy as np

__all__ = ["angle_rule", "single_quadrature", "pair_quadrature"]

_WINDOW_LOG = 52.0  # sin^p(theta) below exp(-52) ~ 3e-23 of its peak is dropped


def _window(p: float) -> tuple[float, float]:
    if p <= 2.0:
        return 0.0, math.pi
    t = math.acos(math.exp(-_WINDOW_LOG / p))
    return math.pi / 2 - t, math.pi / 2 + t


def _effective_nodes(n: int, p: float) -> int:
    # The weight sin^p is a bump of width ~ 1/sqrt(p); keep the nodes per
    # bump width roughly constant as B grows.
    return int(max(n, 16 + 6 * math.sqrt(max(p, 0.0))))


_MAX_ORDER = 128  # higher orders are split into sub-panels instead


@lru_cache(maxsize=64)
def _gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


def _panel_nodes(a: float, b: float, gx: np.ndarray, gw: np.ndarray, left: bool, right: bool):
    """Gauss-Legendre nodes on [a, b], optionally clustered quadratically at an end.

    Clustering (t = a + (b - a) u^2 on [0, 1]) absorbs square-root type
    behaviour of the integrand at that end.
    """
    if left and right:
        m = 0.5 * (a + b)
        t1, w1 = _panel_nodes(a, m, gx, gw, True, False)
        t2, w2 = _panel_nodes(m, b, gx, gw, False, True)
        return np.concatenate([t1, t2]), np.concatenate([w1, w2])
    u = 0.5 * (gx + 1.0)
    wu = 0.5 * gw
    h = b - a
    if left:
        return a + h * u * u, 2.0 * h * u * wu
    if right:
        return b - h * u * u, 2.0 * h * u * wu
    return a + h * u, h * wu


def angle_rule(p: float, n: int, breaks: Sequence[float] = (),
               cluster: Sequence[float] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Panelled Gauss-Legendre rule for integrals of f(theta) sin(theta)^p over [0, pi].

    Returns nodes and weights (including the sin^p factor, normalized to sum
    to one).  Panels are split at ``breaks`` and ``cluster``; next to the
    points in ``cluster`` the nodes are clustered quadratically.  The domain
    is cut to the window where sin^p is not negligible.
    """
    lo, hi = _window(p)
    pts = {round(b, 15): False for b in breaks}
    for c in cluster:
        pts[round(c, 15)] = True
    inner = sorted((b, cl) for b, cl in pts.items() if lo + 1e-13 < b < hi - 1e-13)
    edges = [(lo, False)] + inner + [(hi, False)]
    n = _effective_nodes(n, p)
    pieces = -(-n // _MAX_ORDER)
    gx, gw = _gauss_legendre(-(-n // pieces))
    th, ww = [], []
    for (a, ca), (b, cb) in zip(edges[:-1], edges[1:]):
        cuts = np.linspace(a, b, pieces + 1)
        for s_, (u, v) in enumerate(zip(cuts[:-1], cuts[1:])):
            t, w = _panel_nodes(u, v, gx, gw, ca and s_ == 0, cb and s_ == pieces - 1)
            th.append(t)
            ww.append(w)
    theta = np.concatenate(th)
    w = np.concatenate(ww)
    if p != 0:
        with np.errstate(divide="ignore"):
            logw = np.log(w) + p * np.log(np.sin(theta))
        w = np.exp(logw - logw.max())
    return theta, w / w.sum()


def single_quadrature(B: int, n: int = 96, x_breaks: Sequence[float] = ()):
    """Nodes x and weights for E f(x), x = u.v with v uniform on S^(B-2), B >= 3.

    For B = 3 the marginal density (1 - x^2)^(-1/2) is still handled by the
    substitution x = cos(theta), which makes the weight uniform in theta.
    """
    br = [math.acos(b) for b in x_breaks if -1.0 < b < 1.0]
    theta, w = angle_rule(B - 3.0, n, (), br)
    return np.cos(theta), w


def pair_quadrature(B: int, rho: float, n: int = 96, x_breaks: Sequence[float] = ()):
    """Nodes (x, y) and weights for E f(u1.v, u2.v) with u1.u2 = rho, B >= 4.

    Coordinates: x = cos t1, y = rho cos t1 + sqrt(1 - rho^2) sin t1 cos t2,
    with density proportional to sin^(B-3) t1 sin^(B-4) t2.  ``x_breaks`` are
    kink locations of the integrand in each argument; panels in t1 are split
    at the x-kinks and, node by node, panels in t2 are split where y crosses a
    kink.
    """
    if B < 4:
        raise ValueError("pair_quadrature requires B >= 4")
    kinks = [b for b in x_breaks if -1.0 < b < 1.0]
    sr = math.sqrt(max(0.0, 1.0 - rho * rho))
    # Where y's range over t2, rho x +- sr sqrt(1 - x^2), touches a kink the
    # inner integral has a square-root corner in t1.
    tangents = []
    for k in kinks:
        for sgn in (1.0, -1.0):
            xt = rho * k + sgn * sr * math.sqrt(1.0 - k * k)
            if -1.0 < xt < 1.0:
                tangents.append(math.acos(xt))
    t1, w1 = angle_rule(B - 3.0, n, (), [math.acos(b) for b in kinks] + tangents)
    x = np.cos(t1)
    s1 = np.sin(t1)
    p2 = B - 4.0
    lo, hi = _window(p2)
    cuts = []
    for k in kinks:
        with np.errstate(divide="ignore", invalid="ignore"):
            c2 = (k - rho * x) / (sr * s1)
        ang = np.arccos(np.clip(np.nan_to_num(c2, nan=2.0, posinf=2.0, neginf=-2.0), -1.0, 1.0))
        cuts.append(np.clip(ang, lo, hi))
    if not cuts:
        cuts.append(np.full_like(x, 0.5 * (lo + hi)))
    edges = np.sort(np.column_stack([np.full_like(x, lo)] + cuts + [np.full_like(x, hi)]), axis=1)
    n2 = _effective_nodes(n, p2)
    gx, gw = _gauss_legendre(n2)
    u = 0.5 * (gx + 1.0)
    wu = 0.5 * gw
    npan = edges.shape[1] - 1
    t_parts, w_parts = [], []
    for j in range(npan):
        a = edges[:, j:j + 1]
        b = edges[:, j + 1:j + 2]
        # interior edges are kink crossings; cluster nodes towards them
        left, right = j > 0 or not kinks, j < npan - 1 or not kinks
        if not kinks:
            left = right = False
        if left and right:
            m = 0.5 * (a + b)
            t_parts += [a + (m - a) * u * u, b - (b - m) * u * u]
            w_parts += [2.0 * (m - a) * u * wu, 2.0 * (b - m) * u * wu]
        elif left:
            t_parts.append(a + (b - a) * u * u)
            w_parts.append(2.0 * (b - a) * u * wu)
        elif right:
            t_parts.append(b - (b - a) * u * u)
            w_parts.append(2.0 * (b - a) * u * wu)
        else:
            t_parts.append(a + (b - a) * u)
            w_parts.append((b - a) * wu)
    t2 = np.concatenate(t_parts, axis=1)
    w2 = np.concatenate(w_parts, axis=1)
    if p2 != 0:
        with np.errstate(divide="ignore"):
            w2 = w2 * np.exp(p2 * np.log(np.sin(t2)))
    w = w1[:, None] * w2
    X = np.broadcast_to(x[:, None], t2.shape)
    Y = rho * X + sr * s1[:, None] * np.cos(t2)
    w = w.ravel()
    return X.ravel(), Y.ravel(), w / w.sum()
