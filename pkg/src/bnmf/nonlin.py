"""Activation descriptors and their Gegenbauer expansions.

A :class:`NonlinearityDescriptor` bundles a base activation with the
batchnorm gain ``gamma`` and shift ``beta`` folded in, so that evaluating it
at x gives phi(gamma * x + beta).  Positive-homogeneous activations carry a
:class:`~bnmf.specfun.PosHomDecomposition` that unlocks the closed-form
routes in the other modules.

:func:`gegenbauer_coeffs` projects x -> phi(sqrt(B-1) x) on the Gegenbauer
basis of weight (B-3)/2, which is the form every analytic quantity is
expressed in.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .quadrature import single_quadrature
from .specfun import PosHomDecomposition, gegenbauer_normalized, log_harmonic_dim

__all__ = [
    "NonlinearityDescriptor",
    "GegenbauerSeries",
    "identity",
    "relu",
    "alpha_relu",
    "leaky_relu",
    "tanh",
    "sin",
    "constant",
    "custom",
    "parse_descriptor",
    "gegenbauer_coeffs",
    "project_on_sphere",
    "sphere_quadrature",
]

KINDS = ("identity", "relu", "alpha_relu", "leaky_relu", "tanh", "sin", "constant", "custom")
DEFAULT_L_MAX = 80
SLOW_DECAY_THRESHOLD = 1e-4


@dataclass(frozen=True)
class NonlinearityDescriptor:
    """An activation phi together with batchnorm's gain and shift.

    ``param`` holds the degree for ``alpha_relu``, the negative slope for
    ``leaky_relu`` and the value for ``constant``.  Custom activations supply
    ``fn`` and ``dfn`` (vectorized callables) and the list of ``kinks`` where
    the activation is not smooth.
    """

    kind: str
    param: Optional[float] = None
    gamma: float = 1.0
    beta: float = 0.0
    fn: Optional[Callable] = field(default=None, compare=False, repr=False)
    dfn: Optional[Callable] = field(default=None, compare=False, repr=False)
    custom_kinks: tuple = ()
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "alpha_relu" and (self.param is None or not self.param > -0.5):
            raise ValueError("alpha_relu needs a degree greater than -1/2")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom activations need fn")

    # -- evaluation -------------------------------------------------------
    def _base(self, z):
        k = self.kind
        if k == "identity":
            return z
        if k == "relu":
            return np.maximum(z, 0.0)
        if k == "alpha_relu":
            al = self.param
            if al == 0:
                return np.where(z > 0, 1.0, 0.0)
            return np.where(z > 0, np.abs(z) ** al, 0.0)
        if k == "leaky_relu":
            return np.where(z >= 0, z, self.param * z)
        if k == "tanh":
            return np.tanh(z)
        if k == "sin":
            return np.sin(z)
        if k == "constant":
            return np.full_like(z, self.param if self.param is not None else 1.0)
        return np.asarray(self.fn(z), dtype=float)

    def _base_deriv(self, z):
        k = self.kind
        if k == "identity":
            return np.ones_like(z)
        if k == "relu":
            return np.where(z >= 0, 1.0, 0.0)
        if k == "alpha_relu":
            al = self.param
            with np.errstate(divide="ignore", invalid="ignore"):
                pos = al * np.abs(z) ** (al - 1.0)
            at0 = 1.0 if al == 1 else (0.0 if al > 1 else math.inf)
            return np.where(z > 0, pos, np.where(z == 0, at0, 0.0))
        if k == "leaky_relu":
            return np.where(z >= 0, 1.0, self.param)
        if k == "tanh":
            return 1.0 - np.tanh(z) ** 2
        if k == "sin":
            return np.cos(z)
        if k == "constant":
            return np.zeros_like(z)
        if self.dfn is None:
            raise ValueError("custom activation has no derivative")
        return np.asarray(self.dfn(z), dtype=float)

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        """phi(gamma x + beta)."""
        z = self.gamma * np.asarray(x, dtype=float) + self.beta
        out = self._base(z)
        return float(out) if np.ndim(out) == 0 else out

    def eval_deriv(self, x):
        """gamma phi'(gamma x + beta), using right derivatives at kinks."""
        z = self.gamma * np.asarray(x, dtype=float) + self.beta
        out = self.gamma * self._base_deriv(z)
        return float(out) if np.ndim(out) == 0 else out

    # -- metadata ---------------------------------------------------------
    def kinks(self) -> list:
        """Input values x where phi(gamma x + beta) is not smooth."""
        if self.kind in ("relu", "alpha_relu", "leaky_relu"):
            z = [0.0]
        elif self.kind == "custom":
            z = list(self.custom_kinks)
        else:
            z = []
        if self.gamma == 0:
            return []
        return [(zz - self.beta) / self.gamma for zz in z]

    @property
    def pos_hom(self) -> Optional[PosHomDecomposition]:
        """Positive-homogeneous decomposition, or None when phi has none."""
        if self.beta != 0.0:
            return None
        k = self.kind
        if k == "identity":
            deg, a, b = 1.0, 1.0, 1.0
        elif k == "relu":
            deg, a, b = 1.0, 1.0, 0.0
        elif k == "alpha_relu":
            deg, a, b = float(self.param), 1.0, 0.0
        elif k == "leaky_relu":
            deg, a, b = 1.0, 1.0, float(self.param)
        else:
            return None
        g = self.gamma
        if g == 0:
            return None
        s = abs(g) ** deg
        if g > 0:
            return PosHomDecomposition(deg, a * s, b * s)
        # phi(-|g| x) swaps the two half-lines and flips signs.
        return PosHomDecomposition(deg, -b * s, -a * s)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or self.gamma == 0.0

    def text(self) -> str:
        """Canonical text form accepted by :func:`parse_descriptor`."""
        if self.name:
            base = self.name
        elif self.kind == "identity":
            base = "id"
        elif self.kind == "alpha_relu":
            base = f"alpha-relu:{self.param!r}"
        elif self.kind == "leaky_relu":
            base = f"leaky-relu:{self.param!r}"
        elif self.kind == "constant":
            base = f"const:{self.param!r}"
        else:
            base = self.kind
        extra = []
        if self.gamma != 1.0:
            extra.append(f"gamma={self.gamma!r}")
        if self.beta != 0.0:
            extra.append(f"beta={self.beta!r}")
        return base + ("@" + ",".join(extra) if extra else "")

    def __str__(self):
        return self.text()


def identity(gamma: float = 1.0, beta: float = 0.0) -> NonlinearityDescriptor:
    return NonlinearityDescriptor("identity", gamma=gamma, beta=beta)


def relu(gamma: float = 1.0, beta: float = 0.0) -> NonlinearityDescriptor:
    return NonlinearityDescriptor("relu", gamma=gamma, beta=beta)


def alpha_relu(alpha: float, gamma: float = 1.0, beta: float = 0.0) -> NonlinearityDescriptor:
    return NonlinearityDescriptor("alpha_relu", param=float(alpha), gamma=gamma, beta=beta)


def leaky_relu(slope: float, gamma: float = 1.0, beta: float = 0.0) -> NonlinearityDescriptor:
    return NonlinearityDescriptor("leaky_relu", param=float(slope), gamma=gamma, beta=beta)


def tanh(gamma: float = 1.0, beta: float = 0.0) -> NonlinearityDescriptor:
    return NonlinearityDescriptor("tanh", gamma=gamma, beta=beta)


def sin(gamma: float = 1.0, beta: float = 0.0) -> NonlinearityDescriptor:
    return NonlinearityDescriptor("sin", gamma=gamma, beta=beta)


def constant(value: float = 1.0) -> NonlinearityDescriptor:
    return NonlinearityDescriptor("constant", param=float(value))


def custom(fn: Callable, dfn: Optional[Callable] = None, kinks: Sequence[float] = (),
           name: str = "custom", gamma: float = 1.0, beta: float = 0.0) -> NonlinearityDescriptor:
    """Wrap a vectorized callable as a descriptor."""
    return NonlinearityDescriptor("custom", fn=fn, dfn=dfn, custom_kinks=tuple(kinks),
                                  name=name, gamma=gamma, beta=beta)


_TEXT_RE = re.compile(r"^\s*([a-z_\-]+)(?::([^@]+))?(?:@(.*))?\s*$")


def parse_descriptor(text: str) -> NonlinearityDescriptor:
    """Parse the CLI syntax, e.g. ``relu``, ``alpha-relu:2.0`` or ``tanh@gamma=0.5,beta=0.1``."""
    m = _TEXT_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"cannot parse activation {text!r}")
    base, arg, opts = m.groups()
    gamma, beta = 1.0, 0.0
    if opts:
        for part in opts.split(","):
            if not part.strip():
                continue
            key, sep, val = part.partition("=")
            if not sep:
                raise ValueError(f"bad option {part!r} in {text!r}")
            key = key.strip()
            if key == "gamma":
                gamma = float(val)
            elif key == "beta":
                beta = float(val)
            else:
                raise ValueError(f"unknown option {key!r} in {text!r}")
    if base in ("id", "identity", "linear"):
        kind_kw = dict(kind="identity")
    elif base == "relu":
        kind_kw = dict(kind="relu")
    elif base in ("alpha-relu", "alpha_relu"):
        if arg is None:
            raise ValueError("alpha-relu needs a degree, e.g. alpha-relu:2.0")
        kind_kw = dict(kind="alpha_relu", param=float(arg))
    elif base in ("leaky-relu", "leaky_relu"):
        kind_kw = dict(kind="leaky_relu", param=float(arg) if arg is not None else 0.01)
    elif base == "tanh":
        kind_kw = dict(kind="tanh")
    elif base == "sin":
        kind_kw = dict(kind="sin")
    elif base in ("const", "constant"):
        kind_kw = dict(kind="constant", param=float(arg) if arg is not None else 1.0)
    else:
        raise ValueError(f"unknown activation {base!r}")
    if arg is not None and kind_kw["kind"] in ("identity", "relu", "tanh", "sin"):
        raise ValueError(f"activation {base!r} takes no parameter")
    return NonlinearityDescriptor(gamma=gamma, beta=beta, **kind_kw)


# ---------------------------------------------------------------------------
# Gegenbauer projection
# ---------------------------------------------------------------------------

def sphere_quadrature(B: int, n_nodes: int, breaks_x: Sequence[float] = ()):
    """Nodes and weights for E over the projection x = u.v of v uniform on S^(B-2).

    The density of x is proportional to (1 - x^2)^((B-4)/2).  Substituting
    x = cos(theta) gives the smooth weight sin(theta)^(B-3) on [0, pi],
    integrated by Gauss-Legendre panels split (and clustered) at the x-values
    in ``breaks_x`` where the integrand has a kink.  Weights sum to one.
    """
    return single_quadrature(B, n_nodes, breaks_x)


@dataclass
class GegenbauerSeries:
    """Coefficients a_l of phi(sqrt(B-1) x) in the basis c_{B-1,l}^{-1} C^{(B-3)/2}_l.

    ``coeffs[l]`` is a_l and ``log_dims[l]`` is log d_l with
    d_l = c_{B-1,l}^{-1} C_l(1); a_l^2 d_l is the share of the sphere mean
    square carried by degree l.  ``tail_bound`` is the relative mass in the
    last five retained degrees.
    """

    B: int
    coeffs: np.ndarray
    tail_bound: float
    log_dims: np.ndarray
    label: str = ""
    mean_square: float = float("nan")

    @property
    def l_max(self) -> int:
        return len(self.coeffs) - 1

    @property
    def weights(self) -> np.ndarray:
        """a_l^2 d_l, computed in log space."""
        a = np.asarray(self.coeffs)
        with np.errstate(divide="ignore"):
            lw = 2.0 * np.log(np.abs(a)) + self.log_dims
        return np.where(a == 0.0, 0.0, np.exp(lw))

    @property
    def slowly_decaying(self) -> bool:
        return self.tail_bound > SLOW_DECAY_THRESHOLD

    def mass(self) -> float:
        """Sum of a_l^2 d_l, the sphere mean square of phi(sqrt(B-1) x)."""
        return float(self.weights.sum())

    def normalized_table(self, t) -> np.ndarray:
        return gegenbauer_normalized((self.B - 3) / 2.0, self.l_max, t)

    def zonal_sum(self, t, degree_weights=None) -> np.ndarray:
        """sum_l w_l a_l^2 d_l P_l(t) for each t (P_l normalized to P_l(1) = 1)."""
        wts = self.weights if degree_weights is None else self.weights * degree_weights
        return wts @ self.normalized_table(t)

    def reconstruct(self, x) -> np.ndarray:
        """Partial sum of the expansion evaluated at x in [-1, 1]."""
        a = np.asarray(self.coeffs)
        with np.errstate(divide="ignore"):
            sd = np.sign(a) * np.exp(np.log(np.abs(a)) + self.log_dims)
        sd = np.where(a == 0.0, 0.0, sd)
        return sd @ self.normalized_table(x)


def project_on_sphere(f: Callable, B: int, l_max: int, breaks_x: Sequence[float] = (),
                      n_nodes: Optional[int] = None, label: str = "") -> GegenbauerSeries:
    """Project a function f(x) on [-1, 1] onto the normalized Gegenbauer basis.

    Returns coefficients f_l = E[f(x) P_l(x)] for x distributed as u.v with
    v uniform on S^(B-2), which coincide with the Gegenbauer coefficients a_l
    of f in the basis c_{B-1,l}^{-1} C_l.
    """
    if B < 4:
        raise ValueError("Gegenbauer expansions need B >= 4")
    if l_max < 2:
        raise ValueError("l_max must be at least 2")
    n = n_nodes or 4 * l_max + 64
    x, w = sphere_quadrature(B, n, breaks_x)
    with np.errstate(all="ignore"):
        fx = np.asarray(f(x), dtype=float)
    if not np.all(np.isfinite(fx)):
        raise ValueError(f"activation {label or f!r} is not square-integrable on the sphere "
                         "(non-finite values at quadrature nodes)")
    table = gegenbauer_normalized((B - 3) / 2.0, l_max, x)
    coeffs = table @ (w * fx)
    log_dims = log_harmonic_dim(B, np.arange(l_max + 1))
    mean_sq = float(w @ (fx * fx))
    series = GegenbauerSeries(B, coeffs, 0.0, log_dims, label, mean_sq)
    wts = series.weights
    denom = max(mean_sq, 1e-300)
    series.tail_bound = float(wts[-5:].sum() / denom) if mean_sq > 0 else 0.0
    return series


def gegenbauer_coeffs(desc: NonlinearityDescriptor, B: int, l_max: int = DEFAULT_L_MAX,
                      n_nodes: Optional[int] = None) -> GegenbauerSeries:
    """Gegenbauer coefficients a_l of x -> phi(sqrt(B-1) x) for l = 0..l_max."""
    r = math.sqrt(B - 1.0)
    breaks = [k / r for k in desc.kinks()]
    return project_on_sphere(lambda x: desc.eval(r * x), B, l_max, breaks, n_nodes, desc.text())
