"""Monte Carlo simulation of wide random batch-normalized networks.

The network is h^l = W^l B_phi(h^{l-1}) with W^l_{ab} ~ N(0, 1/N), no bias,
and B_phi the per-neuron batchnorm over the batch followed by phi.

Because every W^l is fresh and independent of the past, the rows of h^l are,
given the previous layer, iid Gaussian vectors with covariance
K = X^T X / N where X = B_phi(h^{l-1}).  The simulator samples h^l directly
from N(0, K) with N x B draws instead of forming the N x N weight matrix;
the joint law of all layers is unchanged.  The same holds for the backward
pass under gradient independence (a fresh weight copy at every layer).  With
``grad_independence=False`` the true weight matrices are drawn and reused in
the backward pass.

Replicas use independent Philox streams derived from ``(seed, replica)`` and
are reduced in order, so results do not depend on the number of threads.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import bn_forward, bn_vjp
from .kernels import centering
from .nonlin import NonlinearityDescriptor

__all__ = ["McConfig", "McEstimate", "CrossBatchEstimate", "SimulationError",
           "simulate", "simulate_forward", "simulate_backward", "simulate_cross_batch",
           "classify_symmetry", "random_input_covariance", "fit_log_rate", "thread_count"]

MAX_FAILURE_FRACTION = 0.05
CLASS_TOL = 0.05


class SimulationError(RuntimeError):
    """Too many replicas failed (non-finite values)."""


@dataclass(frozen=True)
class McConfig:
    width: int = 1000
    batch: int = 8
    depth: int = 50
    replicas: int = 50
    seed: int = 0
    epsilon: float = 0.0
    grad_independence: bool = True

    def __post_init__(self):
        if self.width < 64:
            raise ValueError("width must be at least 64")
        if self.batch < 3:
            raise ValueError("batch must be at least 3 (with B = 2 every gradient vanishes)")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.replicas < 1:
            raise ValueError("need at least one replica")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("width", "batch", "depth", "replicas", "seed",
                                             "epsilon", "grad_independence")}


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("BNMF_THREADS", "1")))
    except ValueError:
        return 1


def _stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, *key])
    return np.random.Generator(np.random.Philox(ss))


def random_input_covariance(B: int, seed: int = 0) -> np.ndarray:
    """A random full-rank covariance (Wishart with 2B degrees of freedom, unit mean trace)."""
    A = _stream(seed, 0xC0).standard_normal((B, 2 * B))
    S = A @ A.T / (2 * B)
    return S * (B / np.trace(S))


def _sqrt_factor(K: np.ndarray) -> np.ndarray:
    """A matrix F with F F^T = K (Cholesky, falling back to a symmetric root)."""
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        ev, U = np.linalg.eigh(0.5 * (K + K.T))
        return U * np.sqrt(np.clip(ev, 0.0, None))


def _gaussian_rows(rng, K: np.ndarray, n: int) -> np.ndarray:
    """n iid rows from N(0, K); exactly repeated columns of K give identical columns."""
    # Deduplicate identical columns so bitwise-equal inputs stay bitwise equal.
    uniq, inverse = np.unique(K, axis=1, return_inverse=True)
    if uniq.shape[1] < K.shape[1]:
        first = [int(np.flatnonzero(inverse.ravel() == u)[0]) for u in range(uniq.shape[1])]
        Kr = K[np.ix_(first, first)]
        Z = rng.standard_normal((n, len(first))) @ _sqrt_factor(Kr).T
        return Z[:, inverse.ravel()]
    return rng.standard_normal((n, K.shape[0])) @ _sqrt_factor(K).T


def fit_log_rate(values: np.ndarray, layers: np.ndarray) -> float:
    """OLS slope of log(values) against layers."""
    return float(np.polyfit(np.asarray(layers, float), np.log(np.asarray(values, float)), 1)[0])


# ---------------------------------------------------------------------------
# One replica
# ---------------------------------------------------------------------------

@dataclass
class _ReplicaResult:
    sigmas: Optional[np.ndarray] = None  # (L+1, B, B)
    pis: Optional[np.ndarray] = None     # (L+1, B, B)
    failed_at: Optional[int] = None


def _replica(desc: NonlinearityDescriptor, cfg: McConfig, sigma0: np.ndarray, r: int,
             backward: bool) -> _ReplicaResult:
    N, B, L = cfg.width, cfg.batch, cfg.depth
    rng = _stream(cfg.seed, r)
    sigmas = np.empty((L + 1, B, B))
    Ys, invs = [], []
    H = _gaussian_rows(rng, sigma0, N)
    with np.errstate(all="ignore"):
        for l in range(L + 1):
            if not np.all(np.isfinite(H)):
                return _ReplicaResult(failed_at=l)
            sigmas[l] = H.T @ H / N
            if l == L:
                break
            Y, inv = bn_forward(np.ascontiguousarray(H), cfg.epsilon)
            X = desc.eval(Y)
            if not np.all(np.isfinite(X)):
                return _ReplicaResult(failed_at=l)
            if backward:
                Ys.append(Y)
                invs.append(inv)
            if cfg.grad_independence:
                H = _gaussian_rows(rng, X.T @ X / N, N)
            else:
                W = _stream(cfg.seed, r, l + 1).standard_normal((N, N)) / math.sqrt(N)
                H = W @ X
        if not backward:
            return _ReplicaResult(sigmas=sigmas)
        pis = np.empty((L + 1, B, B))
        D = rng.standard_normal((N, B))
        pis[L] = D.T @ D / N
        for l in range(L - 1, -1, -1):
            if cfg.grad_independence:
                Gup = _gaussian_rows(rng, pis[l + 1], N)
            else:
                W = _stream(cfg.seed, r, l + 1).standard_normal((N, N)) / math.sqrt(N)
                Gup = W.T @ D
            Gt = np.ascontiguousarray(Gup * desc.eval_deriv(Ys[l]))
            D = bn_vjp(Gt, Ys[l], invs[l])
            if not np.all(np.isfinite(D)):
                return _ReplicaResult(failed_at=l)
            pis[l] = D.T @ D / N
    return _ReplicaResult(sigmas=sigmas, pis=pis)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

@dataclass
class McEstimate:
    """Replica-averaged layer statistics.

    ``grad_log_slope`` is the OLS slope of log tr Pi^l against backprop depth
    L - l over the fit window, so exp(grad_log_slope) estimates lambda_G_down.
    ``diag_var``/``offdiag_var`` are per-replica variances of the diagonal and
    off-diagonal entries of Sigma^l relative to the squared mean diagonal,
    averaged over replicas.
    """

    config: McConfig
    sigma_seq: np.ndarray
    sigma_stderr: np.ndarray
    diag_var: np.ndarray
    offdiag_var: np.ndarray
    cls: str
    pi_seq: Optional[np.ndarray] = None
    pi_stderr: Optional[np.ndarray] = None
    pi_trace: Optional[np.ndarray] = None
    pi_trace_stderr: Optional[np.ndarray] = None
    grad_log_slope: float = float("nan")
    grad_log_slope_stderr: float = float("nan")
    fit_window: tuple = ()
    failures: List[int] = field(default_factory=list)
    class_votes: dict = field(default_factory=dict)

    @property
    def grad_rate(self) -> float:
        return math.exp(self.grad_log_slope)

    def records(self) -> List[dict]:
        """One JSON-ready record per layer."""
        out = []
        B = self.config.batch
        off = ~np.eye(B, dtype=bool)
        for l in range(self.sigma_seq.shape[0]):
            S, E = self.sigma_seq[l], self.sigma_stderr[l]
            rec = {"layer": l,
                   "sigma_diag_mean": float(np.diag(S).mean()),
                   "sigma_offdiag_mean": float(S[off].mean()),
                   "sigma_diag_stderr": float(np.sqrt((np.diag(E) ** 2).mean() / B)),
                   "sigma_offdiag_stderr": float(np.sqrt((E[off] ** 2).mean() / off.sum())),
                   "diag_var": float(self.diag_var[l]),
                   "offdiag_var": float(self.offdiag_var[l])}
            if self.pi_trace is not None:
                rec["pi_trace"] = float(self.pi_trace[l])
                rec["pi_trace_stderr"] = float(self.pi_trace_stderr[l])
            out.append(rec)
        return out

    def to_json_lines(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records())


def _entry_variances(S: np.ndarray):
    B = S.shape[-1]
    off = ~np.eye(B, dtype=bool)
    d = np.diagonal(S, axis1=-2, axis2=-1)
    scale = np.maximum(d.mean(axis=-1) ** 2, 1e-300)
    return d.var(axis=-1) / scale, S[..., off].var(axis=-1) / scale


def _run(desc, cfg: McConfig, sigma0, backward: bool):
    B = cfg.batch
    sigma0 = random_input_covariance(B, cfg.seed) if sigma0 is None else np.asarray(sigma0, float)
    if sigma0.shape != (B, B):
        raise ValueError(f"input covariance must be {B}x{B}")
    jobs = range(cfg.replicas)
    nthreads = thread_count()
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            results = list(pool.map(lambda r: _replica(desc, cfg, sigma0, r, backward), jobs))
    else:
        results = [_replica(desc, cfg, sigma0, r, backward) for r in jobs]
    failures = [res.failed_at for res in results if res.failed_at is not None]
    good = [res for res in results if res.failed_at is None]
    if len(failures) > MAX_FAILURE_FRACTION * cfg.replicas or not good:
        raise SimulationError(
            f"{len(failures)} of {cfg.replicas} replicas produced non-finite values "
            f"(first failure at layer {min(failures)}) for {desc.text()}")
    return good, failures


def _mean_se(arr: np.ndarray):
    n = arr.shape[0]
    mean = arr.mean(axis=0)
    se = arr.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full_like(mean, np.nan)
    return mean, se


def _forward_estimate(cfg, good, failures, tol) -> McEstimate:
    S = np.stack([g.sigmas for g in good])  # (R, L+1, B, B)
    mean, se = _mean_se(S)
    dv, ov = _entry_variances(S)
    votes = {}
    for g in good:
        c = classify_symmetry(g.sigmas[-1], tol)["class"]
        votes[c] = votes.get(c, 0) + 1
    top = max(votes, key=votes.get)
    cls = top if votes[top] > len(good) / 2 else "indeterminate"
    return McEstimate(cfg, mean, se, dv.mean(axis=0), ov.mean(axis=0), cls,
                      failures=failures, class_votes=votes)


def simulate(desc: NonlinearityDescriptor, cfg: McConfig, sigma0=None, backward: bool = True,
             fit_window: Optional[tuple] = None, class_tol: float = CLASS_TOL) -> McEstimate:
    """Forward (and optionally backward) simulation with per-layer statistics.

    The default fit window for the gradient growth rate is layers
    [L/2, L-2] (at least two layers wide); pass ``fit_window=(lo, hi)`` (inclusive) to override it.
    """
    good, failures = _run(desc, cfg, sigma0, backward)
    est = _forward_estimate(cfg, good, failures, class_tol)
    if not backward:
        return est
    L = cfg.depth
    lo, hi = fit_window or (L // 2, max(L - 2, L // 2 + 1))
    if not 0 <= lo < hi <= L:
        raise ValueError(f"bad fit window {(lo, hi)} for depth {L}")
    P = np.stack([g.pis for g in good])
    est.pi_seq, est.pi_stderr = _mean_se(P)
    tr = np.trace(P, axis1=-2, axis2=-1)  # (R, L+1)
    est.pi_trace, est.pi_trace_stderr = _mean_se(tr)
    layers = np.arange(lo, hi + 1)
    depth_back = L - layers
    est.grad_log_slope = fit_log_rate(est.pi_trace[layers], depth_back)
    if len(good) > 1:
        per = np.array([fit_log_rate(t[layers], depth_back) for t in tr])
        est.grad_log_slope_stderr = float(per.std(ddof=1) / math.sqrt(len(per)))
    est.fit_window = (lo, hi)
    return est


def simulate_forward(desc: NonlinearityDescriptor, cfg: McConfig, sigma0=None,
                     class_tol: float = CLASS_TOL) -> McEstimate:
    """Forward half: empirical Sigma^l per layer and the symmetry class of Sigma^L."""
    return simulate(desc, cfg, sigma0, backward=False, class_tol=class_tol)


def simulate_backward(desc: NonlinearityDescriptor, cfg: McConfig, sigma0=None,
                      fit_window: Optional[tuple] = None) -> McEstimate:
    """Forward pass followed by backprop of a standard Gaussian terminal gradient."""
    return simulate(desc, cfg, sigma0, backward=True, fit_window=fit_window)


# ---------------------------------------------------------------------------
# Cross-batch decorrelation
# ---------------------------------------------------------------------------

@dataclass
class CrossBatchEstimate:
    config: McConfig
    correlation: np.ndarray      # per-layer G-projected cross-batch correlation
    correlation_stderr: np.ndarray
    rate: float
    rate_stderr: float
    fit_window: tuple
    cross_block: np.ndarray      # replica-mean cross-batch block at the last layer
    within_block: np.ndarray


def _cross_replica(desc, cfg, sigma0, r):
    N, B, L = cfg.width, cfg.batch, cfg.depth
    rng = _stream(cfg.seed, r, 0xCB)
    H = _gaussian_rows(rng, sigma0, N)
    corr = np.empty(L + 1)
    G = centering(B)
    with np.errstate(all="ignore"):
        for l in range(L + 1):
            S = H.T @ H / N
            A, Bb, C = G @ S[:B, :B] @ G, G @ S[B:, B:] @ G, G @ S[:B, B:] @ G
            corr[l] = np.trace(C) / math.sqrt(np.trace(A) * np.trace(Bb))
            if l == L:
                break
            Y1, inv1 = bn_forward(np.ascontiguousarray(H[:, :B]), cfg.epsilon)
            Y2, inv2 = bn_forward(np.ascontiguousarray(H[:, B:]), cfg.epsilon)
            X = desc.eval(np.hstack([Y1, Y2]))
            if not np.all(np.isfinite(X)):
                return None, S
            H = _gaussian_rows(rng, X.T @ X / N, N)
    return corr, S


def _cross_fit_window(mean, se, L):
    """Layers where the decay is linear: after the correlation drops below 1/4
    and before it reaches five standard errors.  Falls back to [L/2, L-2]."""
    below = np.flatnonzero(mean < 0.25)
    if below.size:
        lo = int(below[0])
        ok = (mean > 5 * se) & (mean > 1e-3)
        hi = lo
        while hi + 1 <= L and ok[hi + 1]:
            hi += 1
        if hi - lo >= 3:
            return lo, hi
    return L // 2, L - 2


def simulate_cross_batch(desc: NonlinearityDescriptor, cfg: McConfig, perturbation: float = 0.1,
                         sigma0=None, fit_window: Optional[tuple] = None) -> CrossBatchEstimate:
    """Propagate two batches through the same network and track their correlation.

    The second batch equals the first except that sample 0 is replaced by a
    perturbed copy (correlation 1 - perturbation with the original).  The
    correlation is tr(G C G) / sqrt(tr(G A G) tr(G B G)) for the cross block
    C and the within-batch blocks A, B; its decay rate is fitted by OLS on
    log correlation over ``fit_window``.  By default the window starts when
    the correlation has fallen below 1/4 (nearly identical batches first
    leave the identical-batch fixed point slowly) and ends before the
    correlation reaches the sampling-noise floor.
    """
    B, L = cfg.batch, cfg.depth
    base = random_input_covariance(B, cfg.seed) if sigma0 is None else np.asarray(sigma0, float)
    J = np.zeros((2 * B, 2 * B))
    J[:B, :B] = J[B:, B:] = J[:B, B:] = J[B:, :B] = base
    if perturbation > 0:
        v = base[0, 0]
        J[0, B] = J[B, 0] = (1.0 - perturbation) * v
    outs = [_cross_replica(desc, cfg, J, r) for r in range(cfg.replicas)]
    good = [o for o in outs if o[0] is not None]
    nfail = len(outs) - len(good)
    if nfail > MAX_FAILURE_FRACTION * cfg.replicas or not good:
        raise SimulationError(f"{nfail} of {cfg.replicas} cross-batch replicas failed")
    corr = np.stack([o[0] for o in good])
    mean, se = _mean_se(corr)
    lo, hi = fit_window or _cross_fit_window(mean, se, L)
    layers = np.arange(lo, hi + 1)
    slope = fit_log_rate(np.abs(mean[layers]), layers)
    per = [fit_log_rate(np.abs(c[layers]), layers) for c in corr if np.all(c[layers] > 0)]
    slope_se = float(np.std(per, ddof=1) / math.sqrt(len(per))) if len(per) > 1 else float("nan")
    S_mean = np.mean([o[1] for o in good], axis=0)
    return CrossBatchEstimate(cfg, mean, se, math.exp(slope), math.exp(slope) * slope_se, (lo, hi),
                              S_mean[:B, B:], S_mean[:B, :B])


# ---------------------------------------------------------------------------
# Symmetry classification
# ---------------------------------------------------------------------------

def classify_symmetry(sigma, tol: float = CLASS_TOL) -> dict:
    """Classify a covariance as BSB1, BSB2 or indeterminate.

    BSB1: the variances of the diagonal and of the off-diagonal entries,
    relative to the squared mean diagonal, are both below ``tol``.  BSB2:
    splitting the samples by sorted diagonal into a leading block and the
    rest gives within-group variances (diagonals, off-diagonals of each
    block, cross entries) below ``tol`` relative to the squared larger block
    diagonal, while the two diagonal means differ by more than ``10 tol``
    relative to the mean diagonal.  The default tolerance sits above the
    sampling noise of width-1000 simulations.
    """
    S = np.asarray(getattr(sigma, "entries", sigma), dtype=float)
    B = S.shape[0]
    d = np.diag(S)
    scale2 = max(float(d.mean()) ** 2, 1e-300)
    dv, ov = (float(x) for x in _entry_variances(S))
    diag = {"diag_var": dv, "offdiag_var": ov}
    if dv < tol and ov < tol:
        return {"class": "BSB1", **diag}
    order = np.argsort(-d)
    best = None
    for k in range(1, B):
        a, b = order[:k], order[k:]
        groups = [d[a], d[b], S[np.ix_(a, b)].ravel()]
        for blk in (a, b):
            if len(blk) > 1:
                sub = S[np.ix_(blk, blk)]
                groups.append(sub[~np.eye(len(blk), dtype=bool)])
        big2 = max(float(d[a].mean()), float(d[b].mean())) ** 2
        within = max(float(g.var()) for g in groups) / big2
        gap = abs(float(d[a].mean() - d[b].mean())) / math.sqrt(scale2)
        if best is None or within < best[0]:
            best = (within, gap, k)
    within, gap, k = best
    diag.update(block_size=int(k), within_var=within, diag_gap=gap)
    if within < tol and gap > 10 * tol:
        return {"class": "BSB2", **diag}
    return {"class": "indeterminate", **diag}
