"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible in
``pytest -v`` output as well as with ``-s``) and then asserts the same
condition.  Monte Carlo checks use fixed seeds.
"""
import math
import time

import numpy as np
import pytest
from scipy import special

from bnmf import eigen, fixed_point as fp, kernels, nonlin, specfun
from bnmf.mcsim import McConfig, random_input_covariance, simulate, simulate_forward, fit_log_rate


@pytest.fixture
def report(capsys):
    def _report(n, ok, text):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {text}")
        assert ok, text
    return _report


def j1(c):
    return (math.sqrt(1 - c * c) + (math.pi - math.acos(c)) * c) / math.pi


def test_c01_relu_fixed_point(report):
    t0 = time.perf_counter()
    err_lap = err_sph = err_c = 0.0
    for B in (4, 8, 16, 32):
        ref_c = j1(-1.0 / (B - 1))
        for m in fp.METHODS:
            p = fp.bsb1_fixed_point(nonlin.relu(), B, m)
            if m == "laplace":
                err_lap = max(err_lap, abs(p.q_star - 0.5))
            elif m == "spherical":
                err_sph = max(err_sph, abs(p.q_star - 0.5))
            err_c = max(err_c, abs(p.c_star - ref_c))
    dt = time.perf_counter() - t0
    ok = err_lap <= 1e-10 and err_sph <= 1e-8 and err_c <= 1e-8 and dt < 1.0
    report(1, ok, f"relu q* err laplace {err_lap:.1e} spherical {err_sph:.1e}, "
                  f"c* err {err_c:.1e}, {dt:.2f} s")


def test_c02_identity_fixed_point(report):
    worst = 0.0
    for B in (4, 5, 8, 16, 32):
        for m in fp.METHODS:
            p = fp.bsb1_fixed_point(nonlin.identity(), B, m)
            worst = max(worst, abs(p.q_star - 1), abs(p.c_star + 1 / (B - 1)),
                        abs(p.upsilon_star - B / (B - 1)))
    report(2, worst <= 1e-10, f"identity q*, c*, upsilon* max err {worst:.1e} over 3 methods")


def test_c03_linear_gradient_explosion(report):
    worst = 0.0
    for B in range(4, 129):
        lam = eigen.backward_eigen(nonlin.identity(), B, "gegenbauer")["lambda_G_down"]
        worst = max(worst, abs(lam - (B - 2) / (B - 3)))
    report(3, worst <= 1e-10, f"identity lambda_G_down vs (B-2)/(B-3), B=4..128: max err {worst:.1e}")


def test_c04_relu_large_batch_limits(report):
    relu = nonlin.relu()
    g512 = eigen.backward_eigen(relu, 512, "laplace")["lambda_G_down"]
    m512 = eigen.forward_eigen(relu, 512, "laplace")["lambda_M_up"]
    eg = abs(g512 - math.pi / (math.pi - 1))
    em = abs(m512 - math.pi / (2 * (math.pi - 1)))
    g = [eigen.backward_eigen(relu, B, "laplace")["lambda_G_down"] for B in range(4, 513)]
    lu = [eigen.forward_eigen(relu, B, "laplace")["lambda_L_up"] for B in range(4, 513)]
    dec = bool(np.all(np.diff(g) < 0))
    inc = bool(np.all(np.diff(lu) > 0))
    ok = eg <= 1e-2 and em <= 1e-2 and dec and inc
    report(4, ok, f"B=512 |lambda_G_down - pi/(pi-1)| = {eg:.2e}, |lambda_M_up - pi/(2(pi-1))| = {em:.2e}; "
                  f"lambda_G_down decreasing {dec}, lambda_L_up increasing {inc}")


def test_c05_cross_batch_rates(report):
    worst = 0.0
    for d in (nonlin.relu(), nonlin.identity(), nonlin.tanh()):
        for B in (4, 8, 32):
            fwd = eigen.cross_batch_eigen(d, B, "gegenbauer")
            bwd = eigen.cross_batch_eigen(d, B, "spherical")
            worst = max(worst, abs(fwd - bwd))
    id_err = 0.0
    id_vals = []
    for B in range(4, 129):
        formula = (B - 1) / 2 * math.exp(-2 * math.lgamma(B / 2 + 0.5) + 2 * math.lgamma(B / 2))
        val = eigen.cross_batch_eigen(nonlin.identity(), B, "gegenbauer")
        id_err = max(id_err, abs(val - formula))
        id_vals.append(val)
    inc = bool(np.all(np.diff(id_vals) > 0) and id_vals[-1] < 1)
    ok = worst <= 1e-8 and id_err <= 1e-10 and inc
    report(5, ok, f"forward vs backward route max diff {worst:.1e}; identity formula err {id_err:.1e}, "
                  f"increasing below 1: {inc}")


def test_c06_oracle_cross_check(report):
    t0 = time.perf_counter()
    relu, B = nonlin.relu(), 8
    fwd = eigen.forward_eigen(relu, B, "laplace")
    bwd = eigen.backward_eigen(relu, B, "laplace")
    fd = eigen.ultrasym_eigen(eigen.forward_brackets_fd(relu, B), B)
    br, se = eigen.backward_brackets_mc(relu, B, n_samples=2_000_000, seed=0)
    mc = eigen.ultrasym_eigen(br, B)
    dt = time.perf_counter() - t0
    eL = abs(fd["lambda_L"] - fwd["lambda_L_up"])
    eM = abs(fd["lambda_M"] - fwd["lambda_M_up"])
    eG = abs(mc["lambda_G"] - bwd["lambda_G_down"])
    ok = eL <= 1e-4 and eM <= 1e-4 and eG <= 1e-3 and dt < 30
    report(6, ok, f"finite-difference forward: dL {eL:.1e}, dM {eM:.1e}; sampled backward: "
                  f"dG {eG:.1e} (stderr {se:.1e}); {dt:.1f} s")


@pytest.mark.slow
def test_c07_monte_carlo_gradient_growth(report):
    relu = nonlin.relu()
    lines, ok = [], True
    for B in (4, 8, 16, 32, 64):
        cfg = McConfig(width=1000, batch=B, depth=50, replicas=200, seed=7)
        est = simulate(relu, cfg, fit_window=(10, 40))
        theory = eigen.backward_eigen(relu, B, "laplace")["lambda_G_down"]
        L = cfg.depth
        layers = np.arange(L // 2, L - 1)
        rate = math.exp(fit_log_rate(est.pi_trace[layers], L - layers))
        rate_err = rate / theory - 1
        slope_err = est.grad_log_slope / math.log(theory) - 1
        ok &= abs(rate_err) < 0.05 and abs(slope_err) < 0.05
        lines.append(f"B={B}: rate {rate:.4f} vs {theory:.4f} ({100 * rate_err:+.2f}%), "
                     f"log-slope 10-40 {100 * slope_err:+.2f}%")
    report(7, ok, "; ".join(lines))


@pytest.mark.slow
def test_c08_symmetry_breaking_transition(report):
    alphas = np.round(np.arange(1.0, 2.5 + 1e-9, 0.1), 10)
    classes, dv, lam = [], [], []
    for a in alphas:
        d = nonlin.alpha_relu(float(a))
        est = simulate_forward(d, McConfig(width=1000, batch=8, depth=100, replicas=20, seed=3))
        classes.append(est.cls)
        dv.append(float(est.diag_var[-1]))
        lam.append(eigen.forward_eigen(d, 8, "laplace")["lambda_L_up"])
    dv = np.array(dv)
    bsb1 = dv[[c == "BSB1" for c in classes]]
    bsb2 = dv[[c == "BSB2" for c in classes]]
    ratio = float(np.median(bsb2) / np.median(bsb1)) if bsb1.size and bsb2.size else float("nan")
    flip = next((i for i in range(len(classes)) if all(c == "BSB2" for c in classes[i:])), None)
    cross = next((i for i, v in enumerate(lam) if v > 1), None)
    ok = ratio > 10 and flip is not None and cross is not None and abs(flip - cross) <= 1
    report(8, ok, f"diag-variance median ratio BSB2/BSB1 = {ratio:.1f}; simulation flips at alpha="
                  f"{alphas[flip] if flip is not None else None}, lambda_L_up > 1 from alpha="
                  f"{alphas[cross] if cross is not None else None}")


def test_c09_identity_global_convergence(report):
    B = 6
    target_ratio = 1 - 2 / (B - 1 + 2)
    limit = B / (B - 1) * kernels.centering(B)
    worst_ratio, worst_lim = 0.0, 0.0
    for s in range(20):
        tr = fp.iterate_forward(nonlin.identity(), random_input_covariance(B, s), steps=50, tol=1e-15)
        settled = float(np.median(tr.gap_ratio[-10:]))
        worst_ratio = max(worst_ratio, abs(settled / target_ratio - 1))
        worst_lim = max(worst_lim, float(np.abs(tr.final - limit).max()))
    ok = worst_ratio < 0.10 and worst_lim < 1e-6
    report(9, ok, f"20 starts: gap ratio within {100 * worst_ratio:.2f}% of 5/7, "
                  f"max |Sigma - B/(B-1) G| = {worst_lim:.1e}")


def test_c10_identity_suite(report):
    msgs, ok = [], True
    # Gegenbauer orthogonality and normalization.
    err = 0.0
    for lam in (0.5, 1.5, 2.5):
        x, w = special.roots_gegenbauer(20, lam)
        tab = np.array([[specfun.gegenbauer(lam, n, t) for t in x] for n in range(12)])
        gram = (tab * w) @ tab.T
        norms = np.array([specfun.gegenbauer_norm(lam, n) for n in range(12)])
        err = max(err, float(np.abs(gram / np.sqrt(np.outer(norms, norms)) - np.eye(12)).max()))
    ok &= err <= 1e-8
    msgs.append(f"orthonormality {err:.1e}")
    # J_alpha endpoints and recurrence.
    err = 0.0
    for a in (0.5, 1.0, 1.5, 2.5, 3.0):
        err = max(err, abs(specfun.j_alpha(a, 1.0) - 1), abs(specfun.j_alpha(a, -1.0)))
        if a >= 2:
            for c in (-0.7, 0.1, 0.6):
                rhs = c * specfun.j_alpha(a - 1, c) + (a - 1) ** 2 / ((2 * a - 1) * (2 * a - 3)) * (
                    1 - c * c) * specfun.j_alpha(a - 2, c)
                err = max(err, abs(specfun.j_alpha(a, c) - rhs))
    ok &= err <= 1e-10
    msgs.append(f"J_alpha identities {err:.1e}")
    # Dirichlet form against sampling on the sphere.
    zs = []
    cases = [(nonlin.relu(), -1 / 5), (nonlin.relu(), 0.6), (nonlin.tanh(), 0.4), (nonlin.sin(), -0.1)]
    for seed, (d, t) in enumerate(cases):
        series = eigen.dirichlet_form(d, 6, t)
        mean, se = eigen.dirichlet_form_mc(d, 6, t, n_samples=1_000_000, seed=seed)
        zs.append(abs(series - mean) / se)
    ok &= max(zs) < 3
    msgs.append(f"Dirichlet |z| max {max(zs):.2f}")
    # Constant shifts only change a_0.
    err = 0.0
    for shift in (-2.0, 0.7, 3.5):
        for B in (4, 6, 10):
            a = nonlin.gegenbauer_coeffs(nonlin.tanh(), B, 30).coeffs
            b = nonlin.gegenbauer_coeffs(nonlin.custom(lambda z, s=shift: np.tanh(z) + s), B, 30).coeffs
            err = max(err, float(np.abs(a[1:] - b[1:]).max()))
    ok &= err <= 1e-9
    msgs.append(f"shift invariance {err:.1e}")
    report(10, ok, "; ".join(msgs))
