"""Command-line interface: ``bnmf <command> [options]``.

Every output file starts with a run manifest (command, activation, batch
sizes, methods, quadrature settings, Monte Carlo settings, seed, version) so
that results are self-describing.  Exit codes: 0 success, 1 numerical
failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from datetime import datetime, timezone
from typing import List, Optional

import numpy as np

from . import __version__
from .eigen import (DegenerateGradientError, backward_eigen, cross_batch_eigen, depth_scale,
                    eigen_report, forward_eigen, trainable_depth)
from .fixed_point import (METHODS, MethodInapplicableError, bsb1_fixed_point,
                          cross_batch_constant)
from .kernels import QuadratureSpec, SingularCovarianceError
from .mcsim import (McConfig, SimulationError, classify_symmetry, simulate,
                    simulate_cross_batch)
from .nonlin import alpha_relu, gegenbauer_coeffs, parse_descriptor


class UsageError(Exception):
    """Bad arguments detected after parsing (exit code 2)."""


NUMERIC_ERRORS = (MethodInapplicableError, DegenerateGradientError, SingularCovarianceError,
                  SimulationError, ArithmeticError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def parse_batch_range(text: str) -> List[int]:
    """'8', '4,8,16', '4:64' (inclusive) or '4:64:4'."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) == 2:
                parts.append(1)
            lo, hi, step = parts
            if step <= 0 or hi < lo:
                raise ValueError
            return list(range(lo, hi + 1, step))
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad batch-size list {text!r}") from None


def parse_float_range(text: str) -> List[float]:
    """'a:b:step' inclusive of b (up to rounding) or a comma list."""
    try:
        if ":" in text:
            a, b, s = (float(p) for p in text.split(":"))
            n = int(math.floor((b - a) / s + 1e-9)) + 1
            return [round(a + i * s, 12) for i in range(n)]
        return [float(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}") from None


def _descriptor(text):
    try:
        return parse_descriptor(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _check_batches(Bs, minimum):
    bad = [B for B in Bs if B < minimum]
    if bad:
        raise UsageError(f"batch size must be B >= {minimum} (got {bad[0]}); "
                         "for B = 2 batchnorm outputs are constant and gradients vanish")


def _methods(arg):
    return list(METHODS) if arg == "all" else [arg]


def _spec(args) -> QuadratureSpec:
    return QuadratureSpec(nodes_per_angle=args.nodes, l_max=args.lmax)


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def build_manifest(args, **extra) -> dict:
    man = {
        "command": args.command,
        "descriptor": args.phi.text() if getattr(args, "phi", None) is not None else None,
        "batch": getattr(args, "B", None),
        "methods": getattr(args, "method", None),
        "quadrature": {"nodes_per_angle": getattr(args, "nodes", None),
                       "l_max": getattr(args, "lmax", None)},
        "mc": None,
        "output": getattr(args, "output", None),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    man.update(extra)
    return man


def render(manifest: dict, rows: List[dict], fmt: str, columns: Optional[List[str]] = None) -> str:
    if fmt == "json":
        return json.dumps({"manifest": manifest, "results": rows}, indent=2, default=_json_default) + "\n"
    columns = columns or (list(rows[0].keys()) if rows else [])
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(manifest, default=_json_default) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def emit(args, text: str) -> None:
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _finite(x):
    """JSON has no infinity; the tagged 'no explosion' depth scale becomes None."""
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fixed_point(args) -> int:
    _check_batches(args.B, 3)
    spec = _spec(args)
    rows = []
    skipped = []
    for B in args.B:
        for m in _methods(args.method):
            try:
                p = bsb1_fixed_point(args.phi, B, m, spec)
            except MethodInapplicableError as exc:
                if args.method != "all":
                    raise
                skipped.append({"B": B, "method": m, "reason": str(exc)})
                continue
            c_cb = cross_batch_constant(args.phi, B, spec, method=m).c_cb
            rows.append({"B": B, "method": m, "q_star": p.q_star, "c_star": p.c_star,
                         "upsilon_star": p.upsilon_star, "nu_star": p.nu_star, "c_cb": c_cb})
    emit(args, render(build_manifest(args, skipped=skipped), rows, args.format))
    return 0


EIGEN_COLUMNS = ["B", "lambda_G_down", "lambda_L_down", "lambda_M_down", "lambda_L_up",
                 "lambda_M_up", "lambda_cb", "xi", "depth16"]


def cmd_eigen(args) -> int:
    _check_batches(args.B, 4)
    spec = _spec(args)
    rows = []
    for B in args.B:
        rep = eigen_report(args.phi, B, args.method, spec)
        rows.append({"B": B, "lambda_G_down": rep.lambda_G_down, "lambda_L_down": rep.lambda_L_down,
                     "lambda_M_down": rep.lambda_M_down, "lambda_L_up": rep.lambda_L_up,
                     "lambda_M_up": rep.lambda_M_up, "lambda_cb": rep.lambda_cb,
                     "xi": _finite(rep.xi), "depth16": _finite(trainable_depth(rep.xi)),
                     "bsb1_stable": rep.bsb1_stability_flag, "status": rep.status})
    emit(args, render(build_manifest(args), rows, args.format, EIGEN_COLUMNS + ["status"]))
    return 0


def cmd_depth_scale(args) -> int:
    _check_batches(args.B, 4)
    spec = _spec(args)
    rows = []
    for B in args.B:
        lam = backward_eigen(args.phi, B, args.method, spec)["lambda_G_down"]
        xi = depth_scale(lam)
        rows.append({"B": B, "lambda_G_down": lam, "xi": _finite(xi),
                     "depth16": _finite(trainable_depth(xi))})
    emit(args, render(build_manifest(args), rows, args.format))
    return 0


def cmd_cross_batch(args) -> int:
    _check_batches(args.B, 4)
    spec = _spec(args)
    rows = []
    for B in args.B:
        for m in _methods(args.method):
            try:
                lam = cross_batch_eigen(args.phi, B, m, spec)
            except MethodInapplicableError:
                if args.method != "all":
                    raise
                continue
            c = cross_batch_constant(args.phi, B, spec, method="spherical" if m == "laplace" and
                                     args.phi.pos_hom is None else m)
            rows.append({"B": B, "method": m, "lambda_cb": lam, "c_cb": c.c_cb})
    emit(args, render(build_manifest(args), rows, args.format))
    return 0


def cmd_gegenbauer(args) -> int:
    _check_batches(args.B, 4)
    rows = []
    for B in args.B:
        s = gegenbauer_coeffs(args.phi, B, args.lmax)
        w = s.weights
        for l, a in enumerate(s.coeffs):
            rows.append({"B": B, "l": l, "a_l": float(a), "weight": float(w[l]),
                         "tail_bound": s.tail_bound})
    emit(args, render(build_manifest(args), rows, args.format))
    return 0


def _record(name, theory, emp, se, z_max=3.0):
    z = (emp - theory) / se if se > 0 else float("inf") * np.sign(emp - theory)
    return {"quantity": name, "theory": float(theory), "empirical": float(emp), "stderr": float(se),
            "z_score": float(z), "pass": bool(abs(z) < z_max)}


def cmd_mc_validate(args) -> int:
    if args.seed is None:
        raise UsageError("--seed is required for Monte Carlo commands")
    _check_batches(args.B, 4)
    cfg_kw = dict(width=args.width, depth=args.depth, replicas=args.replicas, seed=args.seed,
                  epsilon=args.epsilon, grad_independence=not args.true_weights)
    rows = []
    if args.alpha_sweep:
        for B in args.B:
            for a in args.alpha_sweep:
                desc = alpha_relu(a)
                cfg = McConfig(batch=B, **cfg_kw)
                est = simulate(desc, cfg, backward=False)
                lam = forward_eigen(desc, B, "laplace")["lambda_L_up"]
                rows.append({"B": B, "alpha": a, "lambda_L_up": lam, "class": est.cls,
                             "diag_var": float(est.diag_var[-1]),
                             "offdiag_var": float(est.offdiag_var[-1])})
        man = build_manifest(args, mc=cfg_kw)
        man["descriptor"] = "alpha-relu sweep"
        emit(args, render(man, rows, args.format))
        return 0
    spec = _spec(args)
    all_pass = True
    for B in args.B:
        cfg = McConfig(batch=B, **cfg_kw)
        point = bsb1_fixed_point(args.phi, B, "spherical", spec)
        est = simulate(args.phi, cfg)
        L = cfg.depth
        # Fixed-point entries from the replica means at the last layer.
        S = est.sigma_seq[-1]
        off = ~np.eye(B, dtype=bool)
        per_rep_diag = est.sigma_stderr[-1]
        d_se = float(np.sqrt((np.diag(per_rep_diag) ** 2).mean() / B))
        o_se = float(np.sqrt((per_rep_diag[off] ** 2).mean() / off.sum()))
        recs = [_record("q_star", point.q_star, float(np.diag(S).mean()), d_se),
                _record("nu_star", point.nu_star, float(S[off].mean()), o_se)]
        lam_g = backward_eigen(args.phi, B, "spherical", spec)["lambda_G_down"]
        recs.append(_record("log_lambda_G_down", math.log(lam_g), est.grad_log_slope,
                            est.grad_log_slope_stderr))
        cb = simulate_cross_batch(args.phi, McConfig(batch=B, **{**cfg_kw, "replicas": max(
            2, cfg.replicas // 2)}))
        lam_cb = cross_batch_eigen(args.phi, B, "spherical", spec)
        recs.append(_record("lambda_cb", lam_cb, cb.rate, cb.rate_stderr))
        cls = classify_symmetry(S)
        for r in recs:
            r.update({"B": B, "layers": L, "class": est.cls, "mean_class": cls["class"]})
            all_pass &= r["pass"]
        rows.extend(recs)
    emit(args, render(build_manifest(args, mc=cfg_kw, all_pass=all_pass), rows, args.format))
    return 0


COMMANDS = {
    "fixed-point": cmd_fixed_point,
    "eigen": cmd_eigen,
    "mc-validate": cmd_mc_validate,
    "cross-batch": cmd_cross_batch,
    "gegenbauer": cmd_gegenbauer,
    "depth-scale": cmd_depth_scale,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnmf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, methods=True, default_method="laplace"):
        sp.add_argument("--phi", type=_descriptor, required=True,
                        help="activation, e.g. relu, tanh, alpha-relu:1.5, 'tanh@gamma=0.1'")
        sp.add_argument("--B", type=parse_batch_range, required=True,
                        help="batch size, list '4,8' or inclusive range '4:64[:step]'")
        if methods:
            sp.add_argument("--method", choices=list(METHODS) + ["all"], default=default_method)
        sp.add_argument("--nodes", type=int, default=96, help="quadrature nodes per angle")
        sp.add_argument("--lmax", type=int, default=80, help="initial Gegenbauer truncation")
        sp.add_argument("--format", choices=["json", "csv"], default="json")
        sp.add_argument("--output", "-o", default=None, help="output file (default stdout)")

    common(sub.add_parser("fixed-point", help="BSB1 fixed point and cross-batch constant"))
    sp = sub.add_parser("eigen", help="eigenvalue sweep over batch sizes")
    common(sp)
    sp.set_defaults(format="csv")
    common(sub.add_parser("cross-batch", help="cross-batch rate and constant"), default_method="all")
    common(sub.add_parser("gegenbauer", help="Gegenbauer coefficients"), methods=False)
    sp = sub.add_parser("depth-scale", help="depth scale xi and predicted trainable depth 16 xi")
    common(sp)
    sp.set_defaults(format="csv")
    sp = sub.add_parser("mc-validate", help="Monte Carlo check against theory")
    common(sp, methods=False)
    sp.add_argument("--seed", type=int, default=None, help="master seed (required)")
    sp.add_argument("--width", type=int, default=1000)
    sp.add_argument("--depth", type=int, default=50)
    sp.add_argument("--replicas", type=int, default=50)
    sp.add_argument("--epsilon", type=float, default=0.0)
    sp.add_argument("--true-weights", action="store_true",
                    help="backpropagate through the forward weights instead of fresh copies")
    sp.add_argument("--alpha-sweep", type=parse_float_range, default=None,
                    help="sweep alpha-ReLU degrees a:b:step (ignores --phi) and report the symmetry class")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "mc-validate":
        args.method = None
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bnmf: error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"bnmf: numerical failure: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"bnmf: numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
