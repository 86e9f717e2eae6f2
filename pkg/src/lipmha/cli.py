"""Command-line harness.

Subcommands: ``sweep`` (bound tightness), ``invert`` (invertibility grid),
``diverge`` (dot-product divergence trace), ``bound`` (report for a params
file), ``selftest`` (quick invariant checks), ``plot`` (render a CSV as SVG).

Exit codes: 0 on success, 2 on a precondition violation, 3 if an optimized
lower bound ever exceeds its upper bound.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import experiments
from .attention import MhaParams, load_params, mha_forward
from .bounds import bound_2, bound_inf
from .experiments import DominanceViolation
from .jacobian import finite_diff_jacobian, jacobian_norm, l2_jacobian_tied, mha_jacobian
from .linalg import phi, phi_inv, power_iteration, softmax_rows, spectral_norm_oracle


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipmha", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="lower/upper bound sweep over sequence lengths")
    sweep.add_argument("--n", type=_int_list, default="100,200,300,400,500,600,700,800,900,1000",
                       help="comma-separated ascending sequence lengths")
    sweep.add_argument("--d", type=int, default=1)
    sweep.add_argument("--heads", type=int, default=1)
    sweep.add_argument("--p", choices=["2", "inf"], default="inf")
    sweep.add_argument("--restarts", type=int, default=50)
    sweep.add_argument("--top-k", type=int, default=5)
    sweep.add_argument("--max-steps", type=int, default=5000)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--json", action="store_true", help="write JSON instead of CSV")

    invert = sub.add_parser("invert", help="reconstruction-error grid for residual attention")
    invert.add_argument("--kind", choices=["dp", "l2"], required=True)
    invert.add_argument("--c", type=_float_list, default="0.5,0.7,0.9")
    invert.add_argument("--iters", type=_int_list, default="1,2,5,10,20,30,50")
    invert.add_argument("--n", type=int, default=64)
    invert.add_argument("--d", type=int, default=64)
    invert.add_argument("--heads", type=int, default=8)
    invert.add_argument("--batch", type=int, default=128)
    invert.add_argument("--seed", type=int, default=0)
    invert.add_argument("--out", required=True)
    invert.add_argument("--json", action="store_true")

    diverge = sub.add_parser("diverge", help="dot-product Jacobian norm ascent trace")
    diverge.add_argument("--n", type=int, default=3)
    diverge.add_argument("--d", type=int, default=1)
    diverge.add_argument("--steps", type=int, default=500)
    diverge.add_argument("--lr", type=float, default=0.1)
    diverge.add_argument("--seed", type=int, default=0)
    diverge.add_argument("--out", required=True)
    diverge.add_argument("--json", action="store_true")

    bound = sub.add_parser("bound", help="print the Lipschitz bound report for a params file")
    bound.add_argument("--params", required=True, help="path to a params JSON file")
    bound.add_argument("--n", type=int, required=True)
    bound.add_argument("--p", choices=["2", "inf"], default="inf")
    bound.add_argument("--out", default=None, help="write the JSON report here instead of stdout")

    selftest = sub.add_parser("selftest", help="run quick invariant checks")
    selftest.add_argument("--seed", type=int, default=0)

    plot = sub.add_parser("plot", help="render a result CSV as a static SVG line chart")
    plot.add_argument("--csv", required=True)
    plot.add_argument("--out", required=True)
    return parser


def _json_rows(path, header, rows) -> None:
    payload = [dict(zip(header, row)) for row in rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_sweep(args) -> int:
    rows = experiments.bound_tightness_sweep(
        args.n, args.d, args.heads, args.p, restarts=args.restarts, seed=args.seed,
        out_path=None if args.json else args.out, top_k=args.top_k, max_steps=args.max_steps,
    )
    if args.json:
        header = ["n", "p", "upper_bound", "lower_bounds", "restarts", "seed"]
        _json_rows(args.out, header, [
            [r.n, args.p, r.upper_bound, list(r.lower_bounds), r.restarts, r.seed] for r in rows
        ])
    return 0


def _cmd_invert(args) -> int:
    results = experiments.invertibility_grid(
        args.kind, args.c, args.iters, n=args.n, d=args.d, h=args.heads,
        batch=args.batch, seed=args.seed, out_path=None if args.json else args.out,
    )
    if args.json:
        _json_rows(args.out, ["kind", "c", "iters", "max_error"], [list(r) for r in results])
    return 0


def _cmd_diverge(args) -> int:
    trace = experiments.dp_divergence_demo(
        n=args.n, d=args.d, steps=args.steps, lr=args.lr, seed=args.seed,
        out_path=None if args.json else args.out,
    )
    if args.json:
        _json_rows(args.out, ["step", "j_norm_inf"], [list(t) for t in trace])
    return 0


def _cmd_bound(args) -> int:
    params = load_params(args.params)
    report = bound_2(params, args.n) if args.p == "2" else bound_inf(params, args.n)
    text = report.to_json() + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_selftest(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0

    def check(name: str, ok: bool) -> None:
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1

    x = np.linspace(0.0, 10.0, 101)
    check("phi_inv inverts phi on [0, 10]", bool(np.max(np.abs(phi_inv(phi(x)) - x)) < 1e-10))

    p = softmax_rows(rng.uniform(-50, 50, size=(16, 16)))
    check("softmax rows are stochastic", bool(np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12 and p.min() >= 0))

    w = rng.normal(size=(20, 20))
    sigma, _ = power_iteration(w, iters=200, seed=args.seed)
    exact = spectral_norm_oracle(w)
    check("power iteration matches the Jacobi oracle", abs(sigma - exact) < 1e-8 and sigma <= exact + 1e-10)

    params = MhaParams.identity(2, 1, kind="l2")
    xs = rng.uniform(-2, 2, size=(4, 2))
    analytic = l2_jacobian_tied(xs, params).assemble()
    numeric = finite_diff_jacobian(lambda z: mha_forward(z, params), xs).assemble()
    rel = np.linalg.norm(analytic - numeric) / max(1.0, np.linalg.norm(numeric))
    check("tied l2 Jacobian matches finite differences", rel < 1e-6)

    dominance_ok = True
    upper = bound_inf(params, 4).value
    for _ in range(10):
        xi = rng.uniform(-5, 5, size=(4, 2))
        if jacobian_norm(mha_jacobian(xi, params), "inf") > upper:
            dominance_ok = False
    check("upper bound dominates sampled Jacobian norms", dominance_ok)
    if not dominance_ok:
        return 3
    return 0 if failures == 0 else 1


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.csv, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# schema="):
        raise ValueError("not a recognized result CSV: missing schema line")
    schema = lines[0].split("=", 1)[1]
    header = lines[1].split(",")
    rows = [ln.split(",") for ln in lines[2:]]

    fig, ax = plt.subplots(figsize=(6, 4))
    if schema.startswith("lipmha.sweep"):
        ns = [int(r[0]) for r in rows]
        ax.plot(ns, [float(r[2]) for r in rows], marker="o", label="upper bound")
        lower_cols = [i for i, hname in enumerate(header) if hname.startswith("lower_")]
        for i in lower_cols:
            ax.plot(ns, [float(r[i]) for r in rows], marker=".", lw=0.8,
                    label=header[i] if i == lower_cols[0] else None)
        ax.set_xscale("log")
        ax.set_xlabel("sequence length N")
        ax.set_ylabel("Lipschitz bound")
    elif schema.startswith("lipmha.invert"):
        cs = sorted({r[1] for r in rows})
        for c in cs:
            pts = [(int(r[2]), float(r[3])) for r in rows if r[1] == c]
            pts.sort()
            ax.plot([a for a, _ in pts], [max(b, 1e-16) for _, b in pts], marker="o", label=f"c={c}")
        ax.set_yscale("log")
        ax.set_xlabel("fixed-point iterations")
        ax.set_ylabel("max reconstruction error")
    elif schema.startswith("lipmha.diverge"):
        ax.plot([int(r[0]) for r in rows], [float(r[1]) for r in rows], lw=1.0, label="||J||_inf")
        ax.set_yscale("log")
        ax.set_xlabel("ascent step")
        ax.set_ylabel("Jacobian norm")
    else:
        raise ValueError(f"unknown schema {schema!r}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    plt.close(fig)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "sweep": _cmd_sweep,
        "invert": _cmd_invert,
        "diverge": _cmd_diverge,
        "bound": _cmd_bound,
        "selftest": _cmd_selftest,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except DominanceViolation as exc:
        print(f"dominance violation: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
