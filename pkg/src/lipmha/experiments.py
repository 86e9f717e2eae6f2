"""Desk-scale experiment harness: bound-tightness sweeps, the numerical
invertibility grid, and the dot-product divergence demonstration.

All entry points are deterministic functions of their seed and write
versioned CSV (schema tag in the first line, floats in shortest round-trip
form), so re-running a command reproduces files byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import MhaParams, mha_forward
from .bounds import bound_2, bound_inf
from .contractive import adversarial_batch, max_reconstruction_error
from .optimize import AdamState, make_jacobian_norm_objective, maximize_jacobian_norm

__all__ = [
    "DominanceViolation",
    "SweepRow",
    "glorot_params",
    "lower_bound_search",
    "bound_tightness_sweep",
    "invertibility_grid",
    "dp_divergence_demo",
]


class DominanceViolation(Exception):
    """An optimized lower bound exceeded the closed-form upper bound."""


@dataclass(frozen=True)
class SweepRow:
    """Top lower bounds and the matching upper bound for one sequence length."""

    n: int
    lower_bounds: tuple
    upper_bound: float
    restarts: int
    seed: int

    def __post_init__(self):
        for lb in self.lower_bounds:
            if lb > self.upper_bound:
                raise DominanceViolation(
                    f"lower bound {lb!r} exceeds upper bound {self.upper_bound!r} at n={self.n}"
                )


def glorot_params(d: int, h: int, kind: str, tied: bool, seed: int) -> MhaParams:
    """Random attention weights, uniform on +-sqrt(1 / (fan_in + fan_out))."""
    rng = np.random.default_rng([seed, 1])
    hd = d // h
    lim_qkv = math.sqrt(1.0 / (d + hd))
    lim_o = math.sqrt(1.0 / (2 * d))
    wq = rng.uniform(-lim_qkv, lim_qkv, size=(h, d, hd))
    wk = wq if tied else rng.uniform(-lim_qkv, lim_qkv, size=(h, d, hd))
    wv = rng.uniform(-lim_qkv, lim_qkv, size=(h, d, hd))
    wo = rng.uniform(-lim_o, lim_o, size=(d, d))
    return MhaParams(heads=h, dim=d, kind=kind, tied=tied, wq=wq, wk=wk, wv=wv, wo=wo)


def lower_bound_search(
    n: int,
    d: int = 1,
    h: int = 1,
    p="inf",
    restarts: int = 50,
    top_k: int = 5,
    seed: int = 0,
    max_steps: int = 5000,
    rel_tol: float = 1e-6,
    lr: float = 0.1,
) -> SweepRow:
    """Lower-bound the Lipschitz constant of identity-weight tied l2 attention.

    Each restart draws a scale c ~ U[0, 10], an input with entries U[-c, c],
    and maximizes ||J(X)||_p with Adam. The descending top_k results are
    returned beside the closed-form upper bound; any lower bound exceeding
    the upper bound raises DominanceViolation.
    """
    if not restarts >= top_k >= 1:
        raise ValueError("need restarts >= top_k >= 1")
    params = MhaParams.identity(d, h, kind="l2")
    if p == 2 or p == "2":
        upper = bound_2(params, n).value
        p = 2
    else:
        upper = bound_inf(params, n).value
        p = "inf"
    values = []
    for r in range(restarts):
        rng = np.random.default_rng([seed, n, r])
        c = rng.uniform(0.0, 10.0)
        x0 = rng.uniform(-c, c, size=(n, d))
        _, val = maximize_jacobian_norm(
            params, x0, p, lr=lr, max_steps=max_steps, rel_tol=rel_tol
        )
        values.append(val)
    top = tuple(sorted(values, reverse=True)[:top_k])
    return SweepRow(n=n, lower_bounds=top, upper_bound=upper, restarts=restarts, seed=seed)


def _format(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _write_csv(path, schema: str, header: list, rows: list) -> None:
    lines = [f"# schema={schema}", ",".join(header)]
    lines.extend(",".join(_format(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def bound_tightness_sweep(
    n_list,
    d: int = 1,
    h: int = 1,
    p="inf",
    restarts: int = 50,
    seed: int = 0,
    out_path=None,
    top_k: int = 5,
    max_steps: int = 5000,
    rel_tol: float = 1e-6,
) -> list[SweepRow]:
    """One lower-bound search per sequence length, optionally written as CSV."""
    n_list = [int(n) for n in n_list]
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be nonempty and strictly ascending")
    rows = [
        lower_bound_search(
            n, d, h, p, restarts=restarts, top_k=top_k, seed=seed,
            max_steps=max_steps, rel_tol=rel_tol,
        )
        for n in n_list
    ]
    if out_path is not None:
        header = ["n", "p", "upper_bound"]
        header += [f"lower_{i + 1}" for i in range(top_k)]
        header += ["restarts", "seed"]
        _write_csv(
            out_path,
            "lipmha.sweep.v1",
            header,
            [
                [row.n, "2" if p in (2, "2") else "inf", row.upper_bound, *row.lower_bounds, row.restarts, row.seed]
                for row in rows
            ],
        )
    return rows


def invertibility_grid(
    kind: str,
    c_list,
    iter_list,
    n: int = 64,
    d: int = 64,
    h: int = 8,
    batch: int = 128,
    seed: int = 0,
    out_path=None,
    u: float = 10.0,
) -> list[tuple]:
    """Max reconstruction error of the residual map over a (c, iterations) grid.

    kind "l2" inverts bound-normalized tied l2 attention (a true contraction
    for every c < 1); kind "dp" inverts raw dot-product attention scaled by c,
    for which no contraction guarantee exists. The batch stresses the
    dot-product pathology: one input row zero, the rest large.
    """
    c_list = [float(c) for c in c_list]
    iter_list = [int(i) for i in iter_list]
    if any(not 0.0 < c < 1.0 for c in c_list):
        raise ValueError("c values must lie in (0, 1)")
    if any(i < 1 for i in iter_list):
        raise ValueError("iteration counts must be >= 1")
    if kind not in ("dp", "l2"):
        raise ValueError("kind must be 'dp' or 'l2'")
    batch_inputs = adversarial_batch(batch, n, d, u=u, seed=seed)
    results = []
    if kind == "l2":
        params = glorot_params(d, h, kind="l2", tied=True, seed=seed)
        lip_bound = bound_inf(params, n).value

        def f(x):
            return mha_forward(x, params) / lip_bound

    else:
        params = glorot_params(d, h, kind="dp", tied=False, seed=seed)

        def f(x):
            return mha_forward(x, params)

    for c in c_list:
        for iters in iter_list:
            err = max_reconstruction_error(batch_inputs, f, c, iters)
            results.append((kind, c, iters, err))
    if out_path is not None:
        _write_csv(
            out_path,
            "lipmha.invert.v1",
            ["kind", "c", "iters", "max_error"],
            [list(r) for r in results],
        )
    return results


def dp_divergence_demo(
    n: int = 3,
    d: int = 1,
    steps: int = 500,
    lr: float = 0.1,
    seed: int = 0,
    out_path=None,
    u: float = 10.0,
) -> list[tuple]:
    """Adam ascent of ||J||_inf for a dot-product head from an adversarial start.

    Returns the (step, norm) trace; the norm keeps growing because the map is
    not Lipschitz. The raw trace may dip under momentum, but its running
    maximum only increases.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    params = MhaParams.identity(d, 1, kind="dp")
    rng = np.random.default_rng([seed, n, d])
    x = rng.uniform(-u, u, size=(n, d))
    x[0] = 0.0

    objective, grad = make_jacobian_norm_objective(params, "inf")
    trace = [(0, float(objective(x)))]
    state = AdamState(lr=lr)
    for step in range(1, steps + 1):
        x = state.ascend(x, grad(x))
        val = float(objective(x))
        if not np.isfinite(val):
            raise RuntimeError(f"objective became non-finite at step {step}")
        trace.append((step, val))
    if out_path is not None:
        _write_csv(
            out_path,
            "lipmha.diverge.v1",
            ["step", "j_norm_inf"],
            [list(t) for t in trace],
        )
    return trace
