"""Gradient-ascent machinery for lower-bounding Lipschitz constants.

A lower bound on lip_p(f) is any observed value of ||J_f(X)||_p, so we
maximize that norm over the input with Adam. The infinity norm is piecewise
smooth; to tame subgradient switching, each step pins the block row that
currently attains the norm and differentiates that row's norm by central
finite differences.

Two gradient paths exist: a generic one that rebuilds the full Jacobian per
probe (fine at small N and D), and a vectorized incremental path for the
workhorse configuration of the tightness experiments (tied l2, identity
weights, D = H = 1) where the N x N Jacobian depends on a length-N input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import MhaParams
from .jacobian import jacobian_norm, mha_jacobian

__all__ = [
    "AdamState",
    "adam_maximize",
    "make_jacobian_norm_objective",
    "maximize_jacobian_norm",
]


@dataclass(eq=False)
class AdamState:
    """Plain Adam moment estimates; ``ascend`` moves uphill."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ascend(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        if self.m.shape != x.shape:
            raise ValueError("moment buffers do not match the variable shape")
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        return x + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_maximize(
    objective,
    grad,
    x0: np.ndarray,
    lr: float = 0.1,
    max_steps: int = 5000,
    rel_tol: float = 1e-6,
    window: int = 50,
) -> tuple[np.ndarray, float]:
    """Maximize a scalar objective with Adam, returning the best visited point.

    Stops when the objective has changed by less than rel_tol (relative to
    max(1, |value|)) across a trailing window of steps, or at max_steps.
    A non-finite objective value aborts with a diagnostic.
    """
    x = np.array(x0, dtype=np.float64)
    state = AdamState(lr=lr)
    history = [float(objective(x))]
    if not np.isfinite(history[0]):
        raise RuntimeError(f"objective is not finite at the start point: {history[0]}")
    best_x, best_val = x.copy(), history[0]
    for step in range(1, max_steps + 1):
        x = state.ascend(x, np.asarray(grad(x), dtype=np.float64))
        val = float(objective(x))
        if not np.isfinite(val):
            raise RuntimeError(f"objective became non-finite at step {step}: {val}")
        history.append(val)
        if val > best_val:
            best_x, best_val = x.copy(), val
        if step >= window:
            anchor = history[step - window]
            if abs(val - anchor) < rel_tol * max(1.0, abs(anchor)):
                break
    return best_x, best_val


# ---------------------------------------------------------------------------
# Generic objective: any params, any p, full Jacobian per probe.
# ---------------------------------------------------------------------------


def _block_row_inf(full: np.ndarray, i: int, out_dim: int) -> float:
    rows = full[i * out_dim : (i + 1) * out_dim]
    return float(np.max(np.sum(np.abs(rows), axis=1)))


def make_jacobian_norm_objective(params: MhaParams, p, fd_step: float = 1e-5):
    """Build (objective, grad) callables for maximizing ||J(X)||_p.

    For p=inf the gradient differentiates the norm of the block row that is
    currently maximal; for p=2 it differentiates the full norm. Both use
    central differences with the given probe step.
    """

    def full_norm(x: np.ndarray) -> float:
        return jacobian_norm(mha_jacobian(x, params), p)

    def fd_grad(scalar_fn, x: np.ndarray) -> np.ndarray:
        g = np.zeros_like(x)
        for j in range(x.shape[0]):
            for c in range(x.shape[1]):
                xp, xm = x.copy(), x.copy()
                xp[j, c] += fd_step
                xm[j, c] -= fd_step
                g[j, c] = (scalar_fn(xp) - scalar_fn(xm)) / (2.0 * fd_step)
        return g

    if p == 2:
        return full_norm, lambda x: fd_grad(full_norm, x)

    def row_value(x: np.ndarray, i: int) -> float:
        j = mha_jacobian(x, params)
        return _block_row_inf(j.assemble(), i, j.out_dim)

    def grad(x: np.ndarray) -> np.ndarray:
        j = mha_jacobian(x, params)
        full = j.assemble()
        i_star = int(np.argmax(np.sum(np.abs(full), axis=1))) // j.out_dim
        return fd_grad(lambda z: row_value(z, i_star), x)

    return full_norm, grad


# ---------------------------------------------------------------------------
# Fast path: tied l2 attention, identity weights, D = H = 1. The Jacobian of
# f(X) = P X collapses to scalars
#     J_ii = 2 Var_i + P_ii,   J_ij = P_ij (2 (x_j - mean_i)(x_i - x_j) + 1)
# with logits -(x_i - x_j)^2, whose row maximum sits at j = i and equals 0,
# so unnormalized softmax weights are exp(logit) directly.
# ---------------------------------------------------------------------------


def _identity_row_sums(x: np.ndarray) -> np.ndarray:
    """All N block-row sums of |J| for the identity-weight scalar case."""
    diff = x[:, None] - x[None, :]
    w = np.multiply(diff, diff)
    np.negative(w, out=w)
    # Weights below exp(-60) cannot move any sum (the diagonal weight is 1);
    # clipping keeps exp off its slow subnormal-output path.
    np.maximum(w, -60.0, out=w)
    np.exp(w, out=w)
    z = np.sum(w, axis=1)
    w /= z[:, None]
    mean = w @ x
    var = w @ np.square(x) - np.square(mean)
    # g <- |1 + 2 (x_j - mean_i) diff_ij| * p_ij, built in place.
    g = x[None, :] - mean[:, None]
    g *= diff
    g *= 2.0
    g += 1.0
    np.abs(g, out=g)
    g *= w
    s = np.sum(g, axis=1)
    diag = np.diagonal(w)
    return s - diag + np.abs(2.0 * var + diag)


def _identity_row_value(x: np.ndarray, i: int) -> float:
    """Row-i block-row sum of |J| for the identity-weight scalar case."""
    diff = x[i] - x
    w = np.exp(np.maximum(-diff * diff, -60.0))
    z = float(np.sum(w))
    p = w / z
    mean = float(p @ x)
    var = float(p @ (x * x)) - mean * mean
    g = 1.0 + 2.0 * (x - mean) * diff
    return float(np.sum(p * np.abs(g)) - p[i] + abs(2.0 * var + p[i]))


class _AbsSumEvaluator:
    """Evaluates t(u) = sum_j w_j |alpha_j - u beta_j| at many u in O(log N) each.

    Terms split into |beta| > 0 kinks m_j |r_j - u| with m_j = w_j |beta_j|,
    r_j = alpha_j / beta_j, plus a constant from the beta = 0 terms; sorting
    the kinks once turns each query into a searchsorted plus prefix-sum
    lookups. The mass-weighted sums are accumulated as w_j |beta_j| and
    w_j alpha_j sgn(beta_j), so huge ratios from tiny beta never propagate.
    """

    def __init__(self, w: np.ndarray, alpha: np.ndarray, beta: np.ndarray):
        kinked = beta != 0.0
        self.const = float(np.sum(w[~kinked] * np.abs(alpha[~kinked])))
        with np.errstate(over="ignore"):
            r = alpha[kinked] / beta[kinked]
        order = np.argsort(r)
        self.r = r[order]
        m = (w[kinked] * np.abs(beta[kinked]))[order]
        ms = (w[kinked] * alpha[kinked] * np.sign(beta[kinked]))[order]
        self.pm = np.concatenate([[0.0], np.cumsum(m)])
        self.ps = np.concatenate([[0.0], np.cumsum(ms)])

    def __call__(self, u: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.r, u)
        pm, ps = self.pm[pos], self.ps[pos]
        left = u * pm - ps
        right = (self.ps[-1] - ps) - u * (self.pm[-1] - pm)
        return self.const + left + right


def _identity_row_grad(x: np.ndarray, i: int, fd_step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the row-i sum, all coordinates at once.

    A probe of x_m (m != i) changes one softmax weight, so all probes share
    the unperturbed weights: each perturbed row sum is the base absolute sum
    re-evaluated at the probe's weighted mean (via _AbsSumEvaluator), plus
    scalar corrections swapping the probed term.
    """
    n = x.shape[0]
    xi = x[i]
    diff = xi - x
    w = np.exp(np.maximum(-diff * diff, -60.0))
    z = float(np.sum(w))
    s1 = float(w @ x)
    s2 = float(w @ (x * x))
    alpha = 1.0 + 2.0 * x * diff
    beta = 2.0 * diff
    t_of = _AbsSumEvaluator(w, alpha, beta)

    others = np.delete(np.arange(n), i)
    x_old = np.concatenate([x[others], x[others]])
    w_old = np.concatenate([w[others], w[others]])
    a_old = np.concatenate([alpha[others], alpha[others]])
    b_old = np.concatenate([beta[others], beta[others]])
    x_new = np.concatenate([x[others] + fd_step, x[others] - fd_step])
    w_new = np.exp(np.maximum(-np.square(xi - x_new), -60.0))
    a_new = 1.0 + 2.0 * x_new * (xi - x_new)
    b_new = 2.0 * (xi - x_new)

    z_new = z - w_old + w_new
    mean = (s1 - w_old * x_old + w_new * x_new) / z_new
    var = (s2 - w_old * np.square(x_old) + w_new * np.square(x_new)) / z_new - np.square(mean)

    t = t_of(mean)
    t = t - w_old * np.abs(a_old - mean * b_old) + w_new * np.abs(a_new - mean * b_new)
    p_ii = w[i] / z_new
    s_val = (t - w[i]) / z_new + np.abs(2.0 * var + p_ii)

    g = np.zeros(n)
    half = n - 1
    g[others] = (s_val[:half] - s_val[half:]) / (2.0 * fd_step)

    xp, xm = x.copy(), x.copy()
    xp[i] += fd_step
    xm[i] -= fd_step
    g[i] = (_identity_row_value(xp, i) - _identity_row_value(xm, i)) / (2.0 * fd_step)
    return g


def _is_identity_scalar_config(params: MhaParams) -> bool:
    return (
        params.kind == "l2"
        and params.tied
        and params.dim == 1
        and params.heads == 1
        and params.bq is None
        and float(params.wq[0, 0, 0]) == 1.0
        and float(params.wv[0, 0, 0]) == 1.0
        and float(params.wo[0, 0]) == 1.0
    )


def maximize_jacobian_norm(
    params: MhaParams,
    x0: np.ndarray,
    p,
    lr: float = 0.1,
    max_steps: int = 5000,
    rel_tol: float = 1e-6,
    window: int = 50,
    fd_step: float = 1e-5,
) -> tuple[np.ndarray, float]:
    """Adam ascent on ||J(X)||_p for the given attention map.

    Dispatches to the vectorized identity-weight path when it applies and to
    the generic full-Jacobian path otherwise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if p in ("inf", np.inf) and _is_identity_scalar_config(params):
        # Objective and gradient are evaluated at the same point each step;
        # memoize the row sums so the O(N^2) pass runs once per step.
        memo: dict = {"key": None, "sums": None}

        def row_sums(v: np.ndarray) -> np.ndarray:
            key = v.tobytes()
            if memo["key"] != key:
                memo["key"] = key
                memo["sums"] = _identity_row_sums(v)
            return memo["sums"]

        def objective(x: np.ndarray) -> float:
            return float(np.max(row_sums(x[:, 0])))

        def grad(x: np.ndarray) -> np.ndarray:
            v = x[:, 0]
            i_star = int(np.argmax(row_sums(v)))
            return _identity_row_grad(v, i_star, fd_step)[:, None]

    else:
        objective, grad = make_jacobian_norm_objective(params, p, fd_step)

    return adam_maximize(objective, grad, x0, lr=lr, max_steps=max_steps, rel_tol=rel_tol, window=window)
