"""Exact analytical Jacobians of the attention maps and LayerNorm, plus a
central finite-difference oracle.

The Jacobian of a map from (N, D) to (N, D') is held as an N x N grid of
D' x D blocks, block (i, j) being the derivative of output row i with respect
to input row j. For the attention heads the blocks follow closed forms built
on the softmax derivative

    P_i = diag(p) - p p^T     for a probability row p,

which is symmetric, positive semi-definite, and annihilates the ones vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import MaskSet, MhaParams, LayerNormParams, head_probs
from .linalg import as_matrix, op_norm_inf, power_iteration, spectral_norm_oracle

__all__ = [
    "JacobianBlocks",
    "softmax_deriv",
    "dp_jacobian",
    "l2_jacobian_tied",
    "l2_jacobian_untied",
    "mha_jacobian",
    "layernorm_jacobian",
    "finite_diff_jacobian",
    "jacobian_norm",
]

# Above this assembled size, the 2-norm backend switches from the exact
# Jacobi oracle to 100 steps of power iteration.
EXACT_NORM_MAX_DIM = 256


@dataclass(frozen=True, eq=False)
class JacobianBlocks:
    """N x N grid of derivative blocks, stored as an (n, n, out_dim, in_dim) array."""

    blocks: np.ndarray

    def __post_init__(self):
        if self.blocks.ndim != 4 or self.blocks.shape[0] != self.blocks.shape[1]:
            raise ValueError("blocks must have shape (n, n, out_dim, in_dim)")

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def out_dim(self) -> int:
        return self.blocks.shape[2]

    @property
    def in_dim(self) -> int:
        return self.blocks.shape[3]

    def block(self, i: int, j: int) -> np.ndarray:
        return self.blocks[i, j]

    def assemble(self) -> np.ndarray:
        """Flatten the grid into an (n*out_dim, n*in_dim) matrix."""
        n, _, do, di = self.blocks.shape
        return self.blocks.transpose(0, 2, 1, 3).reshape(n * do, n * di)


def softmax_deriv(p_row) -> np.ndarray:
    """diag(p) - p p^T for a probability row p."""
    p = np.asarray(p_row, dtype=np.float64)
    return np.diag(p) - np.outer(p, p)


def _attention_cov(x: np.ndarray, p_row: np.ndarray) -> np.ndarray:
    """X^T (diag(p) - p p^T) X: the covariance of rows of X under weights p."""
    mean = p_row @ x
    return (x * p_row[:, None]).T @ x - np.outer(mean, mean)


def dp_jacobian(x, params: MhaParams, head: int = 0, mask: MaskSet | None = None) -> JacobianBlocks:
    """Exact Jacobian blocks of one dot-product head's map f(X) = P X.

    With A = W_k W_q^T / sqrt(D/H) the blocks are

        J_ij = P_ij (x_j - xbar_i) r_i^T + delta_ij X^T P_i X A + P_ij I,

    where xbar_i is the attention-weighted mean of rows and
    r_i^T = x_i^T A^T + bq^T W_k^T / sqrt(D/H) covers the optional bias.
    """
    x = as_matrix(x)
    if params.kind != "dp":
        raise ValueError("dp_jacobian requires dot-product params")
    n, d = x.shape
    hd = params.head_dim
    wq, wk = params.wq[head], params.wk[head]
    a = (wk @ wq.T) / math.sqrt(hd)
    p = head_probs(x, params, head, mask)
    eye = np.eye(d)
    blocks = np.zeros((n, n, d, d))
    for i in range(n):
        pi = p[i]
        xbar = pi @ x
        r = x[i] @ a.T
        if params.bq is not None:
            r = r + (params.bq @ wk.T) / math.sqrt(hd)
        dev = x - xbar
        # P_ij (x_j - xbar_i) r_i^T + P_ij I for every j.
        blocks[i] = pi[:, None, None] * (dev[:, :, None] * r[None, None, :] + eye[None, :, :])
        blocks[i, i] += _attention_cov(x, pi) @ a
    return JacobianBlocks(blocks)


def l2_jacobian_tied(x, params: MhaParams, head: int = 0, mask: MaskSet | None = None) -> JacobianBlocks:
    """Exact Jacobian blocks of one tied l2 head's map f(X) = P X A.

    With A = W_q W_q^T / sqrt(D/H):

        J_ii = 2 A X^T P_i X A + P_ii A
        J_ij = 2 P_ij A (x_j - xbar_i)(x_i - x_j)^T A + P_ij A   (i != j)
    """
    if params.kind != "l2":
        raise ValueError("l2_jacobian_tied requires l2 params")
    if not params.tied:
        raise ValueError("untied params: use l2_jacobian_untied")
    x = as_matrix(x)
    n = x.shape[0]
    a = params.query_gram(head)
    p = head_probs(x, params, head, mask)
    blocks = np.zeros((n, n, x.shape[1], x.shape[1]))
    for i in range(n):
        pi = p[i]
        xbar = pi @ x
        ad = (x - xbar) @ a.T
        ae = (x[i] - x) @ a.T
        blocks[i] = pi[:, None, None] * (2.0 * ad[:, :, None] * ae[:, None, :] + a[None, :, :])
        blocks[i, i] = 2.0 * a @ _attention_cov(x, pi) @ a + pi[i] * a
    return JacobianBlocks(blocks)


def l2_jacobian_untied(x, params: MhaParams, head: int = 0, mask: MaskSet | None = None) -> JacobianBlocks:
    """Exact Jacobian blocks of an l2 head with independent query/key weights.

    The head map is still f(X) = P X A with A built from W_q, but the logit
    derivative picks up separate query and key terms:

        Jt_ij = (2/sqrt(D/H)) [ delta_ij X^T P_i X W_k W_q^T
                                + P_ij (x_j - xbar_i)(q_i - k_j)^T W_k^T ] + P_ij I
        J_ij  = A Jt_ij

    which collapses to the tied form when W_q == W_k. The off-diagonal terms
    grow without bound in the untied case, so no Lipschitz bound applies.
    """
    if params.kind != "l2":
        raise ValueError("l2_jacobian_untied requires l2 params")
    x = as_matrix(x)
    n, d = x.shape
    hd = params.head_dim
    wq, wk = params.wq[head], params.wk[head]
    a = params.query_gram(head)
    scale = 2.0 / math.sqrt(hd)
    q = x @ wq
    k = x @ wk
    p = head_probs(x, params, head, mask)
    eye = np.eye(d)
    blocks = np.zeros((n, n, d, d))
    for i in range(n):
        pi = p[i]
        xbar = pi @ x
        dev = x - xbar
        rows = (q[i] - k) @ wk.T
        tilde = pi[:, None, None] * (scale * dev[:, :, None] * rows[:, None, :] + eye[None, :, :])
        tilde[i] += scale * _attention_cov(x, pi) @ (wk @ wq.T)
        blocks[i] = a @ tilde
    return JacobianBlocks(blocks)


def head_jacobian(x, params: MhaParams, head: int = 0, mask: MaskSet | None = None) -> JacobianBlocks:
    """Jacobian of one head's pre-value map, dispatching on kind and tying."""
    if params.kind == "dp":
        return dp_jacobian(x, params, head, mask)
    if params.tied:
        return l2_jacobian_tied(x, params, head, mask)
    return l2_jacobian_untied(x, params, head, mask)


def mha_jacobian(x, params: MhaParams, mask: MaskSet | None = None) -> JacobianBlocks:
    """Jacobian blocks of the full multihead map, chained through the constant
    value and output projections:

        J_ij = W_o^T vstack_h( W_v[h]^T J^h_ij ).
    """
    x = as_matrix(x)
    n, d = x.shape
    per_head = [head_jacobian(x, params, h, mask).blocks for h in range(params.heads)]
    stacked = np.concatenate(
        [np.einsum("oh,ijhc->ijoc", params.wv[h].T, per_head[h]) for h in range(params.heads)],
        axis=2,
    )
    return JacobianBlocks(np.einsum("ab,ijbc->ijac", params.wo.T, stacked))


def layernorm_jacobian(x, p: LayerNormParams) -> np.ndarray:
    """Exact D x D Jacobian of LayerNorm at x:

    (s2 + eps)^(-1/2) [ diag(g) - g 1^T / D
                        - diag(g) (x - mu)(x - mu)^T / (D (s2 + eps)) ]
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    g = p.gamma
    mu = float(np.mean(x))
    s2 = float(np.mean((x - mu) ** 2))
    z = x - mu
    inv = 1.0 / (s2 + p.eps)
    core = np.diag(g) - np.outer(g, np.ones(d)) / d - inv * np.diag(g) @ np.outer(z, z) / d
    return math.sqrt(inv) * core


def finite_diff_jacobian(f, x, h: float = 1e-5) -> JacobianBlocks:
    """Central-difference Jacobian oracle: (f(X + h e) - f(X - h e)) / 2h per coordinate."""
    x = as_matrix(x)
    if h <= 0:
        raise ValueError("h must be positive")
    n, d = x.shape
    out = np.asarray(f(x), dtype=np.float64)
    do = out.shape[1]
    blocks = np.zeros((n, n, do, d))
    for j in range(n):
        for c in range(d):
            xp = x.copy()
            xm = x.copy()
            xp[j, c] += h
            xm[j, c] -= h
            diff = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
            blocks[:, j, :, c] = diff
    return JacobianBlocks(blocks)


def jacobian_norm(j: JacobianBlocks, p, method: str = "auto") -> float:
    """Operator norm of the assembled Jacobian.

    p=inf is the maximum absolute row sum. p=2 uses the exact Jacobi oracle up
    to assembled dimension 256 and a 100-step power iteration beyond
    (method="exact" or "power" overrides the switch).
    """
    full = j.assemble()
    if p in ("inf", np.inf, math.inf):
        return op_norm_inf(full)
    if p != 2:
        raise ValueError("p must be 2 or inf")
    if method not in ("auto", "exact", "power"):
        raise ValueError(f"unknown method {method!r}")
    if method == "exact" or (method == "auto" and max(full.shape) <= EXACT_NORM_MAX_DIM):
        return spectral_norm_oracle(full)
    sigma, _ = power_iteration(full, iters=100, seed=0)
    return sigma
