"""Dense matrix primitives: row softmax, operator norms, power iteration,
a Jacobi eigenvalue oracle, and the scalar map phi(x) = x*exp(x+1) with its
inverse.

All carriers are 2-D float64 numpy arrays (row-major). Minus infinity is a
legal entry only in logit matrices, where it marks masked positions.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "softmax_rows",
    "is_row_stochastic",
    "op_norm_inf",
    "power_iteration",
    "jacobi_eigenvalues",
    "spectral_norm_oracle",
    "phi",
    "phi_inv",
]


def as_matrix(a) -> np.ndarray:
    """Coerce input to a 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety.

    Entries equal to -inf receive exactly zero mass. A row consisting
    entirely of -inf has no valid distribution and raises.
    """
    logits = as_matrix(logits)
    if logits.shape[1] < 1:
        raise ValueError("logits must have at least one column")
    row_max = np.max(logits, axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise ValueError("fully masked row: a row contains no finite logit")
    # exp(-inf - finite) == 0 exactly, so masked entries drop out.
    w = np.exp(logits - row_max)
    return w / np.sum(w, axis=1, keepdims=True)


def is_row_stochastic(p, tol: float = 1e-12) -> bool:
    """True if all entries are >= 0 and every row sums to 1 within tol."""
    p = as_matrix(p)
    if np.any(p < 0):
        return False
    return bool(np.all(np.abs(p.sum(axis=1) - 1.0) <= tol))


def op_norm_inf(m) -> float:
    """Operator norm induced by the vector infinity norm: max absolute row sum."""
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(m), axis=1)))


def power_iteration(w, iters: int, seed: int = 0) -> tuple[float, np.ndarray]:
    """Estimate the largest singular value of ``w`` from below.

    Iterates b <- W^T W b / ||W^T W b||_2 from a random unit start vector and
    returns (sigma_tilde, b) with sigma_tilde = sqrt(b^T W^T W b / b^T b).
    The estimate never exceeds the true spectral norm (it is a Rayleigh
    quotient of W^T W), and it is non-decreasing in the iteration count.
    """
    w = as_matrix(w)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(w.shape[1])
    b /= np.linalg.norm(b)
    if not np.any(w):
        return 0.0, b
    gram = w.T @ w
    for _ in range(iters):
        nxt = gram @ b
        norm = np.linalg.norm(nxt)
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError("degenerate iterate: W^T W b vanished")
        b = nxt / norm
    sigma_sq = float(b @ (gram @ b)) / float(b @ b)
    return math.sqrt(max(sigma_sq, 0.0)), b


def jacobi_eigenvalues(s, max_sweeps: int = 100, tol: float = 1e-14) -> np.ndarray:
    """All eigenvalues of a symmetric matrix via cyclic Jacobi rotations.

    Sweeps rotate away every off-diagonal pair until the off-diagonal
    Frobenius mass falls below tol. Each annihilated entry is written as an
    exact zero and later rotations only mix off-diagonal entries among
    themselves, so the mass decays to zero with no roundoff floor. Exists
    solely as a test oracle; raises if the sweep budget is exhausted.
    """
    a = np.array(as_matrix(s), dtype=np.float64)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12, rtol=1e-12):
        raise ValueError("matrix must be symmetric")
    a = 0.5 * (a + a.T)
    if n == 1:
        return np.diagonal(a).copy()

    def off_mass() -> float:
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        return float(np.linalg.norm(off))

    for _ in range(max_sweeps):
        if off_mass() < tol:
            return np.sort(np.diagonal(a))
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-300 * max(1.0, abs(diff)):
                    # The rotation would be numerically the identity.
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                # Classic 2x2 symmetric Schur rotation zeroing a[p, q].
                tau = diff / (2.0 * apq)
                if tau == 0.0:
                    t = 1.0
                elif abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - sn * rq
                a[q, :] = sn * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - sn * cq
                a[:, q] = sn * cp + c * cq
                a[p, q] = 0.0
                a[q, p] = 0.0
    if off_mass() < tol:
        return np.sort(np.diagonal(a))
    raise RuntimeError(f"Jacobi sweep did not converge within {max_sweeps} sweeps")


def spectral_norm_oracle(w) -> float:
    """Exact largest singular value, sqrt of the top eigenvalue of W^T W.

    Runs the cyclic Jacobi sweep on whichever of W^T W / W W^T is smaller.
    """
    w = as_matrix(w)
    if not np.all(np.isfinite(w)):
        raise ValueError("matrix must be finite")
    if w.size == 0 or not np.any(w):
        return 0.0
    gram = w.T @ w if w.shape[1] <= w.shape[0] else w @ w.T
    eigs = jacobi_eigenvalues(gram)
    return math.sqrt(max(float(eigs[-1]), 0.0))


def phi(x):
    """The scalar map x * exp(x + 1), strictly increasing on x >= 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("phi is defined on x >= 0")
    out = x * np.exp(x + 1.0)
    return float(out) if out.ndim == 0 else out


def phi_inv(y):
    """Inverse of phi on y >= 0, by safeguarded Newton with bisection fallback.

    Accepts scalars or arrays. Solves x * exp(x + 1) = y on the bracket
    [0, max(1, log(1 + y)) + 1] to |phi(x) - y| <= 1e-12 * max(1, y).
    """
    y_arr = np.asarray(y, dtype=np.float64)
    scalar = y_arr.ndim == 0
    y_arr = np.atleast_1d(y_arr)
    if np.any(y_arr < 0):
        raise ValueError("phi_inv is defined on y >= 0")

    lo = np.zeros_like(y_arr)
    hi = np.maximum(1.0, np.log1p(y_arr)) + 1.0
    x = np.maximum(0.0, np.log1p(y_arr) - 1.0)
    # Solve past the advertised 1e-12 relative residual to leave margin.
    tol = 1e-13 * np.maximum(1.0, y_arr)

    for _ in range(100):
        ex = np.exp(x + 1.0)
        f = x * ex - y_arr
        done = np.abs(f) <= tol
        if np.all(done):
            break
        # Maintain the bracket: f is increasing in x.
        hi = np.where(f > 0, np.minimum(hi, x), hi)
        lo = np.where(f < 0, np.maximum(lo, x), lo)
        step = f / (ex * (1.0 + x))
        cand = x - step
        outside = (cand <= lo) | (cand >= hi)
        x = np.where(done, x, np.where(outside, 0.5 * (lo + hi), cand))

    x[y_arr == 0.0] = 0.0
    return float(x[0]) if scalar else x
