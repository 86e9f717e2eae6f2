"""Contractive attention and fixed-point inversion of residual maps.

Dividing tied l2 attention by its infinity-norm Lipschitz bound and scaling
by c < 1 yields a contraction, so the residual map g(X) = X + f(X) is
invertible and g^{-1}(Y) is the unique fixed point of

    x <- Y - f(x),

reached geometrically fast from any start (here x0 = Y). The same recursion
applied to a non-contractive residual branch, such as raw dot-product
attention, has no convergence guarantee; comparing reconstruction errors
between the two is the point of :func:`max_reconstruction_error`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import MhaParams, mha_forward
from .bounds import bound_inf
from .linalg import as_matrix

__all__ = [
    "ContractiveMha",
    "InversionResult",
    "contractive_forward",
    "residual_forward",
    "residual_inverse",
    "max_reconstruction_error",
    "adversarial_batch",
]


@dataclass(frozen=True, eq=False)
class ContractiveMha:
    """Tied l2 attention frozen at one sequence length and normalized to have
    Lipschitz bound c. The cached bound is the infinity-norm one, the tighter
    of the two closed forms."""

    params: MhaParams
    c: float
    n: int
    cached_bound: float

    def __post_init__(self):
        if not 0.0 < self.c < 1.0:
            raise ValueError("c must lie in (0, 1)")

    @classmethod
    def build(cls, params: MhaParams, c: float, n: int) -> "ContractiveMha":
        return cls(params=params, c=c, n=n, cached_bound=bound_inf(params, n).value)

    def normalized(self, x) -> np.ndarray:
        """Attention divided by its cached Lipschitz bound (bound <= 1)."""
        x = as_matrix(x)
        if x.shape[0] != self.n:
            raise ValueError(f"input has {x.shape[0]} rows but the cached bound is for n={self.n}")
        if self.cached_bound == 0.0:
            # Zero weights: the attention map is identically zero.
            return np.zeros_like(x)
        return mha_forward(x, self.params) / self.cached_bound


def contractive_forward(x, cm: ContractiveMha) -> np.ndarray:
    """c * attention(x) / cached_bound, a map with Lipschitz bound c."""
    return cm.c * cm.normalized(x)


def residual_forward(x, f) -> np.ndarray:
    """The residual map g(X) = X + f(X)."""
    x = as_matrix(x)
    return x + np.asarray(f(x), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class InversionResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def residual_inverse(y, f, tol: float = 1e-10, max_iter: int = 100, x0=None) -> InversionResult:
    """Invert g(X) = X + f(X) at y by fixed-point iteration x <- y - f(x).

    Starts from x0 (default: y itself) and stops once successive iterates
    differ by at most tol in the max norm, or after max_iter steps
    (converged=False then, not an error). tol=0 runs exactly max_iter
    iterations. The reported residual is ||y - x - f(x)||_inf at exit.
    """
    y = as_matrix(y)
    if tol < 0:
        raise ValueError("tol must be >= 0")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    x = y.copy() if x0 is None else as_matrix(x0).copy()
    if x.shape != y.shape:
        raise ValueError("x0 must match y's shape")
    converged = False
    iterations = 0
    for _ in range(max_iter):
        nxt = y - np.asarray(f(x), dtype=np.float64)
        step = float(np.max(np.abs(nxt - x)))
        x = nxt
        iterations += 1
        if tol > 0 and step <= tol:
            converged = True
            break
    residual = float(np.max(np.abs(y - x - np.asarray(f(x), dtype=np.float64))))
    return InversionResult(x=x, iterations=iterations, residual=residual, converged=converged)


def max_reconstruction_error(batch, f, c: float, iters: int) -> float:
    """Worst reconstruction error of the residual map over a batch.

    For each X the output Y = X + c f(X) is inverted by exactly ``iters``
    fixed-point iterations of x <- Y - c f(x); the return value is the largest
    ||X - x_hat||_inf across the batch.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("batch must be nonempty")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    worst = 0.0
    for x in batch:
        x = as_matrix(x)
        y = x + c * np.asarray(f(x), dtype=np.float64)
        result = residual_inverse(y, lambda z: c * np.asarray(f(z), dtype=np.float64), tol=0.0, max_iter=iters)
        worst = max(worst, float(np.max(np.abs(x - result.x))))
    return worst


def adversarial_batch(
    batch: int, n: int, d: int, *, u: float = 10.0, zero_row: int = 0, seed: int = 0
) -> list[np.ndarray]:
    """Inputs that stress the dot-product Jacobian: one row exactly zero, the
    rest i.i.d. uniform on [-u, u]."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if not 0 <= zero_row < n:
        raise ValueError("zero_row out of range")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(batch):
        x = rng.uniform(-u, u, size=(n, d))
        x[zero_row] = 0.0
        out.append(x)
    return out
