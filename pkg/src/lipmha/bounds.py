"""Closed-form Lipschitz upper bounds for tied l2 multihead attention, plus
LayerNorm, composition, and dropout factors.

For sequence length N the two attention bounds are

    lip_inf <= (4 phi_inv(N-1) + (D/H)^(-1/2))
               * ||Wo^T||_inf * max_h ||Wq[h]||_inf ||Wq[h]^T||_inf
               * max_h ||Wv[h]^T||_inf

    lip_2   <= sqrt(N) / sqrt(D/H) * (4 phi_inv(N-1) + 1)
               * sqrt(sum_h ||Wq[h]||_2^2 ||Wv[h]||_2^2) * ||Wo||_2

where phi(x) = x exp(x+1). Both require tied query/key weights; the
dot-product kind and untied l2 attention admit no such bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .attention import MaskSet, MhaParams, LayerNormParams
from .linalg import op_norm_inf, phi_inv, power_iteration, spectral_norm_oracle

__all__ = [
    "BoundReport",
    "bound_inf",
    "bound_2",
    "bound_masked_inf",
    "layernorm_bound_inf",
    "composition_bound",
    "dropout_factor",
]

# Weight matrices above this dimension fall back from the exact Jacobi
# oracle to power iteration for 2-norms; the report records the backend.
EXACT_WEIGHT_NORM_MAX_DIM = 256
POWER_ITERS = 100


@dataclass(frozen=True)
class BoundReport:
    """A Lipschitz upper bound together with its factor decomposition."""

    p: str
    value: float
    phi_term: float
    weight_factors: dict
    n: int
    d: int
    h: int
    masked_effective_n: int | None = None
    masked_row_counts: tuple | None = None
    norm_backend: str | None = None

    def to_dict(self) -> dict:
        out = {
            "p": self.p,
            "value": self.value,
            "phi_term": self.phi_term,
            "weight_factors": dict(self.weight_factors),
            "n": self.n,
            "d": self.d,
            "h": self.h,
        }
        if self.masked_effective_n is not None:
            out["masked_effective_n"] = self.masked_effective_n
            out["masked_row_counts"] = list(self.masked_row_counts)
        if self.norm_backend is not None:
            out["norm_backend"] = self.norm_backend
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _require_tied_l2(params: MhaParams) -> None:
    if params.kind != "l2" or not params.tied:
        raise ValueError("bound holds only for tied L2 attention")


def bound_inf(params: MhaParams, n: int, _effective_n: int | None = None) -> BoundReport:
    """Infinity-norm Lipschitz upper bound for tied l2 attention at length n."""
    _require_tied_l2(params)
    if n < 2:
        raise ValueError("n must be >= 2")
    eff = n if _effective_n is None else _effective_n
    hd = params.head_dim
    phi_term = phi_inv(eff - 1)
    wo_t = op_norm_inf(params.wo.T)
    wq_factor = max(op_norm_inf(params.wq[h]) * op_norm_inf(params.wq[h].T) for h in range(params.heads))
    wv_factor = max(op_norm_inf(params.wv[h].T) for h in range(params.heads))
    value = (4.0 * phi_term + 1.0 / math.sqrt(hd)) * wo_t * wq_factor * wv_factor
    return BoundReport(
        p="inf",
        value=value,
        phi_term=phi_term,
        weight_factors={
            "wo_t_inf": wo_t,
            "wq_inf_product_max": wq_factor,
            "wv_t_inf_max": wv_factor,
            "head_dim_term": 1.0 / math.sqrt(hd),
        },
        n=n,
        d=params.dim,
        h=params.heads,
    )


def _spectral_norm(w: np.ndarray) -> tuple[float, str]:
    if max(w.shape) <= EXACT_WEIGHT_NORM_MAX_DIM:
        return spectral_norm_oracle(w), "jacobi"
    sigma, _ = power_iteration(w, iters=POWER_ITERS, seed=0)
    return sigma, "power"


def bound_2(params: MhaParams, n: int) -> BoundReport:
    """2-norm Lipschitz upper bound for tied l2 attention at length n."""
    _require_tied_l2(params)
    if n < 2:
        raise ValueError("n must be >= 2")
    hd = params.head_dim
    phi_term = phi_inv(n - 1)
    backend = "jacobi"
    sq_sum = 0.0
    for h in range(params.heads):
        sq, bq = _spectral_norm(params.wq[h])
        sv, bv = _spectral_norm(params.wv[h])
        if "power" in (bq, bv):
            backend = "power"
        sq_sum += sq * sq * sv * sv
    wo_2, bo = _spectral_norm(params.wo)
    if bo == "power":
        backend = "power"
    value = math.sqrt(n) / math.sqrt(hd) * (4.0 * phi_term + 1.0) * math.sqrt(sq_sum) * wo_2
    return BoundReport(
        p="2",
        value=value,
        phi_term=phi_term,
        weight_factors={
            "wo_2": wo_2,
            "wqv_2_sq_sum": sq_sum,
            "sqrt_n": math.sqrt(n),
            "head_dim_term": 1.0 / math.sqrt(hd),
        },
        n=n,
        d=params.dim,
        h=params.heads,
        norm_backend=backend,
    )


def bound_masked_inf(params: MhaParams, n: int, mask: MaskSet) -> BoundReport:
    """Masked variant of the infinity-norm bound.

    Each output row only sees its unmasked inputs, so the sequence-length
    term shrinks to the largest per-row unmasked count. Every position must
    attend to itself: a masked (i, i) invalidates the argument behind the
    bound and is rejected.
    """
    _require_tied_l2(params)
    mask.validate(n)
    for i in range(n):
        if (i, i) in mask.pairs:
            raise ValueError(f"fully self-masked row {i}: position must attend to itself")
    counts = mask.unmasked_counts(n)
    eff = int(np.max(counts))
    report = bound_inf(params, n, _effective_n=eff)
    return BoundReport(
        p=report.p,
        value=report.value,
        phi_term=report.phi_term,
        weight_factors=report.weight_factors,
        n=n,
        d=report.d,
        h=report.h,
        masked_effective_n=eff,
        masked_row_counts=tuple(int(c) for c in counts),
    )


def layernorm_bound_inf(p: LayerNormParams, d: int) -> float:
    """Infinity-norm Lipschitz bound for LayerNorm: eps^(-1/2) max|gamma| (d^2-2)/d."""
    if d < 2:
        raise ValueError("bound requires d >= 2 (one-dimensional LayerNorm is constant)")
    if p.gamma.shape[0] != d:
        raise ValueError("gamma length must equal d")
    if p.eps <= 0:
        raise ValueError("bound requires eps > 0")
    return float(np.max(np.abs(p.gamma))) * (d * d - 2.0) / d / math.sqrt(p.eps)


def composition_bound(factors) -> float:
    """Lipschitz bound of a composition: the product of the layer bounds."""
    out = 1.0
    for f in factors:
        if f < 0:
            raise ValueError("factors must be >= 0")
        out *= float(f)
    return out


def dropout_factor(keep_prob: float, mode: str) -> float:
    """Lipschitz factor of dropout: keep_prob at eval time, 1 during training
    (a diagonal binary matrix never expands any p-norm)."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must be in (0, 1]")
    if mode == "eval":
        return float(keep_prob)
    if mode == "train":
        return 1.0
    raise ValueError("mode must be 'train' or 'eval'")
