"""Multihead self-attention forward maps.

Two attention kinds share one parameter container:

* ``"dp"``: scaled dot-product logits, heads compute ``P X W_v``.
* ``"l2"``: logits are negative scaled squared euclidean distances between
  projected queries and keys; heads compute ``P X A_h`` with
  ``A_h = W_q W_q^T / sqrt(D/H)`` before the value projection.

Head outputs are concatenated and right-multiplied by the output projection.
Masking forces selected logits to -inf so the softmax assigns them zero mass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix, softmax_rows

__all__ = [
    "MhaParams",
    "MaskSet",
    "LayerNormParams",
    "dp_logits",
    "l2_logits",
    "apply_mask",
    "mha_forward",
    "layer_norm",
    "params_to_dict",
    "params_from_dict",
    "save_params",
    "load_params",
]

KINDS = ("dp", "l2")


@dataclass(frozen=True, eq=False)
class MhaParams:
    """Weights of a multihead self-attention map.

    ``wq``, ``wk``, ``wv`` have shape (H, D, D/H); ``wo`` is (D, D). Optional
    query/key biases (length D/H, shared across heads) are supported for the
    dot-product kind only. ``tied`` asserts wq[h] == wk[h] for every head,
    which is what makes the l2 kind Lipschitz.
    """

    heads: int
    dim: int
    kind: str
    tied: bool
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.heads < 1 or self.dim < 1 or self.dim % self.heads != 0:
            raise ValueError("heads must divide dim")
        hd = self.head_dim
        for name in ("wq", "wk", "wv"):
            w = getattr(self, name)
            if w.shape != (self.heads, self.dim, hd):
                raise ValueError(f"{name} must have shape {(self.heads, self.dim, hd)}, got {w.shape}")
        if self.wo.shape != (self.dim, self.dim):
            raise ValueError(f"wo must have shape {(self.dim, self.dim)}, got {self.wo.shape}")
        if self.tied and not np.array_equal(self.wq, self.wk):
            raise ValueError("tied params require wq == wk for every head")
        if self.kind == "l2" and (self.bq is not None or self.bk is not None):
            raise ValueError("biases are supported for the dp kind only")
        for name in ("bq", "bk"):
            b = getattr(self, name)
            if b is not None and b.shape != (hd,):
                raise ValueError(f"{name} must have shape {(hd,)}, got {b.shape}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def query_gram(self, head: int) -> np.ndarray:
        """A_h = W_q W_q^T / sqrt(D/H), the per-head mixing matrix of l2 heads."""
        wq = self.wq[head]
        return (wq @ wq.T) / math.sqrt(self.head_dim)

    @classmethod
    def build(cls, wq, wv, wo, *, wk=None, kind="l2", bq=None, bk=None) -> "MhaParams":
        """Assemble params from per-head weight stacks; wk=None ties keys to queries."""
        wq = np.asarray(wq, dtype=np.float64)
        tied = wk is None
        wk = wq if tied else np.asarray(wk, dtype=np.float64)
        wv = np.asarray(wv, dtype=np.float64)
        wo = np.asarray(wo, dtype=np.float64)
        h, d = wq.shape[0], wq.shape[1]
        bq = None if bq is None else np.asarray(bq, dtype=np.float64)
        bk = None if bk is None else np.asarray(bk, dtype=np.float64)
        if not tied:
            tied = bool(np.array_equal(wq, wk))
        return cls(heads=h, dim=d, kind=kind, tied=tied, wq=wq, wk=wk, wv=wv, wo=wo, bq=bq, bk=bk)

    @classmethod
    def identity(cls, dim: int, heads: int = 1, kind: str = "l2") -> "MhaParams":
        """Tied params with identity-like weights: eye(D) columns per head, wo = eye(D)."""
        hd = dim // heads
        wq = np.stack([np.eye(dim, hd) for _ in range(heads)])
        wv = wq.copy()
        return cls.build(wq, wv, np.eye(dim), kind=kind)


@dataclass(frozen=True)
class MaskSet:
    """Set of (i, j) attention positions whose logits are forced to -inf."""

    pairs: frozenset = field(default_factory=frozenset)

    @classmethod
    def from_pairs(cls, pairs) -> "MaskSet":
        return cls(frozenset((int(i), int(j)) for i, j in pairs))

    @classmethod
    def causal(cls, n: int) -> "MaskSet":
        """Mask everything above the diagonal, so row i attends to j <= i."""
        return cls(frozenset((i, j) for i in range(n) for j in range(i + 1, n)))

    def validate(self, n: int) -> None:
        for i, j in self.pairs:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"mask index {(i, j)} out of range for n={n}")
        counts = self.unmasked_counts(n)
        if np.any(counts == 0):
            raise ValueError("fully masked row in mask set")

    def unmasked_counts(self, n: int) -> np.ndarray:
        """Number of unmasked positions per row."""
        counts = np.full(n, n, dtype=np.int64)
        for i, _ in self.pairs:
            counts[i] -= 1
        return counts

    def bool_matrix(self, n: int) -> np.ndarray:
        m = np.zeros((n, n), dtype=bool)
        for i, j in self.pairs:
            m[i, j] = True
        return m


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    """LayerNorm gain/shift and variance offset. eps=0 is legal for the plain
    forward map but the Lipschitz bound requires eps > 0."""

    gamma: np.ndarray
    beta: np.ndarray
    eps: float

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and beta must be 1-D with equal length")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")


def dp_logits(x, wq, wk, bq=None, bk=None) -> np.ndarray:
    """Scaled dot-product logits: (x_i^T wq + bq) . (x_j^T wk + bk) / sqrt(D/H)."""
    x = as_matrix(x)
    wq = np.asarray(wq, dtype=np.float64)
    wk = np.asarray(wk, dtype=np.float64)
    if x.shape[1] != wq.shape[0] or wq.shape != wk.shape:
        raise ValueError("input and projection shapes are inconsistent")
    q = x @ wq
    k = x @ wk
    if bq is not None:
        q = q + np.asarray(bq, dtype=np.float64)
    if bk is not None:
        k = k + np.asarray(bk, dtype=np.float64)
    return (q @ k.T) / math.sqrt(wq.shape[1])


def l2_logits(x, wq, wk) -> np.ndarray:
    """Negative scaled squared distances between projected queries and keys.

    Entry (i, j) is -||x_i^T wq - x_j^T wk||^2 / sqrt(D/H), evaluated through
    the expansion ||a||^2 - 2 a.b + ||b||^2 so only matrix products and
    row-wise norms are needed.
    """
    x = as_matrix(x)
    wq = np.asarray(wq, dtype=np.float64)
    wk = np.asarray(wk, dtype=np.float64)
    if x.shape[1] != wq.shape[0] or wq.shape != wk.shape:
        raise ValueError("input and projection shapes are inconsistent")
    q = x @ wq
    k = x @ wk
    sq = np.sum(q * q, axis=1)
    sk = np.sum(k * k, axis=1)
    return -(sq[:, None] - 2.0 * (q @ k.T) + sk[None, :]) / math.sqrt(wq.shape[1])


def apply_mask(logits, mask: MaskSet | None) -> np.ndarray:
    """Force masked logits to -inf; everything else passes through unchanged."""
    logits = as_matrix(logits)
    if mask is None or not mask.pairs:
        return logits.copy()
    n = logits.shape[0]
    out = logits.copy()
    for i, j in mask.pairs:
        if not (0 <= i < n and 0 <= j < logits.shape[1]):
            raise ValueError(f"mask index {(i, j)} out of range for n={n}")
        out[i, j] = -np.inf
    return out


def head_probs(x, params: MhaParams, head: int, mask: MaskSet | None = None) -> np.ndarray:
    """Attention probabilities of one head, after masking."""
    if params.kind == "dp":
        logits = dp_logits(x, params.wq[head], params.wk[head], params.bq, params.bk)
    else:
        logits = l2_logits(x, params.wq[head], params.wk[head])
    return softmax_rows(apply_mask(logits, mask))


def mha_forward(x, params: MhaParams, mask: MaskSet | None = None) -> np.ndarray:
    """Full multihead attention map from (N, D) to (N, D)."""
    x = as_matrix(x)
    if x.shape[1] != params.dim:
        raise ValueError(f"input has {x.shape[1]} columns, params expect {params.dim}")
    outs = []
    for h in range(params.heads):
        p = head_probs(x, params, h, mask)
        f = p @ x
        if params.kind == "l2":
            f = f @ params.query_gram(h)
        outs.append(f @ params.wv[h])
    return np.concatenate(outs, axis=1) @ params.wo


def layer_norm(x, p: LayerNormParams) -> np.ndarray:
    """Standard layer normalization of a single vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape != p.gamma.shape:
        raise ValueError("x must be a vector matching gamma/beta length")
    mu = float(np.mean(x))
    var = float(np.mean((x - mu) ** 2))
    return (x - mu) / math.sqrt(var + p.eps) * p.gamma + p.beta


def params_to_dict(params: MhaParams) -> dict:
    out = {
        "H": params.heads,
        "D": params.dim,
        "kind": params.kind,
        "tied": params.tied,
        "wq": [w.tolist() for w in params.wq],
        "wk": [w.tolist() for w in params.wk],
        "wv": [w.tolist() for w in params.wv],
        "wo": params.wo.tolist(),
    }
    if params.bq is not None:
        out["bq"] = params.bq.tolist()
    if params.bk is not None:
        out["bk"] = params.bk.tolist()
    return out


def params_from_dict(d: dict) -> MhaParams:
    wq = np.asarray(d["wq"], dtype=np.float64)
    wk = np.asarray(d["wk"], dtype=np.float64)
    return MhaParams(
        heads=int(d["H"]),
        dim=int(d["D"]),
        kind=str(d["kind"]).lower(),
        tied=bool(d["tied"]),
        wq=wq,
        wk=wk,
        wv=np.asarray(d["wv"], dtype=np.float64),
        wo=np.asarray(d["wo"], dtype=np.float64),
        bq=None if "bq" not in d else np.asarray(d["bq"], dtype=np.float64),
        bk=None if "bk" not in d else np.asarray(d["bk"], dtype=np.float64),
    )


def save_params(params: MhaParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path) -> MhaParams:
    with open(path, "r", encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
