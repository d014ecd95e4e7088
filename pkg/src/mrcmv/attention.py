"""Multi-head attention block shared by self- and cross-modal attention.

``chi(i1, i2)`` attends from the rows of ``i1`` (queries) over the rows of
``i2`` (keys/values) and adds the merged heads back onto ``i1``.  With
``i1 is i2`` it is the self-attention (SA) block; with two different
modalities it is the cross-modal attention (CMA) block.  There is no
positional encoding, masking, dropout or layer norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .numerics import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat_many,
    matmul,
    matmul_t,
    row_softmax,
    scale,
)


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 128
    n_heads: int = 4
    d_k: int = 32
    d_v: int = 32

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_k, self.d_v) < 1:
            raise ValueError(f"attention dims must be positive: {self}")
        if self.d_model != self.n_heads * self.d_v:
            raise ValueError(
                f"d_model must equal n_heads * d_v, got {self.d_model} != "
                f"{self.n_heads} * {self.d_v}"
            )

    def shapes(self, prefix: str) -> dict[str, tuple[int, int]]:
        out = {}
        for i in range(self.n_heads):
            out[f"{prefix}.head{i}.wq"] = (self.d_model, self.d_k)
            out[f"{prefix}.head{i}.wk"] = (self.d_model, self.d_k)
            out[f"{prefix}.head{i}.wv"] = (self.d_model, self.d_v)
        out[f"{prefix}.wo"] = (self.n_heads * self.d_v, self.d_model)
        return out


@dataclass
class AttentionParams:
    heads: list[tuple[Parameter, Parameter, Parameter]]
    wo: Parameter

    @classmethod
    def from_store(cls, store, prefix: str) -> "AttentionParams":
        heads = []
        i = 0
        while f"{prefix}.head{i}.wq" in store:
            heads.append(
                (store[f"{prefix}.head{i}.wq"], store[f"{prefix}.head{i}.wk"], store[f"{prefix}.head{i}.wv"])
            )
            i += 1
        if not heads:
            raise KeyError(f"no attention heads under {prefix!r}")
        return cls(heads, store[f"{prefix}.wo"])

    def __post_init__(self):
        for i, (wq, wk, wv) in enumerate(self.heads):
            if wq.shape[0] != wk.shape[0] or wq.shape[0] != wv.shape[0] or wq.shape[1] != wk.shape[1]:
                raise ShapeError(f"head {i}: inconsistent wq {wq.shape}, wk {wk.shape}, wv {wv.shape}")
        d_concat = sum(h[2].shape[1] for h in self.heads)
        if self.wo.shape[0] != d_concat:
            raise ShapeError(f"wo has {self.wo.shape[0]} rows, heads concatenate to {d_concat}")

    def parameters(self) -> list[Parameter]:
        return [w for head in self.heads for w in head] + [self.wo]


def attention_head(i1: Tensor, i2: Tensor, head) -> Tensor:
    """One head: softmax((i1 wq)(i2 wk)^T / sqrt(d_k)) (i2 wv)."""
    wq, wk, wv = head
    d_in = wq.value.shape[0]
    if i1.value.shape[-1] != d_in or i2.value.shape[-1] != d_in:
        raise ShapeError(f"attention input depths {i1.shape[-1]}, {i2.shape[-1]} do not fit d_model {d_in}")
    q = matmul(i1, wq)
    k = matmul(i2, wk)
    v = matmul(i2, wv)
    scores = scale(matmul_t(q, k), 1.0 / math.sqrt(wq.value.shape[1]))
    return matmul(row_softmax(scores), v)


def chi(i1: Tensor, i2: Tensor, params: AttentionParams) -> Tensor:
    """Residual multi-head attention; the residual operand is ``i1``."""
    if i1.shape[-1] != i2.shape[-1]:
        raise ShapeError(f"attention inputs need equal depth, got {i1.shape} and {i2.shape}")
    outs = [attention_head(i1, i2, head) for head in params.heads]
    return add(i1, matmul(concat_many(outs), params.wo))


def self_attend(x: Tensor, params: AttentionParams) -> Tensor:
    return chi(x, x, params)


def cross_attend(x: Tensor, y: Tensor, params: AttentionParams) -> Tensor:
    """Update ``x`` by attending over ``y``; keeps the length of ``x``."""
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"cross attention depth mismatch: {x.shape} vs {y.shape}")
    return chi(x, y, params)
