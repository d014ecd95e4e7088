"""Fusion gate that reweights attended video and voice-over features per dimension."""
from __future__ import annotations

from dataclasses import dataclass

from .numerics import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat_depth,
    matmul,
    mul,
    relu,
    sigmoid,
    slice_depth,
)

ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


class AlignmentError(ShapeError):
    """Video and voice-over sequences have different lengths."""


@dataclass
class GateParams:
    wg: Parameter  # (d_F + d_S) x (d_F + d_S)
    bg: Parameter  # 1 x (d_F + d_S), broadcast over time steps

    def __post_init__(self):
        side = self.wg.shape[0]
        if self.wg.shape != (side, side) or self.bg.shape != (1, side):
            raise ShapeError(f"gate needs square wg and 1 x side bg, got {self.wg.shape}, {self.bg.shape}")

    @classmethod
    def from_store(cls, store, prefix: str = "gate") -> "GateParams":
        return cls(store[f"{prefix}.wg"], store[f"{prefix}.bg"])

    def parameters(self) -> list[Parameter]:
        return [self.wg, self.bg]


def gate_weights(f: Tensor, s: Tensor, p: GateParams, activation: str = "relu") -> Tensor:
    """Per-time-step gate act([f, s] wg + bg)."""
    if f.shape[:-1] != s.shape[:-1]:
        raise AlignmentError(f"gate inputs must be time-aligned, got {f.shape} and {s.shape}")
    if f.shape[-1] + s.shape[-1] != p.wg.shape[0]:
        raise ShapeError(f"gate expects total depth {p.wg.shape[0]}, got {f.shape[-1]} + {s.shape[-1]}")
    return ACTIVATIONS[activation](add(matmul(concat_depth(f, s), p.wg), p.bg))


def fuse(f: Tensor, s: Tensor, p: GateParams, activation: str = "relu") -> Tensor:
    """H = g[:, :d] * f + g[:, d:] * s."""
    d = f.shape[-1]
    if s.shape[-1] != d:
        raise ShapeError(f"fusion needs equal depths, got {d} and {s.shape[-1]}")
    g = gate_weights(f, s, p, activation)
    return add(mul(slice_depth(g, 0, d), f), mul(slice_depth(g, d, 2 * d), s))
