"""Basis-decomposed replacement for a low-rank linear layer.

A layer factored as y = (x @ U) @ V.T can be rewritten by decomposing the
product W = U @ V.T column-wise: the forward pass becomes h = x @ B
followed by y = [h, h @ C] (first tag) or [h @ C, h] (last tag), with
strictly fewer stored parameters and FLOPs for any valid rank.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .decompose import Axis, BDFactors, Tag, bd_decompose
from .errors import ShapeError
from .tensor import Tensor2D


@dataclass(frozen=True)
class LowRankLayer:
    """Two-factor linear layer: u is d_in x r, v is d_out x r."""

    u: Tensor2D
    v: Tensor2D

    def __post_init__(self):
        if self.u.cols != self.v.cols:
            raise ShapeError(f"factor ranks differ: {self.u.cols} vs {self.v.cols}")
        if self.u.precision is not self.v.precision:
            raise ShapeError("factors must share precision")
        if not self.u.cols < min(self.u.rows, self.v.rows):
            raise ValueError(
                f"rank {self.u.cols} must be < min(d_in={self.u.rows}, d_out={self.v.rows})"
            )

    @property
    def d_in(self) -> int:
        return self.u.rows

    @property
    def d_out(self) -> int:
        return self.v.rows

    @property
    def rank(self) -> int:
        return self.u.cols

    @property
    def param_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)


@dataclass(frozen=True)
class BDLinearLayer:
    """Column-axis factors of the weight product, ready for the two-step forward."""

    factors: BDFactors

    def __post_init__(self):
        if self.factors.axis is not Axis.COLUMN:
            raise ValueError("BDLinearLayer needs column-axis factors")

    @property
    def d_in(self) -> int:
        return self.factors.orig_rows

    @property
    def d_out(self) -> int:
        return self.factors.orig_cols

    @property
    def rank(self) -> int:
        return self.factors.rank

    @property
    def tag(self) -> Tag:
        return self.factors.tag

    @property
    def param_count(self) -> int:
        return self.factors.param_count


def lowrank_forward(x: Tensor2D, layer: LowRankLayer) -> Tensor2D:
    """(x @ U) @ V.T"""
    if x.cols != layer.d_in:
        raise ShapeError(f"input has {x.cols} cols, layer expects {layer.d_in}")
    return T.matmul(T.matmul(x, layer.u), T.transpose(layer.v))


def bd_linear_from_lowrank(layer: LowRankLayer) -> BDLinearLayer:
    """Decompose U @ V.T column-wise at the layer's rank.

    Parameters drop from r(d_in + d_out) to r(d_in + d_out - r), a relative
    saving of r / (d_in + d_out).
    """
    w = T.matmul(layer.u, T.transpose(layer.v))
    return BDLinearLayer(bd_decompose(w, layer.rank, Axis.COLUMN))


def bd_linear_forward(x: Tensor2D, layer: BDLinearLayer) -> Tensor2D:
    """Two-step forward: h = x @ B, then place h beside h @ C per the tag."""
    if x.cols != layer.d_in:
        raise ShapeError(f"input has {x.cols} cols, layer expects {layer.d_in}")
    h = T.matmul(x, layer.factors.basis)
    hc = T.matmul(h, layer.factors.coeff)
    parts = [h, hc] if layer.tag is Tag.FIRST else [hc, h]
    return T.concat_cols(parts)
