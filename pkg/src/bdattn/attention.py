"""Multi-head attention and its lossless basis-decomposed reformulation.

Each head's query-key weight product W_q_i @ W_k_i.T and value-output
product W_v_i @ W_o_i are d x d matrices of rank at most d_h, so both can
be basis-decomposed exactly. Preparation runs once, offline: every head's
product is decomposed along both candidate bases, the tag with the smaller
mean residual is applied to all heads (a shared tag lets the merged
projections avoid per-head slicing), and the per-head factors are merged
into four matrices. Inference then produces queries from the merged basis
and keys/values from a fused operator that repeats one input slice and
multiplies the other by the merged coefficients, replacing the two largest
projections with strictly smaller ones while reproducing every pre-softmax
score and output exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import tensor as T
from .decompose import Axis, BDFactors, Tag, bd_decompose_both
from .errors import PrecisionError, ShapeError
from .tensor import Precision, Tensor2D, _ROW_BLOCK


@dataclass(frozen=True)
class MHAWeights:
    """The four projection matrices plus head geometry.

    w_q, w_k, w_v are d x (n_heads * d_h); w_o is (n_heads * d_h) x d.
    d_h must be strictly below d: that is what makes each head's weight
    products low-rank.
    """

    d: int
    n_heads: int
    d_h: int
    w_q: Tensor2D
    w_k: Tensor2D
    w_v: Tensor2D
    w_o: Tensor2D

    def __post_init__(self):
        if self.d_h >= self.d:
            raise ValueError(f"d_h ({self.d_h}) must be < d ({self.d})")
        if self.d_h < 1 or self.n_heads < 1:
            raise ValueError("d_h and n_heads must be positive")
        width = self.n_heads * self.d_h
        for name, t, shape in (
            ("w_q", self.w_q, (self.d, width)),
            ("w_k", self.w_k, (self.d, width)),
            ("w_v", self.w_v, (self.d, width)),
            ("w_o", self.w_o, (width, self.d)),
        ):
            if t.shape != shape:
                raise ShapeError(f"{name} has shape {t.shape}, expected {shape}")
        if len({t.precision for t in (self.w_q, self.w_k, self.w_v, self.w_o)}) != 1:
            raise PrecisionError("all four projection matrices must share precision")

    @property
    def precision(self) -> Precision:
        return self.w_q.precision

    @property
    def param_count(self) -> int:
        return 4 * self.d * self.n_heads * self.d_h

    def cast(self, precision: Precision) -> "MHAWeights":
        return MHAWeights(
            self.d,
            self.n_heads,
            self.d_h,
            self.w_q.cast(precision),
            self.w_k.cast(precision),
            self.w_v.cast(precision),
            self.w_o.cast(precision),
        )


@dataclass(frozen=True)
class BDAWeights:
    """Prepared parameter set for basis-decomposed attention.

    b_qk is d x (n d_h), c_qk and c_vo are (d - d_h) x (n d_h), b_vo is
    (n d_h) x d. One tag per target applies to every head. Candidate mean
    residuals for both tags are kept so the selection can be audited;
    heads whose winning basis was numerically rank-deficient (a
    probability-zero event for generic weights) are listed as warnings.
    """

    d: int
    n_heads: int
    d_h: int
    b_qk: Tensor2D
    c_qk: Tensor2D
    c_vo: Tensor2D
    b_vo: Tensor2D
    qk_tag: Tag
    vo_tag: Tag
    qk_candidate_residuals: tuple[float, float]  # (first mean, last mean)
    vo_candidate_residuals: tuple[float, float]
    qk_deficient_heads: tuple[int, ...] = ()
    vo_deficient_heads: tuple[int, ...] = ()

    def __post_init__(self):
        if self.d_h >= self.d:
            raise ValueError(f"d_h ({self.d_h}) must be < d ({self.d})")
        width = self.n_heads * self.d_h
        rest = self.d - self.d_h
        for name, t, shape in (
            ("b_qk", self.b_qk, (self.d, width)),
            ("c_qk", self.c_qk, (rest, width)),
            ("c_vo", self.c_vo, (rest, width)),
            ("b_vo", self.b_vo, (width, self.d)),
        ):
            if t.shape != shape:
                raise ShapeError(f"{name} has shape {t.shape}, expected {shape}")
        if len({t.precision for t in (self.b_qk, self.c_qk, self.c_vo, self.b_vo)}) != 1:
            raise PrecisionError("all prepared matrices must share precision")

    @property
    def precision(self) -> Precision:
        return self.b_qk.precision

    @property
    def param_count(self) -> int:
        width = self.n_heads * self.d_h
        return 2 * width * self.d + 2 * width * (self.d - self.d_h)

    @property
    def mean_residual_qk(self) -> float:
        return self.qk_candidate_residuals[0 if self.qk_tag is Tag.FIRST else 1]

    @property
    def mean_residual_vo(self) -> float:
        return self.vo_candidate_residuals[0 if self.vo_tag is Tag.FIRST else 1]


def _attend(q: Tensor2D, k: Tensor2D, v: Tensor2D, n_heads: int, d_h: int) -> Tensor2D:
    """Per-head softmax(q_i k_i^T / sqrt(d_h)) v_i, heads concatenated."""
    inv_scale = 1.0 / math.sqrt(d_h)
    outs = []
    for i in range(n_heads):
        lo, hi = i * d_h, (i + 1) * d_h
        qi = T.slice_cols(q, lo, hi)
        ki = T.slice_cols(k, lo, hi)
        vi = T.slice_cols(v, lo, hi)
        probs = T.softmax_rows(T.scale(T.matmul(qi, T.transpose(ki)), inv_scale))
        outs.append(T.matmul(probs, vi))
    return T.concat_cols(outs)


def mha_forward(x: Tensor2D, w: MHAWeights) -> Tensor2D:
    """Baseline multi-head attention over a full sequence (L x d in, L x d out)."""
    if x.cols != w.d:
        raise ShapeError(f"input has {x.cols} cols, model dim is {w.d}")
    if x.precision is not w.precision:
        raise PrecisionError("input and weights must share precision")
    q = T.matmul(x, w.w_q)
    k = T.matmul(x, w.w_k)
    v = T.matmul(x, w.w_v)
    return T.matmul(_attend(q, k, v, w.n_heads, w.d_h), w.w_o)


def _head_products(w: MHAWeights, i: int) -> tuple[Tensor2D, Tensor2D]:
    """W_q_i @ W_k_i.T and W_v_i @ W_o_i for head i, both d x d.

    Uses the fixed-reduction matmul so recorded residuals are reproducible
    from the public API alone.
    """
    lo, hi = i * w.d_h, (i + 1) * w.d_h
    qk = T.matmul(T.slice_cols(w.w_q, lo, hi), T.transpose(T.slice_cols(w.w_k, lo, hi)))
    vo = T.matmul(T.slice_cols(w.w_v, lo, hi), T.slice_rows(w.w_o, lo, hi))
    return qk, vo


def _select_tag(
    candidates: list[tuple[BDFactors, BDFactors]], force_first: bool
) -> tuple[Tag, tuple[float, float]]:
    n = len(candidates)
    mean_first = sum(f.residual for f, _ in candidates) / n
    mean_last = sum(l.residual for _, l in candidates) / n
    if force_first or mean_first <= mean_last:
        return Tag.FIRST, (mean_first, mean_last)
    return Tag.LAST, (mean_first, mean_last)


def bda_prepare(
    w: MHAWeights, *, force_first: bool = False, prepare_in_p64: bool = False
) -> BDAWeights:
    """Offline preparation: decompose every head's weight products and merge.

    QK products are decomposed along columns, VO products along rows, both
    at rank d_h. The shared tag per target is the one with the smaller mean
    residual across heads (ties to first); ``force_first`` pins both tags
    to first for comparison runs. ``prepare_in_p64`` runs the decomposition
    in double precision and rounds the merged matrices back to the model
    precision afterwards.
    """
    src = w
    rounded = None
    if prepare_in_p64 and w.precision is Precision.P32:
        src = w.cast(Precision.P64)
        rounded = w.precision

    qk_pairs = []
    vo_pairs = []
    for i in range(src.n_heads):
        qk_prod, vo_prod = _head_products(src, i)
        qk_pairs.append(bd_decompose_both(qk_prod, src.d_h, Axis.COLUMN))
        vo_pairs.append(bd_decompose_both(vo_prod, src.d_h, Axis.ROW))

    qk_tag, qk_means = _select_tag(qk_pairs, force_first)
    vo_tag, vo_means = _select_tag(vo_pairs, force_first)
    qk_sel = [pair[0 if qk_tag is Tag.FIRST else 1] for pair in qk_pairs]
    vo_sel = [pair[0 if vo_tag is Tag.FIRST else 1] for pair in vo_pairs]

    # Shared tags let the per-head factors merge: column bases side by
    # side, QK coefficients transposed so K' = repeat + x_rest @ c_qk
    # computes every head at once.
    b_qk = T.concat_cols([f.basis for f in qk_sel])
    c_qk = T.concat_cols([T.transpose(f.coeff) for f in qk_sel])
    c_vo = T.concat_cols([f.coeff for f in vo_sel])
    b_vo = T.concat_rows([f.basis for f in vo_sel])
    if rounded is not None:
        b_qk, c_qk, c_vo, b_vo = (t.cast(rounded) for t in (b_qk, c_qk, c_vo, b_vo))

    return BDAWeights(
        d=w.d,
        n_heads=w.n_heads,
        d_h=w.d_h,
        b_qk=b_qk,
        c_qk=c_qk,
        c_vo=c_vo,
        b_vo=b_vo,
        qk_tag=qk_tag,
        vo_tag=vo_tag,
        qk_candidate_residuals=qk_means,
        vo_candidate_residuals=vo_means,
        qk_deficient_heads=tuple(i for i, f in enumerate(qk_sel) if f.rank_deficient),
        vo_deficient_heads=tuple(i for i, f in enumerate(vo_sel) if f.rank_deficient),
    )


@njit(cache=True, parallel=True)
def _fused_kernel(x, c, d_h, n_heads, mul_base, rep_base, out):  # pragma: no cover
    L = x.shape[0]
    kk = c.shape[0]
    n = c.shape[1]
    nblocks = (L + _ROW_BLOCK - 1) // _ROW_BLOCK
    for ib in prange(nblocks):
        i0 = ib * _ROW_BLOCK
        i1 = min(i0 + _ROW_BLOCK, L)
        # Same reduction order as the matmul kernel: k ascends first, the
        # repeated slice is added after the last product, which keeps the
        # result bit-identical to repeat + matmul + add.
        for k in range(kk):
            for i in range(i0, i1):
                aik = x[i, mul_base + k]
                for j in range(n):
                    out[i, j] += aik * c[k, j]
        for i in range(i0, i1):
            for head in range(n_heads):
                base = head * d_h
                for jj in range(d_h):
                    out[i, base + jj] += x[i, rep_base + jj]


def fused_kv_proj(
    x: Tensor2D, c: Tensor2D, d_h: int, n_heads: int, tag: Tag = Tag.FIRST
) -> Tensor2D:
    """Merged key/value projection in one pass over the output.

    Equivalent to tiling one d_h-wide slice of x n_heads times and adding
    the product of the complementary slice with c, but no intermediate
    repeat or slice copy is materialised. The first tag repeats the leading
    slice and multiplies the trailing one; the last tag does the reverse.
    """
    if x.precision is not c.precision:
        raise PrecisionError("x and c must share precision")
    if c.rows != x.cols - d_h:
        raise ShapeError(f"c has {c.rows} rows, expected d - d_h = {x.cols - d_h}")
    if c.cols != n_heads * d_h:
        raise ShapeError(f"c has {c.cols} cols, expected n_heads * d_h = {n_heads * d_h}")
    if tag is Tag.FIRST:
        mul_base, rep_base = d_h, 0
    else:
        mul_base, rep_base = 0, x.cols - d_h
    out = np.zeros((x.rows, n_heads * d_h), dtype=x.precision.dtype)
    _fused_kernel(x.data, c.data, d_h, n_heads, mul_base, rep_base, out)
    return Tensor2D._wrap(out)


def bda_forward(x: Tensor2D, w: BDAWeights) -> Tensor2D:
    """Basis-decomposed attention forward pass; output matches mha_forward."""
    if x.cols != w.d:
        raise ShapeError(f"input has {x.cols} cols, model dim is {w.d}")
    if x.precision is not w.precision:
        raise PrecisionError("input and weights must share precision")
    q = T.matmul(x, w.b_qk)
    k = fused_kv_proj(x, w.c_qk, w.d_h, w.n_heads, w.qk_tag)
    v = fused_kv_proj(x, w.c_vo, w.d_h, w.n_heads, w.vo_tag)
    return T.matmul(_attend(q, k, v, w.n_heads, w.d_h), w.b_vo)


def attention_scores(
    x: Tensor2D, w: MHAWeights | BDAWeights, head: int
) -> Tensor2D:
    """Pre-softmax L x L score matrix for one head, without the 1/sqrt(d_h) scale."""
    if not isinstance(w, (MHAWeights, BDAWeights)):
        raise TypeError(f"expected MHAWeights or BDAWeights, got {type(w).__name__}")
    if not 0 <= head < w.n_heads:
        raise IndexError(f"head {head} out of range for {w.n_heads} heads")
    lo, hi = head * w.d_h, (head + 1) * w.d_h
    if isinstance(w, MHAWeights):
        q = T.slice_cols(T.matmul(x, w.w_q), lo, hi)
        k = T.slice_cols(T.matmul(x, w.w_k), lo, hi)
    else:
        q = T.slice_cols(T.matmul(x, w.b_qk), lo, hi)
        k = T.slice_cols(fused_kv_proj(x, w.c_qk, w.d_h, w.n_heads, w.qk_tag), lo, hi)
    return T.matmul(q, T.transpose(k))
