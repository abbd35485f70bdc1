"""Basis decomposition of low-rank matrices.

A rank-r matrix can be stored as r of its own contiguous rows (or columns)
plus the coefficients that rebuild the remaining ones as linear
combinations. Both the first-r and last-r candidate bases are formed; the
one with the smaller Frobenius reconstruction residual wins, ties going to
first. Storage drops from r(m+n) for a classic two-factor form to
r(m+n-r), and rebuilding costs 2r(m-r)n FLOPs instead of 2rmn.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import tensor as T
from .tensor import Side, Tensor2D


class Axis(Enum):
    """Whether the basis is a set of rows or of columns."""

    ROW = "row"
    COLUMN = "column"


class Tag(Enum):
    """Which contiguous block serves as the basis."""

    FIRST = "first"
    LAST = "last"


@dataclass(frozen=True)
class BDFactors:
    """One basis-decomposition candidate: basis block, coefficients, residual.

    Row axis: ``basis`` is r x n and ``coeff`` is (m-r) x r, rebuilding the
    non-basis rows as coeff @ basis. Column axis: ``basis`` is m x r and
    ``coeff`` is r x (n-r), rebuilding the non-basis columns as
    basis @ coeff. ``residual`` is the Frobenius norm of the full
    reconstruction error; ``rank_deficient`` echoes the solver's flag.
    """

    axis: Axis
    tag: Tag
    basis: Tensor2D
    coeff: Tensor2D
    orig_rows: int
    orig_cols: int
    rank: int
    residual: float
    rank_deficient: bool

    def __post_init__(self):
        m, n, r = self.orig_rows, self.orig_cols, self.rank
        _check_rank(m, n, r, self.axis)
        if self.axis is Axis.ROW:
            expect_basis, expect_coeff = (r, n), (m - r, r)
        else:
            expect_basis, expect_coeff = (m, r), (r, n - r)
        if self.basis.shape != expect_basis:
            raise ValueError(f"basis shape {self.basis.shape}, expected {expect_basis}")
        if self.coeff.shape != expect_coeff:
            raise ValueError(f"coeff shape {self.coeff.shape}, expected {expect_coeff}")
        if self.residual < 0.0:
            raise ValueError("residual must be non-negative")

    @property
    def param_count(self) -> int:
        """Stored elements: r(m+n-r)."""
        return self.basis.rows * self.basis.cols + self.coeff.rows * self.coeff.cols


@dataclass(frozen=True)
class CostReport:
    """Closed-form storage and reconstruction-FLOP counts for one shape."""

    full_params: int
    lowrank_params: int
    bd_params: int
    lowrank_recon_flops: int
    bd_recon_flops: int


def cost_report(m: int, n: int, rank: int) -> CostReport:
    """Exact integer cost accounting for an m x n matrix at the given rank.

    Requires rank < min(m, n): that is the regime where the decomposed form
    is strictly smaller than both the full and two-factor representations.
    """
    if not 1 <= rank < min(m, n):
        raise ValueError(
            f"rank must satisfy 1 <= rank < min(m, n); got rank={rank} for {m}x{n}"
        )
    r = rank
    return CostReport(
        full_params=m * n,
        lowrank_params=r * (m + n),
        bd_params=r * (m + n - r),
        lowrank_recon_flops=2 * r * m * n,
        bd_recon_flops=2 * r * (m - r) * n,
    )


def _check_rank(m: int, n: int, rank: int, axis: Axis) -> None:
    # A row basis needs at least one non-basis row and rows long enough to
    # be independent; the column case is the mirror image.
    if axis is Axis.ROW:
        ok = 1 <= rank < m and rank <= n
    else:
        ok = 1 <= rank < n and rank <= m
    if not ok:
        raise ValueError(f"rank {rank} out of range for a {m}x{n} {axis.value} decomposition")


def _reconstruct(axis: Axis, tag: Tag, basis: Tensor2D, coeff: Tensor2D) -> Tensor2D:
    if axis is Axis.ROW:
        rebuilt = T._fast_matmul(coeff, basis)
        parts = [basis, rebuilt] if tag is Tag.FIRST else [rebuilt, basis]
        return T.concat_rows(parts)
    rebuilt = T._fast_matmul(basis, coeff)
    parts = [basis, rebuilt] if tag is Tag.FIRST else [rebuilt, basis]
    return T.concat_cols(parts)


def _candidate(w: Tensor2D, rank: int, axis: Axis, tag: Tag) -> BDFactors:
    m, n = w.rows, w.cols
    if axis is Axis.ROW:
        if tag is Tag.FIRST:
            basis, rest = T.slice_rows(w, 0, rank), T.slice_rows(w, rank, m)
        else:
            basis, rest = T.slice_rows(w, m - rank, m), T.slice_rows(w, 0, m - rank)
        coeff, deficient, _ = T.lstsq(basis, rest, Side.SOLVE_LEFT)
    else:
        if tag is Tag.FIRST:
            basis, rest = T.slice_cols(w, 0, rank), T.slice_cols(w, rank, n)
        else:
            basis, rest = T.slice_cols(w, n - rank, n), T.slice_cols(w, 0, n - rank)
        coeff, deficient, _ = T.lstsq(basis, rest, Side.SOLVE_RIGHT)
    residual = T.frobenius_norm(T.sub(w, _reconstruct(axis, tag, basis, coeff)))
    return BDFactors(
        axis=axis,
        tag=tag,
        basis=basis,
        coeff=coeff,
        orig_rows=m,
        orig_cols=n,
        rank=rank,
        residual=residual,
        rank_deficient=deficient,
    )


def bd_decompose_both(
    w: Tensor2D, rank: int, axis: Axis
) -> tuple[BDFactors, BDFactors]:
    """Both first-block and last-block candidates, each with its residual."""
    _check_rank(w.rows, w.cols, rank, axis)
    return _candidate(w, rank, axis, Tag.FIRST), _candidate(w, rank, axis, Tag.LAST)


def bd_decompose(w: Tensor2D, rank: int, axis: Axis) -> BDFactors:
    """Decompose ``w`` and keep the candidate with the smaller residual.

    Ties go to the first-block candidate. A rank-deficient basis is not an
    error: the factors carry a flag and a best-effort least-squares fit,
    since random full-width matrices are full rank almost surely.
    """
    first, last = bd_decompose_both(w, rank, axis)
    return first if first.residual <= last.residual else last


def bd_reconstruct(f: BDFactors) -> Tensor2D:
    """Rebuild the original matrix from its factors.

    Row/first stacks [basis; coeff @ basis], row/last the reverse; the
    column forms place basis @ coeff beside the basis analogously.
    """
    return _reconstruct(f.axis, f.tag, f.basis, f.coeff)
