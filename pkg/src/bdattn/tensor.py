"""Dense 2-D tensor substrate: storage, products, slicing, softmax, least squares.

Every operation is pure: inputs are immutable and identical inputs give
identical outputs. ``matmul`` additionally guarantees that each output
element is one sequentially ordered dot product (k ascending, one rounding
per step), so results are bit-identical no matter how many threads run the
kernel. Downstream exactness checks rely on that contract.
"""

from __future__ import annotations

import math
import os
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # tbb in this image is too old for numba; omp is present and quiet.
    # Must happen before numba reads its config, hence also done in the
    # package __init__; kept here for direct submodule imports.
    os.environ["NUMBA_THREADING_LAYER"] = "omp"

import numba
from numba import njit, prange
from threadpoolctl import threadpool_limits

from .errors import PrecisionError, ShapeError

# The BLAS panels used here (QR, triangular solves, small products) are
# fastest single-threaded on the target boxes and otherwise fight the
# kernel thread pool for cores; parallelism is managed by the numba
# kernels via set_thread_count instead.
threadpool_limits(limits=1, user_api="blas")

# Parallel kernels are opt-in (set_thread_count / --threads): on small
# interleaved workloads every multi-thread region entry pays a scheduler
# handoff that dwarfs the work itself.
numba.set_num_threads(1)

# Relative magnitude of the smallest triangular diagonal below which a
# least-squares basis is flagged rank-deficient.
RANK_DEFICIENCY_TOL = 1e-10


class Precision(Enum):
    """Element precision tag. Arithmetic runs natively in the tagged width."""

    P32 = "p32"
    P64 = "p64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.P32 else np.dtype(np.float64)

    @property
    def itemsize(self) -> int:
        return self.dtype.itemsize

    @classmethod
    def of_dtype(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.P32
        if dtype == np.float64:
            return cls.P64
        raise ValueError(f"unsupported dtype {dtype!r}; expected float32 or float64")

    @classmethod
    def parse(cls, name: str) -> "Precision":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown precision {name!r}; expected 'p32' or 'p64'") from None


class Tensor2D:
    """Immutable dense row-major real matrix with a fixed element precision.

    Construction copies the input, coerces it to the requested precision
    (P64 by default for non-float input), and rejects NaN/Inf entries.
    """

    __slots__ = ("_data",)

    def __init__(self, data, precision: Precision | None = None):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2D needs a 2-D input, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"Tensor2D must be non-empty, got shape {arr.shape}")
        if precision is None:
            if arr.dtype == np.float32:
                precision = Precision.P32
            else:
                precision = Precision.P64
        arr = np.array(arr, dtype=precision.dtype, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise ValueError("Tensor2D entries must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor2D":
        """Adopt an internally produced array without copying.

        The array must be 2-D, C-contiguous float32/float64 and never
        aliased mutably elsewhere. Finiteness is still enforced; it is part
        of the public invariant.
        """
        if not np.isfinite(arr).all():
            raise ValueError("operation produced non-finite values")
        arr.setflags(write=False)
        t = object.__new__(cls)
        t._data = arr
        return t

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def precision(self) -> Precision:
        return Precision.of_dtype(self._data.dtype)

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying row-major array."""
        return self._data

    def cast(self, precision: Precision) -> "Tensor2D":
        """Round to another precision; identity if already there."""
        if precision is self.precision:
            return self
        return Tensor2D._wrap(self._data.astype(precision.dtype))

    def tolist(self) -> list[list[float]]:
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor2D({self.rows}x{self.cols}, {self.precision.value})"


def zeros(rows: int, cols: int, precision: Precision = Precision.P64) -> Tensor2D:
    if rows < 1 or cols < 1:
        raise ShapeError(f"zeros needs positive dims, got {rows}x{cols}")
    return Tensor2D._wrap(np.zeros((rows, cols), dtype=precision.dtype))


def identity(n: int, precision: Precision = Precision.P64) -> Tensor2D:
    if n < 1:
        raise ShapeError(f"identity needs n >= 1, got {n}")
    return Tensor2D._wrap(np.eye(n, dtype=precision.dtype))


def _require_same_precision(*tensors: Tensor2D) -> Precision:
    p = tensors[0].precision
    for t in tensors[1:]:
        if t.precision is not p:
            raise PrecisionError(
                f"mixed precisions {p.value} and {t.precision.value}; cast explicitly"
            )
    return p


def set_thread_count(n: int) -> None:
    """Pin the number of threads used by the parallel kernels."""
    numba.set_num_threads(n)


def thread_count() -> int:
    return numba.get_num_threads()


# Rows are processed in blocks of this size so a basis row of the right
# operand is reused from cache; the per-element reduction is unaffected.
_ROW_BLOCK = 8


@njit(cache=True, parallel=True)
def _matmul_kernel(a, b, out):  # pragma: no cover - exercised via matmul
    m, kk = a.shape
    n = b.shape[1]
    nblocks = (m + _ROW_BLOCK - 1) // _ROW_BLOCK
    for ib in prange(nblocks):
        i0 = ib * _ROW_BLOCK
        i1 = min(i0 + _ROW_BLOCK, m)
        # k must ascend and stay outside j: out[i, j] accumulates one
        # product per step, which fixes the rounding sequence.
        for k in range(kk):
            for i in range(i0, i1):
                aik = a[i, k]
                for j in range(n):
                    out[i, j] += aik * b[k, j]


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Matrix product with a deterministic per-element reduction order."""
    p = _require_same_precision(a, b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ ({a.cols} vs {b.rows})")
    out = np.zeros((a.rows, b.cols), dtype=p.dtype)
    _matmul_kernel(a._data, b._data, out)
    return Tensor2D._wrap(out)


def _fast_matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Product via the platform BLAS, for internal tolerance-bound steps.

    Same result as ``matmul`` up to reduction order; does not carry its
    fixed-rounding-sequence guarantee, so it never backs an operation whose
    contract is bit-level.
    """
    _require_same_precision(a, b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ ({a.cols} vs {b.rows})")
    return Tensor2D._wrap(a._data @ b._data)


def transpose(a: Tensor2D) -> Tensor2D:
    return Tensor2D._wrap(np.ascontiguousarray(a._data.T))


def slice_cols(a: Tensor2D, start: int, stop: int) -> Tensor2D:
    """Copy of columns [start, stop)."""
    if not (0 <= start < stop <= a.cols):
        raise IndexError(f"column slice [{start}, {stop}) out of range for {a.cols} cols")
    return Tensor2D._wrap(np.ascontiguousarray(a._data[:, start:stop]))


def slice_rows(a: Tensor2D, start: int, stop: int) -> Tensor2D:
    """Copy of rows [start, stop)."""
    if not (0 <= start < stop <= a.rows):
        raise IndexError(f"row slice [{start}, {stop}) out of range for {a.rows} rows")
    return Tensor2D._wrap(np.ascontiguousarray(a._data[start:stop, :]))


def concat_cols(parts: Sequence[Tensor2D]) -> Tensor2D:
    """Horizontal concatenation in argument order."""
    if not parts:
        raise ValueError("concat_cols needs at least one part")
    _require_same_precision(*parts)
    rows = parts[0].rows
    for t in parts[1:]:
        if t.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ ({rows} vs {t.rows})")
    return Tensor2D._wrap(np.hstack([t._data for t in parts]))


def concat_rows(parts: Sequence[Tensor2D]) -> Tensor2D:
    """Vertical concatenation in argument order."""
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    _require_same_precision(*parts)
    cols = parts[0].cols
    for t in parts[1:]:
        if t.cols != cols:
            raise ShapeError(f"concat_rows: column counts differ ({cols} vs {t.cols})")
    return Tensor2D._wrap(np.vstack([t._data for t in parts]))


def repeat_cols(a: Tensor2D, times: int) -> Tensor2D:
    """Horizontal tiling: out.cols = a.cols * times."""
    if times < 1:
        raise ValueError(f"repeat_cols needs times >= 1, got {times}")
    return Tensor2D._wrap(np.tile(a._data, (1, times)))


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _require_same_precision(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ ({a.shape} vs {b.shape})")
    return Tensor2D._wrap(a._data + b._data)


def sub(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _require_same_precision(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ ({a.shape} vs {b.shape})")
    return Tensor2D._wrap(a._data - b._data)


def scale(a: Tensor2D, factor: float) -> Tensor2D:
    """Scalar multiple; the factor is rounded to the operand precision first."""
    f = a._data.dtype.type(factor)
    return Tensor2D._wrap(a._data * f)


def softmax_rows(a: Tensor2D) -> Tensor2D:
    """Row-wise softmax, shifted by the row max so large inputs cannot overflow."""
    arr = a._data
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return Tensor2D._wrap(e / e.sum(axis=1, keepdims=True))


def frobenius_norm(a: Tensor2D) -> float:
    """sqrt of the sum of squares, accumulated in 64-bit regardless of input."""
    flat = a._data.ravel().astype(np.float64, copy=False)
    return float(math.sqrt(np.dot(flat, flat)))


class Side(Enum):
    """Which side of the basis the unknown coefficients sit on."""

    SOLVE_LEFT = "left"  # C @ basis ~= targets
    SOLVE_RIGHT = "right"  # basis @ C ~= targets


class LstsqResult(NamedTuple):
    coeff: Tensor2D
    rank_deficient: bool
    diag_ratio: float


def lstsq(basis: Tensor2D, targets: Tensor2D, side: Side) -> LstsqResult:
    """Least-squares coefficients against a basis, via QR.

    SOLVE_LEFT finds C minimising ||C @ basis - targets||_F with basis r x n,
    targets k x n, n >= r. SOLVE_RIGHT finds C minimising
    ||basis @ C - targets||_F with basis m x r, targets m x k, m >= r.

    The triangular factor's diagonal is inspected: if its smallest magnitude
    falls below ``RANK_DEFICIENCY_TOL`` times its largest, the basis is
    flagged rank-deficient and the minimum-norm solution (orthogonal SVD
    route) is returned instead of back-substitution, so the result stays
    finite. Normal equations are never formed.
    """
    p = _require_same_precision(basis, targets)
    if side is Side.SOLVE_LEFT:
        if basis.cols != targets.cols:
            raise ShapeError(
                f"lstsq left: basis has {basis.cols} cols, targets {targets.cols}"
            )
        if basis.cols < basis.rows:
            raise ShapeError(f"lstsq left: underdetermined basis {basis.rows}x{basis.cols}")
        system = np.ascontiguousarray(basis._data.T)  # n x r
        rhs = np.ascontiguousarray(targets._data.T)  # n x k
    else:
        if basis.rows != targets.rows:
            raise ShapeError(
                f"lstsq right: basis has {basis.rows} rows, targets {targets.rows}"
            )
        if basis.rows < basis.cols:
            raise ShapeError(f"lstsq right: underdetermined basis {basis.rows}x{basis.cols}")
        system = basis._data
        rhs = targets._data

    q, r = np.linalg.qr(system, mode="reduced")
    diag = np.abs(np.diagonal(r))
    largest = float(diag.max())
    ratio = float(diag.min() / largest) if largest > 0.0 else 0.0
    deficient = ratio < RANK_DEFICIENCY_TOL

    if deficient:
        sol = np.linalg.lstsq(system, rhs, rcond=None)[0]
    else:
        from scipy.linalg import solve_triangular

        sol = solve_triangular(r, q.T @ rhs, lower=False)

    if side is Side.SOLVE_LEFT:
        sol = np.ascontiguousarray(sol.T)
    coeff = Tensor2D._wrap(np.ascontiguousarray(sol, dtype=p.dtype))
    return LstsqResult(coeff, deficient, ratio)


class Rng:
    """Deterministic random source.

    Backed by numpy's PCG64 keyed by a 64-bit seed through SeedSequence, so
    one seed always reproduces one stream regardless of thread count.
    ``derive`` yields an independent child stream for (seed, index), which
    keeps multi-trial runs schedule-independent.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self._seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        ss = np.random.SeedSequence(self._seed, spawn_key=self._spawn_key)
        self._generator = np.random.Generator(np.random.PCG64(ss))

    @property
    def seed(self) -> int:
        return self._seed

    def derive(self, index: int) -> "Rng":
        """Independent child stream for the given index."""
        return Rng(self._seed, self._spawn_key + (int(index),))

    def standard_normal(self, rows: int, cols: int) -> np.ndarray:
        return self._generator.standard_normal((rows, cols))

    def __repr__(self) -> str:
        key = "".join(f",{k}" for k in self._spawn_key)
        return f"Rng(seed={self._seed}{key})"


def rand_gaussian(
    rng: Rng, rows: int, cols: int, precision: Precision = Precision.P64
) -> Tensor2D:
    """i.i.d. standard normal entries, reproducible from the rng's seed.

    Values are always drawn in double precision and rounded to the target,
    so the same seed yields the same model at both precisions.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"rand_gaussian needs positive dims, got {rows}x{cols}")
    vals = rng.standard_normal(rows, cols)
    return Tensor2D._wrap(np.ascontiguousarray(vals.astype(precision.dtype, copy=False)))
