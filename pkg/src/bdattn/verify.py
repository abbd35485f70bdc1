"""Runnable checks behind the library's exactness and robustness claims.

Covers random model generation, forward-pass equivalence trials,
reconstruction error metrics (MSE / NMSE per head), full-rank trials for
random square matrices, and a demonstration that inserting a rotary
position rotation between the factors breaks the exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .attention import BDAWeights, MHAWeights, bda_forward, bda_prepare, mha_forward
from .decompose import Axis, Tag, bd_decompose
from .tensor import Precision, Rng, Tensor2D, rand_gaussian

# Max-relative-error thresholds for forward equivalence, per precision.
EQUIVALENCE_THRESHOLDS = {Precision.P64: 1e-10, Precision.P32: 1e-4}

# A square Gaussian draw counts as rank-deficient below this singular
# value ratio; well under observed Gaussian conditioning, well over noise.
FULL_RANK_RATIO = 1e-10


class Target(Enum):
    """Which per-head weight product a report is about."""

    QK = "qk"
    VO = "vo"


@dataclass(frozen=True)
class ErrorReport:
    """Reconstruction error of prepared factors against the exact products.

    ``mse`` and ``nmse`` are means across heads; ``nmse`` normalises each
    head by the mean squared magnitude of its reference product.
    ``max_rel`` is the worst per-head ratio of largest absolute error to
    largest reference magnitude.
    """

    mse: float
    nmse: float
    max_rel: float
    per_head: tuple[tuple[float, float], ...]
    precision: Precision

    def __post_init__(self):
        if self.mse < 0 or self.nmse < 0 or self.max_rel < 0:
            raise ValueError("error metrics must be non-negative")


@dataclass(frozen=True)
class TrialSummary:
    trials: int
    failures: int
    worst_value: float
    threshold: float

    def __post_init__(self):
        if not 0 <= self.failures <= self.trials:
            raise ValueError("failures must lie in [0, trials]")

    @property
    def ok(self) -> bool:
        return self.failures == 0


def max_relative_error(result: Tensor2D, reference: Tensor2D) -> float:
    """Largest absolute difference over the largest reference magnitude."""
    diff = np.abs(result.data.astype(np.float64) - reference.data.astype(np.float64))
    denom = float(np.abs(reference.data).max())
    if denom == 0.0:
        return float(diff.max())
    return float(diff.max()) / denom


def gen_random_mha(
    rng: Rng, d: int, d_h: int, n_heads: int, precision: Precision = Precision.P64
) -> MHAWeights:
    """Gaussian projection weights at scale 1/sqrt(d), the usual init scale."""
    if d_h >= d:
        raise ValueError(f"d_h ({d_h}) must be < d ({d})")
    s = 1.0 / math.sqrt(d)
    width = n_heads * d_h
    return MHAWeights(
        d=d,
        n_heads=n_heads,
        d_h=d_h,
        w_q=T.scale(rand_gaussian(rng, d, width, precision), s),
        w_k=T.scale(rand_gaussian(rng, d, width, precision), s),
        w_v=T.scale(rand_gaussian(rng, d, width, precision), s),
        w_o=T.scale(rand_gaussian(rng, width, d, precision), s),
    )


def _head_reference(w: MHAWeights, i: int, target: Target) -> Tensor2D:
    lo, hi = i * w.d_h, (i + 1) * w.d_h
    if target is Target.QK:
        return T._fast_matmul(
            T.slice_cols(w.w_q, lo, hi), T.transpose(T.slice_cols(w.w_k, lo, hi))
        )
    return T._fast_matmul(T.slice_cols(w.w_v, lo, hi), T.slice_rows(w.w_o, lo, hi))


def _head_reconstruction(prepared: BDAWeights, i: int, target: Target) -> Tensor2D:
    d_h = prepared.d_h
    lo, hi = i * d_h, (i + 1) * d_h
    if target is Target.QK:
        basis = T.slice_cols(prepared.b_qk, lo, hi)  # d x d_h
        coeff = T.transpose(T.slice_cols(prepared.c_qk, lo, hi))  # d_h x (d - d_h)
        rebuilt = T._fast_matmul(basis, coeff)
        parts = [basis, rebuilt] if prepared.qk_tag is Tag.FIRST else [rebuilt, basis]
        return T.concat_cols(parts)
    basis = T.slice_rows(prepared.b_vo, lo, hi)  # d_h x d
    coeff = T.slice_cols(prepared.c_vo, lo, hi)  # (d - d_h) x d_h
    rebuilt = T._fast_matmul(coeff, basis)
    parts = [basis, rebuilt] if prepared.vo_tag is Tag.FIRST else [rebuilt, basis]
    return T.concat_rows(parts)


def reconstruction_error_report(
    w: MHAWeights, prepared: BDAWeights, target: Target
) -> ErrorReport:
    """Per-head MSE/NMSE of the prepared factors against the exact products."""
    if (w.d, w.n_heads, w.d_h) != (prepared.d, prepared.n_heads, prepared.d_h):
        raise ValueError("weight geometries differ between model and prepared form")
    per_head = []
    max_rel = 0.0
    for i in range(w.n_heads):
        ref = _head_reference(w, i, target).data.astype(np.float64)
        recon = _head_reconstruction(prepared, i, target).data.astype(np.float64)
        diff = recon - ref
        mse = float(np.mean(diff * diff))
        ref_power = float(np.mean(ref * ref))
        nmse = mse / ref_power if ref_power > 0.0 else (0.0 if mse == 0.0 else math.inf)
        per_head.append((mse, nmse))
        ref_peak = float(np.abs(ref).max())
        if ref_peak > 0.0:
            max_rel = max(max_rel, float(np.abs(diff).max()) / ref_peak)
        else:
            max_rel = max(max_rel, float(np.abs(diff).max()))
    n = len(per_head)
    return ErrorReport(
        mse=sum(m for m, _ in per_head) / n,
        nmse=sum(s for _, s in per_head) / n,
        max_rel=max_rel,
        per_head=tuple(per_head),
        precision=prepared.precision,
    )


def equivalence_check(
    rng: Rng,
    d: int,
    d_h: int,
    n_heads: int,
    seq_len: int,
    precision: Precision = Precision.P64,
    trials: int = 20,
    threshold: float | None = None,
) -> TrialSummary:
    """Fresh model per trial; compare the two forward passes end to end.

    Each trial draws its own child stream, so results do not depend on
    execution order. A trial fails when the max relative difference between
    the decomposed and baseline outputs exceeds the threshold (defaults per
    precision).
    """
    thr = EQUIVALENCE_THRESHOLDS[precision] if threshold is None else float(threshold)
    failures = 0
    worst = 0.0
    for t in range(trials):
        stream = rng.derive(t)
        w = gen_random_mha(stream, d, d_h, n_heads, precision)
        prepared = bda_prepare(w)
        x = rand_gaussian(stream, seq_len, d, precision)
        err = max_relative_error(bda_forward(x, prepared), mha_forward(x, w))
        worst = max(worst, err)
        if err > thr:
            failures += 1
    return TrialSummary(trials=trials, failures=failures, worst_value=worst, threshold=thr)


def singular_value_ratio(t: Tensor2D) -> float:
    """Smallest over largest singular value, computed in double precision."""
    s = np.linalg.svd(t.data.astype(np.float64), compute_uv=False)
    top = float(s.max())
    return float(s.min()) / top if top > 0.0 else 0.0


def full_rank_trials(rng: Rng, r: int, trials: int) -> TrialSummary:
    """Draw Gaussian r x r matrices; count any with singular value ratio
    below ``FULL_RANK_RATIO``. Random square matrices are full rank almost
    surely, so the expected failure count is zero."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    failures = 0
    worst = math.inf
    for t in range(trials):
        m = rand_gaussian(rng.derive(t), r, r, Precision.P64)
        ratio = singular_value_ratio(m)
        worst = min(worst, ratio)
        if ratio < FULL_RANK_RATIO:
            failures += 1
    return TrialSummary(
        trials=trials, failures=failures, worst_value=worst, threshold=FULL_RANK_RATIO
    )


def rotation_matrix(d_h: int, relative_offset: int, precision: Precision = Precision.P64) -> Tensor2D:
    """Block-diagonal 2x2 rotations with the standard rotary frequencies.

    Pair p rotates by relative_offset * 10000^(-2p/d_h); a zero offset gives
    the identity.
    """
    if d_h % 2 != 0:
        raise ValueError(f"d_h must be even for paired rotations, got {d_h}")
    r = np.zeros((d_h, d_h), dtype=np.float64)
    for p in range(d_h // 2):
        theta = relative_offset * 10000.0 ** (-2.0 * p / d_h)
        c, s = math.cos(theta), math.sin(theta)
        r[2 * p, 2 * p] = c
        r[2 * p, 2 * p + 1] = -s
        r[2 * p + 1, 2 * p] = s
        r[2 * p + 1, 2 * p + 1] = c
    return Tensor2D(r, precision)


def rope_deviation(w_q: Tensor2D, w_k: Tensor2D, relative_offset: int) -> float:
    """Relative deviation when a rotary rotation is inserted naively.

    Decomposes W_q @ W_k.T and compares W_q R W_k.T against the basis form
    with R slotted between the basis and [I, C]. At zero offset the
    rotation is the identity and the deviation collapses to the exact
    decomposition residual; for generic angles the two sides differ
    materially, showing that in-head rotary embeddings break the exact
    reformulation.
    """
    if w_q.shape != w_k.shape:
        raise ValueError(f"weight shapes differ: {w_q.shape} vs {w_k.shape}")
    d_h = w_q.cols
    if d_h % 2 != 0:
        raise ValueError(f"d_h must be even, got {d_h}")
    rot = rotation_matrix(d_h, relative_offset, w_q.precision)

    lhs = T.matmul(T.matmul(w_q, rot), T.transpose(w_k))
    factors = bd_decompose(T.matmul(w_q, T.transpose(w_k)), d_h, Axis.COLUMN)
    eye = T.identity(d_h, w_q.precision)
    if factors.tag is Tag.FIRST:
        bracket = T.concat_cols([eye, factors.coeff])
    else:
        bracket = T.concat_cols([factors.coeff, eye])
    rhs = T.matmul(T.matmul(factors.basis, rot), bracket)
    return T.frobenius_norm(T.sub(lhs, rhs)) / T.frobenius_norm(lhs)


def rope_break_demo(rng: Rng, d: int, d_h: int, relative_offset: int) -> float:
    """``rope_deviation`` on one freshly drawn single-head weight pair."""
    if d_h % 2 != 0:
        raise ValueError(f"d_h must be even, got {d_h}")
    w_q = rand_gaussian(rng, d, d_h)
    w_k = rand_gaussian(rng, d, d_h)
    return rope_deviation(w_q, w_k, relative_offset)
