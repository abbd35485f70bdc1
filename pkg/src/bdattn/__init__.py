"""Lossless basis-decomposed attention.

A rank-r matrix can be represented by r of its own contiguous rows or
columns plus coefficients for the rest, which is strictly cheaper to store
and rebuild than a two-factor low-rank form. Applied per attention head to
the query-key and value-output weight products, this turns multi-head
attention into an exactly equivalent form with smaller key and value
projections. This package provides the decomposition, the reformulated
attention, a verification harness, tensor file formats and a CLI.
"""

import os as _os

if "NUMBA_THREADING_LAYER" not in _os.environ:
    # tbb in this image is too old for numba; omp is present and quiet
    _os.environ["NUMBA_THREADING_LAYER"] = "omp"

from .attention import (
    BDAWeights,
    MHAWeights,
    attention_scores,
    bda_forward,
    bda_prepare,
    fused_kv_proj,
    mha_forward,
)
from .decompose import (
    Axis,
    BDFactors,
    CostReport,
    Tag,
    bd_decompose,
    bd_decompose_both,
    bd_reconstruct,
    cost_report,
)
from .errors import ManifestError, PrecisionError, ShapeError, TensorFileError
from .linear import (
    BDLinearLayer,
    LowRankLayer,
    bd_linear_forward,
    bd_linear_from_lowrank,
    lowrank_forward,
)
from .tensor import (
    LstsqResult,
    Precision,
    Rng,
    Side,
    Tensor2D,
    add,
    concat_cols,
    concat_rows,
    frobenius_norm,
    identity,
    lstsq,
    matmul,
    rand_gaussian,
    repeat_cols,
    scale,
    set_thread_count,
    slice_cols,
    slice_rows,
    softmax_rows,
    sub,
    thread_count,
    transpose,
    zeros,
)
from .tensorio import (
    load_bda_manifest,
    load_mha_manifest,
    load_tensor,
    save_bda_manifest,
    save_mha_manifest,
    save_tensor,
)
from .verify import (
    ErrorReport,
    Target,
    TrialSummary,
    equivalence_check,
    full_rank_trials,
    gen_random_mha,
    max_relative_error,
    reconstruction_error_report,
    rope_break_demo,
    rope_deviation,
    rotation_matrix,
    singular_value_ratio,
)

__version__ = "0.1.0"
