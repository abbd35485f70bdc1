"""Command-line interface.

Subcommands: ``prepare`` (transform stored attention weights offline),
``verify`` (check a prepared bundle against its source model), ``bench``
(time baseline vs fused key projection, write CSV), ``demo`` (end-to-end
walkthrough at a small geometry) and ``decompose`` (raw basis
decomposition of a single tensor file). Exit status: 0 success, 1
verification failure, 2 usage or format error.
"""

from __future__ import annotations

import argparse
import sys
import tempfile
import time
from pathlib import Path

from . import tensor as T
from .attention import attention_scores, bda_forward, bda_prepare, mha_forward
from .bench import DEFAULT_SEQ_LENS, kv_proj_benchmark, write_csv
from .decompose import Axis, bd_decompose, cost_report
from .errors import ManifestError, PrecisionError, ShapeError, TensorFileError
from .tensor import Precision, Rng, rand_gaussian
from .tensorio import (
    load_bda_manifest,
    load_mha_manifest,
    load_tensor,
    save_bda_manifest,
    save_mha_manifest,
    save_tensor,
)
from .verify import (
    EQUIVALENCE_THRESHOLDS,
    Target,
    gen_random_mha,
    max_relative_error,
    reconstruction_error_report,
)

DEMO_GEOMETRY = (64, 16, 4)  # d, d_h, n_heads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdattn",
        description="Lossless basis-decomposed attention: prepare, verify, benchmark.",
    )
    parser.add_argument("--seed", type=int, default=0, help="base RNG seed")
    parser.add_argument(
        "--precision",
        choices=["p32", "p64"],
        default="p64",
        help="element precision for generated data",
    )
    parser.add_argument("--threads", type=int, default=1, help="kernel thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="transform an MHA bundle into BDA form")
    p.add_argument("in_manifest", help="manifest of the source MHA weights")
    p.add_argument("out_manifest", help="manifest to write the prepared weights to")
    p.add_argument(
        "--force-first",
        action="store_true",
        help="always use the first-block basis instead of residual-min selection",
    )
    p.add_argument(
        "--prepare-in-p64",
        action="store_true",
        help="decompose in double precision, then round back to the model precision",
    )

    p = sub.add_parser("verify", help="check a prepared bundle against its source")
    p.add_argument("mha_manifest")
    p.add_argument("bda_manifest")
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--trials", type=int, default=5)

    p = sub.add_parser("bench", help="time baseline vs fused key projection")
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--d-h", type=int, default=128)
    p.add_argument("--n-heads", type=int, default=128)
    p.add_argument(
        "--seq-lens",
        default=",".join(str(n) for n in DEFAULT_SEQ_LENS),
        help="comma-separated sequence lengths",
    )
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("demo", help="end-to-end walkthrough at a small geometry")
    p.add_argument("--out-dir", help="where to keep the generated bundles")

    p = sub.add_parser("decompose", help="basis-decompose a single tensor file")
    p.add_argument("tensor", help="input tensor file")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--axis", choices=["row", "column"], default="row")
    p.add_argument("--basis-out", help="output path for the basis tensor")
    p.add_argument("--coeff-out", help="output path for the coefficient tensor")

    return parser


def _print_report(label: str, report) -> None:
    print(
        f"{label} mse: {report.mse:.6e}  {label} nmse: {report.nmse:.6e}"
        f"  {label} max_rel: {report.max_rel:.6e}"
    )


def cmd_prepare(args) -> int:
    w = load_mha_manifest(args.in_manifest)
    start = time.perf_counter()
    prepared = bda_prepare(
        w, force_first=args.force_first, prepare_in_p64=args.prepare_in_p64
    )
    elapsed = time.perf_counter() - start
    save_bda_manifest(args.out_manifest, prepared)
    print(
        f"prepared d={w.d} d_h={w.d_h} n_heads={w.n_heads} "
        f"precision={w.precision.value} in {elapsed:.3f}s"
    )
    print(
        f"qk_tag={prepared.qk_tag.value} vo_tag={prepared.vo_tag.value} "
        f"qk residual (mean): {prepared.mean_residual_qk:.6e} "
        f"vo residual (mean): {prepared.mean_residual_vo:.6e}"
    )
    for target, heads in (
        ("qk", prepared.qk_deficient_heads),
        ("vo", prepared.vo_deficient_heads),
    ):
        if heads:
            print(f"warning: rank-deficient {target} basis in heads {list(heads)}")
    return 0


def _verify_pair(mha, bda, seq_len: int, trials: int, seed: int):
    """Per-trial forward and per-head score comparison on fresh inputs."""
    threshold = EQUIVALENCE_THRESHOLDS[mha.precision]
    rng = Rng(seed)
    failures = 0
    worst = 0.0
    for t in range(trials):
        x = rand_gaussian(rng.derive(t), seq_len, mha.d, mha.precision)
        err = max_relative_error(bda_forward(x, bda), mha_forward(x, mha))
        for head in range(mha.n_heads):
            err = max(
                err,
                max_relative_error(
                    attention_scores(x, bda, head), attention_scores(x, mha, head)
                ),
            )
        worst = max(worst, err)
        if err > threshold:
            failures += 1
    return failures, worst, threshold


def cmd_verify(args) -> int:
    mha = load_mha_manifest(args.mha_manifest)
    bda = load_bda_manifest(args.bda_manifest)
    if (mha.d, mha.d_h, mha.n_heads) != (bda.d, bda.d_h, bda.n_heads):
        raise ManifestError("manifest geometries differ")
    if mha.precision is not bda.precision:
        raise ManifestError("manifest precisions differ")
    _print_report("qk", reconstruction_error_report(mha, bda, Target.QK))
    _print_report("vo", reconstruction_error_report(mha, bda, Target.VO))
    failures, worst, threshold = _verify_pair(
        mha, bda, args.seq_len, args.trials, args.seed
    )
    print(
        f"verify: trials={args.trials} failures={failures} "
        f"worst={worst:.6e} threshold={threshold:.1e}"
    )
    return 0 if failures == 0 else 1


def cmd_bench(args) -> int:
    seq_lens = [int(part) for part in str(args.seq_lens).split(",") if part]
    if not seq_lens:
        raise ValueError("no sequence lengths given")
    records = kv_proj_benchmark(
        d=args.d,
        d_h=args.d_h,
        n_heads=args.n_heads,
        seq_lens=seq_lens,
        precision=Precision.parse(args.precision),
        reps=args.reps,
        warmup=args.warmup,
        seed=args.seed,
        threads=args.threads,
    )
    for rec in records:
        print(
            f"{rec.operator:>18s} L={rec.seq_len:<6d} median={rec.median_ns / 1e6:9.3f} ms"
            f"  {rec.tokens_per_sec / 1e6:8.4f} Mtok/s  speedup={rec.speedup_vs_baseline:.3f}"
            f"  flop_ratio={rec.flop_ratio:.4f}"
        )
    if args.out:
        write_csv(args.out, records)
        print(f"wrote {args.out}")
    return 0


def cmd_demo(args) -> int:
    d, d_h, n_heads = DEMO_GEOMETRY
    precision = Precision.parse(args.precision)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    else:
        tmp = tempfile.TemporaryDirectory(prefix="bdattn-demo-")
        out_dir = Path(tmp.name)

    print(f"model: d={d} d_h={d_h} n_heads={n_heads} precision={precision.value} seed={args.seed}")
    w = gen_random_mha(Rng(args.seed), d, d_h, n_heads, precision)
    save_mha_manifest(out_dir / "model.manifest", w)

    start = time.perf_counter()
    prepared = bda_prepare(w)
    elapsed = time.perf_counter() - start
    save_bda_manifest(out_dir / "model.bda.manifest", prepared)
    print(
        f"prepare time: {elapsed:.3f}s  qk_tag={prepared.qk_tag.value} "
        f"vo_tag={prepared.vo_tag.value}"
    )
    print(
        f"qk residual (mean): {prepared.mean_residual_qk:.6e}  "
        f"vo residual (mean): {prepared.mean_residual_vo:.6e}"
    )
    _print_report("qk", reconstruction_error_report(w, prepared, Target.QK))
    _print_report("vo", reconstruction_error_report(w, prepared, Target.VO))

    saving = d_h / d
    print(
        f"params: baseline={w.param_count} bda={prepared.param_count} "
        f"(k/v projections {saving:.1%} smaller, d_h/d)"
    )

    failures, worst, threshold = _verify_pair(w, prepared, seq_len=32, trials=3, seed=args.seed)
    print(f"verify: 3 trials, failures={failures} worst={worst:.6e} threshold={threshold:.1e}")

    # the demo geometry is tiny, so single runs time in milliseconds and
    # jitter; longer sequences and more reps keep the ratio meaningful
    records = kv_proj_benchmark(
        d=d,
        d_h=d_h,
        n_heads=n_heads,
        seq_lens=(2048, 4096),
        precision=precision,
        reps=15,
        warmup=3,
        seed=args.seed,
        threads=args.threads,
    )
    for rec in records:
        print(
            f"bench {rec.operator} L={rec.seq_len}: {rec.tokens_per_sec / 1e6:.3f} Mtok/s "
            f"speedup={rec.speedup_vs_baseline:.3f} flop_ratio={rec.flop_ratio:.4f}"
        )
    print("demo ok" if failures == 0 else "demo FAILED")
    return 0 if failures == 0 else 1


def cmd_decompose(args) -> int:
    t = load_tensor(args.tensor)
    axis = Axis.ROW if args.axis == "row" else Axis.COLUMN
    factors = bd_decompose(t, args.rank, axis)
    stem = Path(args.tensor)
    basis_out = args.basis_out or str(stem.with_suffix(".basis.bdt"))
    coeff_out = args.coeff_out or str(stem.with_suffix(".coeff.bdt"))
    save_tensor(basis_out, factors.basis)
    save_tensor(coeff_out, factors.coeff)
    costs = cost_report(t.rows, t.cols, args.rank)
    print(
        f"decomposed {t.rows}x{t.cols} rank={args.rank} axis={axis.value}: "
        f"tag={factors.tag.value} residual={factors.residual:.6e} "
        f"rank_deficient={factors.rank_deficient}"
    )
    print(
        f"params: full={costs.full_params} lowrank={costs.lowrank_params} "
        f"bd={costs.bd_params}  recon flops: lowrank={costs.lowrank_recon_flops} "
        f"bd={costs.bd_recon_flops}"
    )
    print(f"wrote {basis_out} and {coeff_out}")
    return 0


_COMMANDS = {
    "prepare": cmd_prepare,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "demo": cmd_demo,
    "decompose": cmd_decompose,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        T.set_thread_count(args.threads)
        return _COMMANDS[args.command](args)
    except (
        ManifestError,
        TensorFileError,
        ShapeError,
        PrecisionError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
