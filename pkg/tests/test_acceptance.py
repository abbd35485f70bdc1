"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run `pytest -s tests/test_acceptance.py` to watch the lines stream; under
plain `pytest` the lines appear in captured output for failing criteria.
"""

import csv
import time
from fractions import Fraction

import numpy as np

import bdattn as bd
from bdattn import Axis, Precision, Rng, Tag, Target
from bdattn.bench import kv_proj_benchmark, write_csv
from bdattn.cli import main


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {num:2d} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    print(line)
    assert ok, line


def test_criterion_01_losslessness():
    start = time.perf_counter()
    small = bd.equivalence_check(Rng(0), 64, 16, 4, seq_len=32, trials=20)
    large = bd.equivalence_check(Rng(1), 512, 128, 4, seq_len=16, trials=5)
    elapsed = time.perf_counter() - start
    worst = max(small.worst_value, large.worst_value)
    ok = small.failures == 0 and large.failures == 0 and worst <= 1e-10 and elapsed < 10.0
    report(1, "losslessness", ok, f"worst={worst:.2e} threshold=1e-10 runtime={elapsed:.1f}s")


def test_criterion_02_score_preservation():
    worst = 0.0
    for d, d_h, n_heads, seq_len, trials, base_seed in (
        (64, 16, 4, 32, 20, 100),
        (512, 128, 4, 16, 5, 200),
    ):
        for t in range(trials):
            rng = Rng(base_seed).derive(t)
            w = bd.gen_random_mha(rng, d, d_h, n_heads)
            prepared = bd.bda_prepare(w)
            x = bd.rand_gaussian(rng, seq_len, d)
            for head in range(n_heads):
                err = bd.max_relative_error(
                    bd.attention_scores(x, prepared, head),
                    bd.attention_scores(x, w, head),
                )
                worst = max(worst, err)
    report(2, "score preservation", worst <= 1e-10, f"worst={worst:.2e} threshold=1e-10")


def test_criterion_03_reconstruction_error():
    ok = True
    worst_p32 = 0.0
    worst_p64 = 0.0
    for seed in range(5):
        w32 = bd.gen_random_mha(Rng(seed), 512, 128, 8, Precision.P32)
        residual_min = bd.bda_prepare(w32)
        first_only = bd.bda_prepare(w32, force_first=True)
        for target in (Target.QK, Target.VO):
            chosen = bd.reconstruction_error_report(w32, residual_min, target)
            forced = bd.reconstruction_error_report(w32, first_only, target)
            worst_p32 = max(worst_p32, chosen.nmse)
            ok = ok and chosen.nmse <= 1e-6
            ok = ok and chosen.nmse <= forced.nmse
        w64 = bd.gen_random_mha(Rng(seed), 512, 128, 8, Precision.P64)
        prepared64 = bd.bda_prepare(w64)
        for target in (Target.QK, Target.VO):
            nmse64 = bd.reconstruction_error_report(w64, prepared64, target).nmse
            worst_p64 = max(worst_p64, nmse64)
            ok = ok and nmse64 <= 1e-18
    report(
        3,
        "reconstruction error",
        ok,
        f"worst p32 nmse={worst_p32:.2e} (<=1e-6), worst p64 nmse={worst_p64:.2e} (<=1e-18)",
    )


def test_criterion_04_cost_arithmetic():
    ok = True
    checked = 0
    for m in range(2, 65):
        for n in range(2, 65):
            for r in range(1, min(m, n)):
                c = bd.cost_report(m, n, r)
                ok = ok and c.bd_params == r * (m + n - r)
                ok = ok and c.bd_recon_flops == 2 * r * (m - r) * n
                ok = ok and c.full_params == m * n
                ok = ok and c.lowrank_params == r * (m + n)
                ok = ok and c.lowrank_recon_flops == 2 * r * m * n
                ok = ok and c.bd_params < c.lowrank_params
                ok = ok and c.bd_params < c.full_params
                ok = ok and c.bd_recon_flops < c.lowrank_recon_flops
                checked += 1

    # stored-element counters agree with the closed forms
    for m, n, r in ((9, 6, 2), (16, 33, 5), (40, 24, 7)):
        w = bd.matmul(bd.rand_gaussian(Rng(m * n), m, r), bd.rand_gaussian(Rng(r), r, n))
        for axis in (Axis.ROW, Axis.COLUMN):
            factors = bd.bd_decompose(w, r, axis)
            ok = ok and factors.param_count == bd.cost_report(m, n, r).bd_params

    # exact fractions at the flagship geometry
    d, d_h, n_heads = 512, 128, 8
    width = n_heads * d_h
    mha = bd.MHAWeights(
        d, n_heads, d_h,
        bd.zeros(d, width), bd.zeros(d, width), bd.zeros(d, width), bd.zeros(width, d),
    )
    bda = bd.BDAWeights(
        d, n_heads, d_h,
        bd.zeros(d, width), bd.zeros(d - d_h, width), bd.zeros(d - d_h, width),
        bd.zeros(width, d),
        Tag.FIRST, Tag.FIRST, (0.0, 0.0), (0.0, 0.0),
    )
    w_k_params = mha.w_k.rows * mha.w_k.cols
    c_qk_params = bda.c_qk.rows * bda.c_qk.cols
    kv_reduction = Fraction(w_k_params - c_qk_params, w_k_params)
    flop_ratio = Fraction(2 * d * width, 2 * (d - d_h) * width)
    ok = ok and kv_reduction == Fraction(1, 4)
    ok = ok and flop_ratio == Fraction(4, 3)
    ok = ok and bda.param_count == 2 * width * d + 2 * width * (d - d_h)
    report(
        4,
        "cost arithmetic",
        ok,
        f"{checked} (m,n,r) cases enumerated; k/v reduction={kv_reduction}, flop ratio={flop_ratio}",
    )


def test_criterion_05_full_rank_trials():
    start = time.perf_counter()
    summaries = {r: bd.full_rank_trials(Rng(10 + r), r, 1000) for r in (8, 16, 64)}
    elapsed = time.perf_counter() - start
    failures = sum(s.failures for s in summaries.values())
    worst = min(s.worst_value for s in summaries.values())
    ok = failures == 0 and elapsed < 30.0
    report(
        5,
        "full-rank trials",
        ok,
        f"3000 trials, failures={failures}, worst ratio={worst:.2e}, runtime={elapsed:.1f}s",
    )


def test_criterion_06_bd_linear_equivalence():
    ok = True
    worst = 0.0
    cases = 0
    for d_in, d_out in ((8, 8), (8, 64), (16, 256), (64, 16), (128, 128), (256, 64), (256, 256)):
        low = min(d_in, d_out)
        for r in sorted({1, low // 2, low - 1}):
            rng = Rng(7 * d_in + 13 * d_out + r)
            layer = bd.LowRankLayer(
                u=bd.rand_gaussian(rng, d_in, r), v=bd.rand_gaussian(rng, d_out, r)
            )
            converted = bd.bd_linear_from_lowrank(layer)
            ok = ok and converted.param_count == r * (d_in + d_out - r)
            x = bd.rand_gaussian(rng, 4, d_in)
            err = bd.max_relative_error(
                bd.bd_linear_forward(x, converted), bd.lowrank_forward(x, layer)
            )
            worst = max(worst, err)
            ok = ok and err <= 1e-10
            cases += 1
    report(6, "linear-layer equivalence", ok, f"{cases} shapes, worst={worst:.2e} (<=1e-10)")


def test_criterion_07_fused_bit_identity():
    identical = 0
    for trial in range(100):
        rng = Rng(77).derive(trial)
        d_h = 2 + trial % 5
        n_heads = 1 + trial % 4
        d = d_h + 1 + trial % 9
        seq_len = 1 + trial % 8
        tag = Tag.FIRST if trial % 2 == 0 else Tag.LAST
        precision = Precision.P64 if trial % 3 else Precision.P32
        x = bd.rand_gaussian(rng, seq_len, d, precision)
        c = bd.rand_gaussian(rng, d - d_h, n_heads * d_h, precision)
        fused = bd.fused_kv_proj(x, c, d_h, n_heads, tag)
        if tag is Tag.FIRST:
            rep = bd.repeat_cols(bd.slice_cols(x, 0, d_h), n_heads)
            prod = bd.matmul(bd.slice_cols(x, d_h, d), c)
        else:
            rep = bd.repeat_cols(bd.slice_cols(x, d - d_h, d), n_heads)
            prod = bd.matmul(bd.slice_cols(x, 0, d - d_h), c)
        if np.array_equal(fused.data, bd.add(rep, prod).data):
            identical += 1
    report(7, "fused operator bit-identity", identical == 100, f"{identical}/100 inputs")


def test_criterion_08_measured_speedup(tmp_path):
    records = kv_proj_benchmark(
        d=512,
        d_h=128,
        n_heads=128,
        seq_lens=(1024,),
        precision=Precision.P32,
        reps=7,
        warmup=2,
        seed=0,
        threads=1,
    )
    csv_path = tmp_path / "bench.csv"
    write_csv(csv_path, records)
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    fused = [row for row in rows if row["operator"] == "k_proj_bda_fused"]
    speedup = min(float(row["speedup"]) for row in fused)
    ratios = {row["flop_ratio"] for row in fused}
    ok = speedup >= 1.10 and ratios == {"1.3333"}
    report(
        8,
        "measured speedup",
        ok,
        f"speedup={speedup:.3f} (>=1.10 soft gate), csv flop_ratio={sorted(ratios)}",
    )


def test_criterion_09_rope_exactness_breaking():
    zero_worst = max(bd.rope_break_demo(Rng(s), 64, 16, 0) for s in range(5))
    broken = sum(
        1
        for s in range(100)
        if bd.rope_break_demo(Rng(1000 + s), 64, 16, 1 + s % 7) > 1e-3
    )
    ok = zero_worst <= 1e-12 and broken >= 95
    report(
        9,
        "rotary exactness breaking",
        ok,
        f"zero-rotation worst={zero_worst:.2e} (<=1e-12), generic broken {broken}/100 (>=95)",
    )


def test_criterion_10_preparation_speed(tmp_path, capsys):
    w = bd.gen_random_mha(Rng(42), 512, 128, 8, Precision.P64)
    mha_path = tmp_path / "model.manifest"
    bd.save_mha_manifest(mha_path, w)
    bda_path = tmp_path / "model.bda.manifest"
    start = time.perf_counter()
    rc = main(["prepare", str(mha_path), str(bda_path)])
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    ok = rc == 0 and elapsed < 1.0
    report(10, "preparation speed", ok, f"cmd_prepare wall={elapsed:.3f}s (<1s) at (512,128,8)")
