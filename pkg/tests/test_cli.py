"""End-to-end CLI flows and exit-code contract (0 ok, 1 verify fail, 2 usage)."""

import csv
import dataclasses
import re
import time

import pytest

import bdattn as bd
from bdattn import Rng
from bdattn.cli import main


def make_bundle(tmp_path, seed=7, d=64, d_h=16, n_heads=4):
    w = bd.gen_random_mha(Rng(seed), d, d_h, n_heads)
    mha_path = tmp_path / "model.manifest"
    bd.save_mha_manifest(mha_path, w)
    return mha_path


class TestPrepareVerify:
    def test_prepare_then_verify_passes(self, tmp_path, capsys):
        mha = make_bundle(tmp_path, seed=7)
        bda = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha), str(bda)]) == 0
        out = capsys.readouterr().out
        assert "prepared d=64" in out
        assert re.search(r"in \d+\.\d+s", out)
        assert main(["verify", str(mha), str(bda), "--trials", "3"]) == 0
        out = capsys.readouterr().out
        assert "failures=0" in out

    def test_perturbed_weights_fail_verification(self, tmp_path):
        mha = make_bundle(tmp_path, seed=8)
        bda = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha), str(bda)]) == 0
        prepared = bd.load_bda_manifest(bda)
        noise = bd.scale(bd.rand_gaussian(Rng(1), prepared.c_qk.rows, prepared.c_qk.cols), 1e-3)
        noisy = dataclasses.replace(prepared, c_qk=bd.add(prepared.c_qk, noise))
        bd.save_bda_manifest(bda, noisy)
        assert main(["verify", str(mha), str(bda), "--trials", "2"]) == 1

    def test_preparing_a_bda_manifest_is_a_role_error(self, tmp_path, capsys):
        mha = make_bundle(tmp_path, seed=9)
        bda = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha), str(bda)]) == 0
        capsys.readouterr()
        assert main(["prepare", str(bda), str(tmp_path / "again.manifest")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_force_first_flag(self, tmp_path):
        mha = make_bundle(tmp_path, seed=10)
        bda = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha), str(bda), "--force-first"]) == 0
        prepared = bd.load_bda_manifest(bda)
        assert prepared.qk_tag is bd.Tag.FIRST
        assert prepared.vo_tag is bd.Tag.FIRST

    def test_zero_trials_passes(self, tmp_path):
        mha = make_bundle(tmp_path, seed=11)
        bda = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha), str(bda)]) == 0
        assert main(["verify", str(mha), str(bda), "--trials", "0"]) == 0

    def test_geometry_mismatch_is_usage_error(self, tmp_path):
        mha_a = make_bundle(tmp_path, seed=12)
        bda_a = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha_a), str(bda_a)]) == 0
        other_dir = tmp_path / "other"
        other_dir.mkdir()
        mha_b = make_bundle(other_dir, seed=13, d=32, d_h=8, n_heads=2)
        assert main(["verify", str(mha_b), str(bda_a)]) == 2

    def test_missing_manifest_is_usage_error(self, tmp_path):
        assert main(["prepare", str(tmp_path / "nope.manifest"), str(tmp_path / "o")]) == 2

    def test_p32_pipeline(self, tmp_path):
        w = bd.gen_random_mha(Rng(21), 32, 8, 2, bd.Precision.P32)
        mha = tmp_path / "model.manifest"
        bd.save_mha_manifest(mha, w)
        bda = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha), str(bda)]) == 0
        assert bd.load_bda_manifest(bda).precision is bd.Precision.P32
        assert main(["verify", str(mha), str(bda), "--trials", "3"]) == 0

    def test_prepare_in_p64_flag(self, tmp_path):
        w = bd.gen_random_mha(Rng(22), 32, 8, 2, bd.Precision.P32)
        mha = tmp_path / "model.manifest"
        bd.save_mha_manifest(mha, w)
        bda = tmp_path / "model.bda.manifest"
        assert main(["prepare", str(mha), str(bda), "--prepare-in-p64"]) == 0
        prepared = bd.load_bda_manifest(bda)
        assert prepared.precision is bd.Precision.P32
        assert main(["verify", str(mha), str(bda), "--trials", "2"]) == 0


class TestBench:
    def test_csv_contents(self, tmp_path):
        out_csv = tmp_path / "bench.csv"
        rc = main(
            [
                "bench",
                "--d", "32",
                "--d-h", "8",
                "--n-heads", "4",
                "--seq-lens", "16,32",
                "--out", str(out_csv),
            ]
        )
        assert rc == 0
        with out_csv.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4  # |seq_lens| x operators
        baseline = [r for r in rows if r["operator"] == "k_proj_baseline"]
        fused = [r for r in rows if r["operator"] == "k_proj_bda_fused"]
        assert len(baseline) == len(fused) == 2
        for r in baseline:
            assert float(r["speedup"]) == 1.0
            assert float(r["flop_ratio"]) == 1.0
        for r in fused:
            assert float(r["flop_ratio"]) == pytest.approx(32 / 24, abs=1e-4)
            assert int(r["median_ns"]) > 0
            assert float(r["tokens_per_sec"]) > 0
        assert set(rows[0].keys()) == {
            "operator", "seq_len", "d", "d_h", "n_heads", "precision",
            "threads", "median_ns", "tokens_per_sec", "speedup", "flop_ratio",
        }

    def test_rejects_too_few_reps(self, tmp_path):
        rc = main(["bench", "--d", "16", "--d-h", "4", "--n-heads", "2",
                   "--seq-lens", "8", "--reps", "3"])
        assert rc == 2

    def test_thread_count_recorded(self, tmp_path):
        out_csv = tmp_path / "bench.csv"
        rc = main(["--threads", "2", "bench", "--d", "16", "--d-h", "4",
                   "--n-heads", "2", "--seq-lens", "8", "--out", str(out_csv)])
        assert rc == 0
        with out_csv.open() as fh:
            rows = list(csv.DictReader(fh))
        assert {r["threads"] for r in rows} == {"2"}
        bd.set_thread_count(1)


class TestDemo:
    def test_demo_runs_clean_and_fast(self, tmp_path, capsys):
        start = time.perf_counter()
        rc = main(["demo", "--out-dir", str(tmp_path / "demo")])
        elapsed = time.perf_counter() - start
        assert rc == 0
        assert elapsed < 5.0
        out = capsys.readouterr().out
        assert "demo ok" in out
        assert "25.0% smaller" in out
        assert (tmp_path / "demo" / "model.manifest").exists()
        assert (tmp_path / "demo" / "model.bda.manifest").exists()

    def test_demo_seed_reproducibility(self, tmp_path, capsys):
        def residual_lines(run_dir):
            assert main(["--seed", "5", "demo", "--out-dir", str(run_dir)]) == 0
            out = capsys.readouterr().out
            return [ln for ln in out.splitlines() if "residual" in ln or "nmse" in ln]

        first = residual_lines(tmp_path / "a")
        second = residual_lines(tmp_path / "b")
        assert first == second and first

    def test_p32_nmse_larger_than_p64(self, tmp_path, capsys):
        def qk_nmse(precision):
            rc = main(
                ["--precision", precision, "demo", "--out-dir", str(tmp_path / precision)]
            )
            assert rc == 0
            out = capsys.readouterr().out
            match = re.search(r"qk nmse: ([0-9.e+-]+)", out)
            assert match, out
            return float(match.group(1))

        assert qk_nmse("p32") > qk_nmse("p64")


class TestDecomposeCommand:
    def test_decompose_writes_factors(self, tmp_path, capsys):
        t = bd.matmul(
            bd.rand_gaussian(Rng(0), 12, 3), bd.rand_gaussian(Rng(1), 3, 9)
        )
        src = tmp_path / "w.bdt"
        bd.save_tensor(src, t)
        rc = main(["decompose", str(src), "--rank", "3", "--axis", "row"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "residual=" in out
        basis = bd.load_tensor(tmp_path / "w.basis.bdt")
        coeff = bd.load_tensor(tmp_path / "w.coeff.bdt")
        assert basis.shape == (3, 9)
        assert coeff.shape == (9, 3)

    def test_bad_rank_is_usage_error(self, tmp_path):
        t = bd.rand_gaussian(Rng(2), 4, 4)
        src = tmp_path / "w.bdt"
        bd.save_tensor(src, t)
        assert main(["decompose", str(src), "--rank", "9"]) == 2


class TestUsage:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 2

    def test_no_command(self):
        assert main([]) == 2

    def test_bad_flag_value(self):
        assert main(["--precision", "p16", "demo"]) == 2
