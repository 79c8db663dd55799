import csv
import io
import json
import math
import subprocess
import sys

import pytest

from lazy_descent.cli import main
from lazy_descent.sweep import (
    PRESETS,
    ConfigError,
    SweepSpec,
    emit,
    load_preset,
    parse_config,
    run_sweep,
)

THEORY_1PT = """
mode: theory
grid: {psi1: [1.5]}
fixed: {lambda: 1.0e-2, snr: 2}
"""


# ---------------------------------------------------------------------------
# parse_config
# ---------------------------------------------------------------------------


class TestParseConfig:
    def test_minimal_defaults(self):
        spec = parse_config("mode: theory\ngrid: {psi1: [1]}")
        assert spec.mode == "theory"
        assert spec.grid == {"psi1": [1]}
        assert spec.value("lambda", {}) == 1e-5
        assert spec.value("psi2", {}) == 1.0
        assert spec.value("snr", {}) == 1.0
        assert spec.value("K", {}) == 1
        assert spec.value("activation", {}) == "relu"
        assert spec.seeds == [0]

    def test_zero_lambda_rejected(self):
        with pytest.raises(ConfigError, match="lambda must be > 0"):
            parse_config("mode: theory\ngrid: {lambda: [0]}")

    def test_unknown_parameter_rejected(self):
        with pytest.raises(ConfigError, match="unknown parameter"):
            parse_config("mode: theory\ngrid: {psi7: [1]}")

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown top-level"):
            parse_config("mode: theory\ngrid: {psi1: [1]}\nextra: 3")

    def test_bad_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            parse_config("mode: dance\ngrid: {psi1: [1]}")

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            parse_config("mode: theory\ngrid: {}")

    def test_grid_fixed_overlap(self):
        with pytest.raises(ConfigError, match="both grid and fixed"):
            parse_config("mode: theory\ngrid: {psi1: [1]}\nfixed: {psi1: 2}")

    def test_domain_validation(self):
        with pytest.raises(ConfigError):
            parse_config("mode: theory\ngrid: {psi1: [-1]}")
        with pytest.raises(ConfigError):
            parse_config("mode: simulate\ngrid: {psi1: [1]}\nfixed: {D: 1}")
        with pytest.raises(ConfigError):
            parse_config("mode: theory\ngrid: {psi1: [1]}\nfixed: {K: 1.5}")

    def test_seeds_validation(self):
        spec = parse_config("mode: simulate\ngrid: {psi1: [1]}\nseeds: 5")
        assert spec.seeds == [5]
        with pytest.raises(ConfigError, match="seeds"):
            parse_config("mode: simulate\ngrid: {psi1: [1]}\nseeds: [a]")

    def test_infinite_K_theory_only(self):
        spec = parse_config("mode: theory\ngrid: {psi1: [1]}\nfixed: {K: inf}")
        assert spec.fixed["K"] == math.inf
        with pytest.raises(ConfigError, match="inf"):
            parse_config("mode: simulate\ngrid: {psi1: [1]}\nfixed: {K: inf}")

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError, match="malformed"):
            parse_config("mode: [unclosed")

    def test_output_path_carried(self):
        spec = parse_config("mode: theory\ngrid: {psi1: [1]}\noutput: out.csv")
        assert spec.output_path == "out.csv"


class TestPresets:
    def test_all_presets_load(self):
        for name in PRESETS:
            spec = load_preset(name)
            assert isinstance(spec, SweepSpec)
            assert spec.grid

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            load_preset("fig99")

    def test_expected_modes(self):
        assert load_preset("fig2").mode == "compare"
        assert load_preset("fig3_low_reg").mode == "theory"
        assert load_preset("figA_under_over").mode == "decompose"

    def test_fig3_recipe_shape(self):
        spec = load_preset("fig3_low_reg")
        pts = spec.grid["psi1"]
        assert len(pts) == 50
        assert pts[0] == pytest.approx(0.1) and pts[-1] == pytest.approx(10.0)
        ratios = [b / a for a, b in zip(pts, pts[1:])]
        assert max(ratios) == pytest.approx(min(ratios), rel=1e-9)  # log-spaced


# ---------------------------------------------------------------------------
# run_sweep
# ---------------------------------------------------------------------------


class TestRunSweep:
    def test_single_theory_point(self):
        rows = run_sweep(parse_config(THEORY_1PT))
        assert len(rows) == 1
        row = rows[0]
        assert row["converged"] is True
        comp_sum = row["noise"] + row["init"] + row["samp"] + row["bias"]
        assert row["total"] == pytest.approx(comp_sum, rel=1e-10)
        assert row["q_star"] > 0 and row["r_star"] > 0
        assert "psi1_term" in row and "psi2_d" in row

    def test_row_count_theory_ignores_seeds(self):
        spec = parse_config(
            "mode: theory\ngrid: {psi1: [0.5, 1.5], lambda: [1.0e-2, 1.0e-1]}\n"
            "seeds: [0, 1, 2]"
        )
        assert len(run_sweep(spec)) == 4

    def test_row_count_simulation_times_seeds(self):
        spec = parse_config(
            "mode: simulate\ngrid: {psi1: [0.5, 1.5]}\n"
            "fixed: {D: 20, lambda: 1.0e-2, n_reps: 2, n_test: 200}\nseeds: [0, 1, 2]"
        )
        rows = run_sweep(spec)
        assert len(rows) == 6
        assert all("seed" in r for r in rows)

    def test_canonical_sort(self):
        spec = parse_config(
            "mode: theory\ngrid: {psi1: [2.0, 0.5], lambda: [1.0e-1, 1.0e-2]}"
        )
        rows = run_sweep(spec)
        keys = [(r["lambda"], r["psi1"]) for r in rows]
        assert keys == sorted(keys)

    def test_parallel_matches_serial(self):
        spec = parse_config(
            "mode: theory\ngrid: {psi1: [0.5, 1.0, 2.0]}\nfixed: {lambda: 1.0e-2}"
        )
        assert run_sweep(spec, jobs=1) == run_sweep(spec, jobs=3)

    def test_point_failure_flagged_not_raised(self):
        # divide-and-conquer with K not dividing N fails per point
        spec = parse_config(
            "mode: simulate\ngrid: {psi1: [1.0]}\n"
            "fixed: {D: 50, K: 3, variant: divide_conquer, lambda: 1.0e-2}"
        )
        rows = run_sweep(spec)
        assert len(rows) == 1
        assert rows[0]["converged"] is False
        assert "error" in rows[0]

    def test_compare_mode_has_z_columns(self):
        spec = parse_config(
            "mode: compare\ngrid: {psi1: [0.5]}\n"
            "fixed: {D: 40, lambda: 1.0e-2, n_seeds: 3}"
        )
        row = run_sweep(spec)[0]
        for name in ("psi1_term", "psi2_v", "psi2_d"):
            assert f"{name}_sim" in row
            assert f"{name}_se" in row
            assert f"{name}_z" in row
        assert "max_abs_z" in row

    def test_theory_mode_has_no_z_columns(self):
        row = run_sweep(parse_config(THEORY_1PT))[0]
        assert not any(k.endswith("_z") for k in row)

    def test_ensemble_study_columns(self):
        spec = parse_config(
            "mode: theory\ngrid: {psi2: [2.0]}\n"
            "fixed: {psi1: 0.5, lambda: 1.0e-2, study: ens_vs_over}"
        )
        row = run_sweep(spec)[0]
        assert row["err_k2"] < row["err_k1"]
        assert row["err_k1_doubled"] > 0

    def test_decompose_mode(self):
        spec = parse_config(
            "mode: decompose\ngrid: {psi1: [1.0]}\n"
            "fixed: {D: 24, lambda: 1.0e-2, n_X: 3, n_Theta: 2, n_eps: 2}"
        )
        row = run_sweep(spec)[0]
        assert row["converged"] is True
        for k in ("noise", "init", "samp", "bias", "noise_se"):
            assert k in row


# ---------------------------------------------------------------------------
# emit
# ---------------------------------------------------------------------------


class TestEmit:
    ROWS = [
        {"psi1": 0.5, "total": 1.25, "converged": True},
        {"psi1": 2.0, "total": 0.75, "converged": True},
    ]

    def test_csv_line_count(self):
        text = emit(self.ROWS[:1], "csv")
        assert text.count("\n") == 2
        assert text.splitlines()[0] == "psi1,total,converged"

    def test_csv_round_trip(self):
        text = emit(self.ROWS, "csv")
        parsed = list(csv.DictReader(io.StringIO(text)))
        assert float(parsed[0]["psi1"]) == 0.5
        assert float(parsed[1]["total"]) == 0.75
        assert parsed[0]["converged"] == "true"

    def test_json_round_trip(self):
        text = emit(self.ROWS, "json")
        parsed = json.loads(text)
        assert parsed == self.ROWS

    def test_seventeen_significant_digits(self):
        val = 1.0 / 3.0
        text = emit([{"x": val}], "csv")
        assert float(text.splitlines()[1]) == val  # exact binary round trip

    def test_lf_endings_and_utf8(self, tmp_path):
        path = tmp_path / "out.csv"
        emit(self.ROWS, "csv", str(path))
        raw = path.read_bytes()
        assert b"\r" not in raw
        raw.decode("utf-8")

    def test_byte_identical_rerun(self, tmp_path):
        spec = parse_config(THEORY_1PT)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        emit(run_sweep(spec), "csv", str(p1))
        emit(run_sweep(spec, jobs=2), "csv", str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_rows_rejected(self):
        with pytest.raises(ValueError):
            emit([], "csv")

    def test_bad_format_rejected(self):
        with pytest.raises(ValueError):
            emit(self.ROWS, "xml")

    def test_io_error_surfaced_with_path(self, tmp_path):
        bad = tmp_path / "missing_dir" / "out.csv"
        with pytest.raises(IOError, match="out.csv"):
            emit(self.ROWS, "csv", str(bad))


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


class TestCli:
    def test_success_with_config(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.yaml"
        cfg.write_text(THEORY_1PT)
        out = tmp_path / "rows.csv"
        assert main(["theory", "--config", str(cfg), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 2

    def test_success_stdout(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.yaml"
        cfg.write_text(THEORY_1PT)
        assert main(["theory", "--config", str(cfg)]) == 0
        assert "psi1" in capsys.readouterr().out

    def test_preset_run(self, tmp_path):
        out = tmp_path / "rows.json"
        rc = main(["theory", "--preset", "fig3_high_reg", "--out", str(out),
                   "--format", "json", "--jobs", "2"])
        assert rc == 0
        rows = json.loads(out.read_text())
        assert len(rows) == 50
        assert all(r["converged"] for r in rows)

    def test_config_error_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("mode: theory\ngrid: {psi7: [1]}")
        assert main(["theory", "--config", str(cfg)]) == 2
        assert "psi7" in capsys.readouterr().err

    def test_missing_source_exit_2(self, capsys):
        assert main(["theory"]) == 2

    def test_unreadable_config_exit_4(self, tmp_path):
        assert main(["theory", "--config", str(tmp_path / "absent.yaml")]) == 4

    def test_all_points_failing_exit_3(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.yaml"
        cfg.write_text(
            "mode: simulate\ngrid: {psi1: [1.0]}\n"
            "fixed: {D: 50, K: 3, variant: divide_conquer, lambda: 1.0e-2}"
        )
        assert main(["simulate", "--config", str(cfg)]) == 3

    def test_unwritable_output_exit_4(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.yaml"
        cfg.write_text(THEORY_1PT)
        out = tmp_path / "no_such_dir" / "rows.csv"
        assert main(["theory", "--config", str(cfg), "--out", str(out)]) == 4

    def test_seed_override(self, tmp_path):
        cfg = tmp_path / "sweep.yaml"
        cfg.write_text(
            "mode: simulate\ngrid: {psi1: [1.0]}\n"
            "fixed: {D: 20, lambda: 1.0e-2, n_reps: 2, n_test: 200}\nseeds: [0, 1]"
        )
        out = tmp_path / "rows.json"
        assert main(["simulate", "--config", str(cfg), "--out", str(out),
                     "--format", "json", "--seed", "7"]) == 0
        rows = json.loads(out.read_text())
        assert [r["seed"] for r in rows] == [7]

    def test_console_script_installed(self, tmp_path):
        cfg = tmp_path / "sweep.yaml"
        cfg.write_text(THEORY_1PT)
        proc = subprocess.run(
            [sys.executable, "-m", "lazy_descent.cli", "theory",
             "--config", str(cfg)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "psi1" in proc.stdout
