"""End-to-end checks of the command line driver.

Everything runs in-process through cli.run so the suite stays fast; the
console entry point is the same function behind sys.exit.
"""

import csv
import hashlib
import json

import numpy as np
import pytest

import synthcombo.cli as cli_mod
from synthcombo.cli import load_panel, run, save_panel
from synthcombo.estimator import Panel
from synthcombo.hypercube import character_matrix
from synthcombo.perm import (
    PermPanel,
    all_permutations,
    pair_count,
    permutation_to_combination,
    save_rankings,
)
from synthcombo.sparse_regress import NumericalError


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def sim_files(workdir):
    """A small observational panel plus its ground truth."""
    panel = workdir / "panel.csv"
    truth = workdir / "truth.json"
    rc = run([
        "simulate", "--preset", "observational", "--p", "9",
        "--n-units", "10", "--r", "2", "--donor-count", "4",
        "--donor-obs", "200", "--nondonor-obs", "60", "--seed", "3",
        "--out-panel", str(panel), "--out-truth", str(truth),
    ])
    assert rc == 0
    return panel, truth


@pytest.fixture(scope="module")
def model_file(workdir, sim_files):
    panel, _ = sim_files
    out = workdir / "model.json"
    rc = run([
        "fit", "--input", str(panel), "--horizontal", "select-ridge",
        "--donor-ids", "0,1,2,3", "--kappa-method", "fixed",
        "--kappa-fixed", "2", "--vertical-threshold", "inf",
        "--seed", "3", "--out", str(out),
    ])
    assert rc == 0
    return out


class TestParsing:
    @pytest.mark.parametrize("argv", [
        ["--help"],
        ["simulate", "--help"],
        ["design", "--help"],
        ["fit", "--help"],
        ["predict", "--help"],
        ["evaluate", "--help"],
        ["check", "--help"],
    ])
    def test_help_exits_zero(self, argv, capsys):
        assert run(argv) == 0
        assert "usage" in capsys.readouterr().out

    def test_version_exits_zero(self, capsys):
        assert run(["--version"]) == 0

    def test_missing_command(self, capsys):
        assert run([]) == 1
        assert "command is required" in capsys.readouterr().err

    def test_unknown_command(self):
        assert run(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert run(["fit"]) == 1

    def test_negative_seed(self, workdir):
        rc = run([
            "simulate", "--preset", "observational", "--p", "9",
            "--seed", "-1",
            "--out-panel", str(workdir / "x.csv"),
            "--out-truth", str(workdir / "x.json"),
        ])
        assert rc == 1

    def test_design_preset_needs_plan_path(self, workdir):
        rc = run([
            "simulate", "--preset", "design", "--p", "9", "--n-units", "12",
            "--out-panel", str(workdir / "y.csv"),
            "--out-truth", str(workdir / "y.json"),
        ])
        assert rc == 1

    def test_unknown_evaluate_method(self, workdir):
        rc = run([
            "evaluate", "--p", "6", "--methods", "synthcombo,bogus",
            "--out", str(workdir / "z.csv"),
        ])
        assert rc == 1


class TestPanelIo:
    def test_round_trip_preserves_floats(self, tmp_path):
        panel = Panel(3, (np.array([0, 5]), np.array([7])),
                      (np.array([0.1 + 0.2, -1e-7]), np.array([3.0])))
        path = tmp_path / "p.csv"
        save_panel(str(path), panel)
        back = load_panel(str(path))
        assert back.p == 3
        assert np.array_equal(back.unit_masks[0], [0, 5])
        # repr round trip keeps every bit
        assert back.unit_outcomes[0][0] == 0.1 + 0.2
        assert back.unit_outcomes[1][0] == 3.0

    def test_gap_unit_ids_load_as_empty(self, tmp_path):
        path = tmp_path / "gap.csv"
        path.write_text("unit,combo,outcome\n0,1,2.0\n2,3,4.0\n")
        panel = load_panel(str(path))
        assert panel.n_units == 3
        assert panel.n_obs(1) == 0

    def test_bad_header(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("unit,mask,outcome\n0,1,2.0\n")
        with pytest.raises(ValueError, match=":1: expected header"):
            load_panel(str(path))

    @pytest.mark.parametrize("row,fragment", [
        ("0,1", "expected 3 fields"),
        ("zero,1,2.0", "bad unit id"),
        ("-1,1,2.0", "unit id must be >= 0"),
        ("0,x,2.0", "bad combo"),
        ("0,-2,2.0", "combo must be >= 0"),
        ("0,1,huh", "bad outcome"),
    ])
    def test_row_errors_carry_line_numbers(self, tmp_path, row, fragment):
        path = tmp_path / "bad.csv"
        path.write_text(f"unit,combo,outcome\n0,0,1.0\n{row}\n")
        with pytest.raises(ValueError, match=":3:"):
            load_panel(str(path))
        with pytest.raises(ValueError, match=fragment):
            load_panel(str(path))

    def test_combo_beyond_cube_with_explicit_p(self, tmp_path):
        path = tmp_path / "big.csv"
        path.write_text("unit,combo,outcome\n0,8,1.0\n")
        with pytest.raises(ValueError, match="exceeds 2\\^3 - 1"):
            load_panel(str(path), p=3)
        # without p the width is inferred instead
        assert load_panel(str(path)).p == 4

    def test_empty_body_is_a_data_error(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("unit,combo,outcome\n")
        with pytest.raises(ValueError, match="no data rows"):
            load_panel(str(path))


class TestFitPredict:
    def test_fit_writes_model_and_manifest(self, model_file, sim_files):
        doc = read_manifest(str(model_file) + ".manifest.json")
        panel, _ = sim_files
        assert doc["command"] == "fit"
        assert doc["config"]["horizontal"] == "select-ridge"
        assert doc["inputs"]["panel.csv"] == sha256(panel)
        assert doc["outputs"]["model.json"] == sha256(model_file)

    def test_predict_round_trip(self, workdir, model_file, capsys):
        queries = workdir / "q.csv"
        with open(queries, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["unit", "combo"])
            for unit in (0, 5, 9):
                for mask in (0, 17, 511):
                    writer.writerow([unit, mask])
        out = workdir / "preds.csv"
        assert run(["predict", "--model", str(model_file),
                    "--queries", str(queries), "--out", str(out)]) == 0
        assert "9 predictions" in capsys.readouterr().out
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["unit", "combo", "estimate", "std_err"]
        assert len(rows) == 10
        for row in rows[1:]:
            float(row[2])
            # select-ridge carries interval machinery for every unit
            assert float(row[3]) > 0.0

    def test_lasso_model_leaves_std_err_blank(self, workdir, sim_files):
        panel, _ = sim_files
        model = workdir / "model_lasso.json"
        assert run([
            "fit", "--input", str(panel), "--horizontal", "lasso",
            "--donor-ids", "0,1,2,3", "--kappa-method", "fixed",
            "--kappa-fixed", "2", "--vertical-threshold", "inf",
            "--out", str(model),
        ]) == 0
        queries = workdir / "q1.csv"
        queries.write_text("unit,combo\n0,3\n7,40\n")
        out = workdir / "preds_lasso.csv"
        assert run(["predict", "--model", str(model),
                    "--queries", str(queries), "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))[1:]
        assert all(row[3] == "" for row in rows)

    def test_refit_is_byte_identical(self, workdir, sim_files, model_file):
        panel, _ = sim_files
        again = workdir / "model_again.json"
        assert run([
            "fit", "--input", str(panel), "--horizontal", "select-ridge",
            "--donor-ids", "0,1,2,3", "--kappa-method", "fixed",
            "--kappa-fixed", "2", "--vertical-threshold", "inf",
            "--seed", "3", "--out", str(again),
        ]) == 0
        assert sha256(again) == sha256(model_file)

    def test_fit_on_rankings(self, workdir):
        p = 4
        support = [0, 1 << 0, 1 << 3]
        coefs = np.array([0.9, 1.4, -0.7])
        perms = all_permutations(p)
        masks = np.array(
            [permutation_to_combination(t).mask for t in perms], dtype=np.int64
        )
        outcomes = character_matrix(masks, support) @ coefs
        thin = tuple(perms[:4])
        panel = PermPanel(p, (tuple(perms), thin),
                          (outcomes, outcomes[:4]))
        path = workdir / "rankings.csv"
        save_rankings(str(path), panel)
        model = workdir / "perm_model.json"
        assert run([
            "fit", "--rankings", "--input", str(path),
            "--donor-ids", "0", "--lambda-rule", "path",
            "--lambda-fixed", "1e-9", "--min-obs", "2",
            "--kappa-method", "fixed", "--kappa-fixed", "1",
            "--vertical-threshold", "inf", "--out", str(model),
        ]) == 0
        doc = json.loads(model.read_text())
        assert doc["p"] == pair_count(p)

    def test_predict_unknown_unit_is_data_error(self, workdir, model_file, capsys):
        queries = workdir / "q_bad.csv"
        queries.write_text("unit,combo\n99,0\n")
        out = workdir / "never.csv"
        assert run(["predict", "--model", str(model_file),
                    "--queries", str(queries), "--out", str(out)]) == 2
        assert "outside the fitted panel" in capsys.readouterr().err


class TestExitCodes:
    def test_missing_input_file(self, workdir):
        rc = run(["fit", "--input", str(workdir / "nope.csv"),
                  "--out", str(workdir / "m.json")])
        assert rc == 2

    def test_combo_exceeding_declared_p(self, workdir):
        path = workdir / "wide.csv"
        path.write_text("unit,combo,outcome\n0,200,1.0\n")
        rc = run(["fit", "--input", str(path), "--p", "5",
                  "--out", str(workdir / "m2.json")])
        assert rc == 2

    def test_oversized_simulation_is_data_error(self, workdir):
        # the observational preset wants more draws than a p=6 cube holds
        rc = run([
            "simulate", "--preset", "observational", "--p", "6",
            "--out-panel", str(workdir / "o.csv"),
            "--out-truth", str(workdir / "o.json"),
        ])
        assert rc == 2

    def test_numerical_failure_maps_to_three(self, workdir, monkeypatch):
        def boom(path, p=None):
            raise NumericalError("synthetic blow-up")
        monkeypatch.setattr(cli_mod, "load_panel", boom)
        path = workdir / "any.csv"
        path.write_text("unit,combo,outcome\n0,0,1.0\n")
        rc = run(["fit", "--input", str(path), "--out", str(workdir / "m3.json")])
        assert rc == 3

    def test_linalg_error_maps_to_three(self, workdir, monkeypatch):
        def boom(path, p=None):
            raise np.linalg.LinAlgError("fake singular matrix")
        monkeypatch.setattr(cli_mod, "load_panel", boom)
        path = workdir / "any2.csv"
        path.write_text("unit,combo,outcome\n0,0,1.0\n")
        rc = run(["fit", "--input", str(path), "--out", str(workdir / "m4.json")])
        assert rc == 3


class TestDeterminism:
    def test_simulate_twice_same_bytes(self, tmp_path):
        dirs = (tmp_path / "a", tmp_path / "b")
        for d in dirs:
            d.mkdir()
            rc = run([
                "simulate", "--preset", "observational", "--p", "9",
                "--n-units", "8", "--r", "2", "--donor-count", "3",
                "--donor-obs", "120", "--nondonor-obs", "40", "--seed", "11",
                "--out-panel", str(d / "panel.csv"),
                "--out-truth", str(d / "truth.json"),
            ])
            assert rc == 0
        m0 = read_manifest(dirs[0] / "panel.csv.manifest.json")
        m1 = read_manifest(dirs[1] / "panel.csv.manifest.json")
        assert m0["outputs"] == m1["outputs"]
        assert sha256(dirs[0] / "panel.csv") == sha256(dirs[1] / "panel.csv")

    def test_different_seed_changes_output(self, tmp_path):
        hashes = []
        for seed in ("1", "2"):
            d = tmp_path / f"s{seed}"
            d.mkdir()
            rc = run([
                "simulate", "--preset", "observational", "--p", "9",
                "--n-units", "8", "--r", "2", "--donor-count", "3",
                "--donor-obs", "120", "--nondonor-obs", "40", "--seed", seed,
                "--out-panel", str(d / "panel.csv"),
                "--out-truth", str(d / "truth.json"),
            ])
            assert rc == 0
            hashes.append(sha256(d / "panel.csv"))
        assert hashes[0] != hashes[1]

    def test_explicit_manifest_path(self, tmp_path):
        man = tmp_path / "custom_manifest.json"
        rc = run([
            "design", "--n-units", "12", "--p", "9", "--r", "2", "--s", "54",
            "--preset", "sims", "--out", str(tmp_path / "plan.json"),
            "--manifest", str(man),
        ])
        assert rc == 0
        doc = read_manifest(man)
        assert doc["command"] == "design"
        assert doc["outputs"]["plan.json"] == sha256(tmp_path / "plan.json")

    def test_evaluate_thread_count_does_not_change_bytes(self, tmp_path):
        outs = []
        for label, threads in (("t1", "1"), ("t2", "2")):
            out = tmp_path / f"mse_{label}.csv"
            rc = run([
                "evaluate", "--preset", "observational", "--p", "6",
                "--n-units", "10", "--r", "2", "--donor-count", "4",
                "--donor-obs", "48", "--nondonor-obs", "16",
                "--methods", "synthcombo,lasso,softimpute",
                "--kappa-method", "fixed", "--kappa-fixed", "2",
                "--seeds", "2", "--threads", threads, "--out", str(out),
            ])
            assert rc == 0
            outs.append(sha256(out))
        assert outs[0] == outs[1]


class TestEvaluate:
    def test_table_layout_and_summary(self, tmp_path, capsys):
        out = tmp_path / "mse.csv"
        rc = run([
            "evaluate", "--preset", "observational", "--p", "6",
            "--n-units", "10", "--r", "2", "--donor-count", "4",
            "--donor-obs", "48", "--nondonor-obs", "16",
            "--methods", "synthcombo,lasso",
            "--kappa-method", "fixed", "--kappa-fixed", "2",
            "--seeds", "2", "--threads", "1", "--out", str(out),
        ])
        assert rc == 0
        assert "median=" in capsys.readouterr().out
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "seed", "mse"]
        assert len(rows) == 5
        methods = {row[0] for row in rows[1:]}
        assert methods == {"synthcombo", "lasso"}
        assert all(float(row[2]) >= 0.0 for row in rows[1:])


class TestCheck:
    def test_design_simulate_check_flow(self, tmp_path, capsys):
        plan = tmp_path / "plan.json"
        panel = tmp_path / "panel.csv"
        truth = tmp_path / "truth.json"
        rc = run([
            "simulate", "--preset", "design", "--p", "9", "--n-units", "12",
            "--r", "2", "--seed", "5", "--out-panel", str(panel),
            "--out-truth", str(truth), "--out-plan", str(plan),
        ])
        assert rc == 0
        report = tmp_path / "report.json"
        rc = run([
            "check", "--plan", str(plan), "--truth", str(truth),
            "--incoherence-mode", "exact", "--out", str(report),
        ])
        assert rc == 0
        assert "all_pass=" in capsys.readouterr().out
        doc = json.loads(report.read_text())
        for section in ("horizontal_span", "incoherence", "spectrum", "subspace"):
            assert section in doc
        assert isinstance(doc["all_pass"], bool)
        assert doc["horizontal_span"]["passed"] is True
        assert doc["subspace"]["passed"] is True
