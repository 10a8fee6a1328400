import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from coalstat.cli import main


def run(tmp_path, *argv):
    """Invoke the CLI in process; returns (exit code, path of --out if used)."""
    return main(list(argv))


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_sfs(path, pairs, header=("i", "count")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(pairs)


def test_no_command_prints_help(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("coalstat ")


def test_console_script_is_installed():
    out = subprocess.run(
        [sys.executable, "-m", "coalstat.cli", "--version"], capture_output=True, text=True
    )
    assert out.returncode == 0
    assert out.stdout.startswith("coalstat ")


def test_expected_sfs_roundtrip(tmp_path):
    out = tmp_path / "sfs.csv"
    rc = main(["expected-sfs", "--model", "kingman", "--n", "6", "--theta", "2", "--out", str(out)])
    assert rc == 0
    header, rows = read_csv(out)
    assert header == ["i", "expected_count"]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4, 5]
    assert [float(r[1]) for r in rows] == pytest.approx([2 / i for i in range(1, 6)], rel=1e-12)


def test_expected_sfs_folded(tmp_path):
    out = tmp_path / "folded.csv"
    rc = main(
        ["expected-sfs", "--model", "kingman", "--n", "5", "--theta", "2", "--folded", "--out", str(out)]
    )
    assert rc == 0
    header, rows = read_csv(out)
    assert header == ["i", "expected_folded_count"]
    assert [float(r[1]) for r in rows] == pytest.approx([2.0 + 0.5, 1.0 + 2.0 / 3.0], rel=1e-12)


def test_expected_sfs_flag_errors(tmp_path, capsys):
    assert main(["expected-sfs", "--model", "kingman", "--n", "6"]) == 2
    assert "missing required flag" in capsys.readouterr().err
    assert main(["expected-sfs", "--model", "beta:2.5", "--n", "6", "--theta", "1"]) == 3
    assert "--model" in capsys.readouterr().err


def test_tables_plain_model(tmp_path):
    out = tmp_path / "tables.json"
    assert main(["tables", "--model", "kingman", "--n", "5", "--out", str(out)]) == 0
    data = read_json(out)
    assert data["model"] == "kingman" and data["n"] == 5 and data["theta"] == 1.0
    assert data["level_times"] is None
    assert data["green"][5][2] == pytest.approx(1.0)  # pair level occupation from n=5
    assert sum(data["phi"]) == pytest.approx(1.0)
    assert data["reachable"][2] is True
    assert len(data["expected_sfs"]) == 4


def test_tables_growth_model(tmp_path):
    out = tmp_path / "growth.json"
    assert main(["tables", "--model", "growth:5", "--n", "6", "--theta", "2", "--out", str(out)]) == 0
    data = read_json(out)
    assert data["green"] is None
    assert data["level_times"]["beta"] == 5.0
    assert len(data["level_times"]["mean"]) == 5
    assert sum(data["phi"]) == pytest.approx(1.0)


def test_simulate_per_replicate_rows(tmp_path):
    out = tmp_path / "reps.csv"
    rc = main(
        ["simulate", "--model", "bs", "--n", "4", "--fixed-s", "5", "--reps", "3",
         "--seed", "9", "--out", str(out)]
    )
    assert rc == 0
    header, rows = read_csv(out)
    assert header == ["rep", "i", "count"]
    assert len(rows) == 3 * 3
    by_rep = {}
    for rep, i, count in rows:
        by_rep.setdefault(int(rep), 0)
        by_rep[int(rep)] += int(count)
    assert by_rep == {0: 5, 1: 5, 2: 5}


def test_simulate_summary_star_is_deterministic(tmp_path):
    out = tmp_path / "summary.csv"
    rc = main(
        ["simulate", "--model", "star", "--n", "5", "--fixed-s", "8", "--reps", "50",
         "--summary", "--seed", "1", "--out", str(out)]
    )
    assert rc == 0
    header, rows = read_csv(out)
    assert header == ["i", "mean", "se"]
    means = [float(r[1]) for r in rows]
    ses = [float(r[2]) for r in rows]
    assert means == [8.0, 0.0, 0.0, 0.0]
    assert ses == [0.0, 0.0, 0.0, 0.0]


def test_simulate_mode_flags_conflict(tmp_path, capsys):
    base = ["simulate", "--model", "kingman", "--n", "4", "--reps", "2"]
    assert main(base + ["--theta", "1", "--fixed-s", "3"]) == 2
    assert "exactly one" in capsys.readouterr().err
    assert main(base) == 2


def test_simulate_echoes_fresh_seed(tmp_path, capsys):
    out1 = tmp_path / "a.csv"
    rc = main(["simulate", "--model", "kingman", "--n", "4", "--theta", "1", "--reps", "4",
               "--out", str(out1)])
    assert rc == 0
    err = capsys.readouterr().err
    assert err.startswith("seed: ")
    seed = int(err.split()[1])
    out2 = tmp_path / "b.csv"
    rc = main(["simulate", "--model", "kingman", "--n", "4", "--theta", "1", "--reps", "4",
               "--seed", str(seed), "--out", str(out2)])
    assert rc == 0
    assert out1.read_text() == out2.read_text()


def test_watterson_outputs(tmp_path):
    out = tmp_path / "w.json"
    assert main(["watterson", "--model", "kingman", "--n", "2", "--s", "5", "--out", str(out)]) == 0
    assert read_json(out)["theta_hat"] == pytest.approx(5.0)

    assert main(["watterson", "--model", "star", "--n", "10", "--s", "5", "--out", str(out)]) == 0
    assert read_json(out)["theta_hat"] == pytest.approx(1.0)

    assert main(
        ["watterson", "--model", "kingman", "--n", "2", "--s", "5",
         "--mu-year", "1.0", "--mu-gen", "1.0", "--out", str(out)]
    ) == 0
    data = read_json(out)
    assert data["years_per_unit"] == pytest.approx(2.5)
    assert data["pair_coalescence_probability"] == pytest.approx(0.4)

    assert main(["watterson", "--model", "kingman", "--n", "2", "--s", "-1", "--out", str(out)]) == 3


def test_lr_test_roundtrip(tmp_path):
    obs = tmp_path / "obs.csv"
    write_sfs(obs, [(1, 4), (2, 2), (3, 1), (4, 0)])
    out = tmp_path / "lr.json"
    rc = main(
        ["lr-test", "--null", "kingman", "--alt", "bs", "--sfs", str(obs), "--s", "7",
         "--level", "0.1", "--reps", "300", "--seed", "3", "--out", str(out)]
    )
    assert rc == 0
    data = read_json(out)
    assert set(data) == {
        "rho", "rho_star", "reject", "argmax_null", "argmax_alt",
        "level", "kind", "n", "s", "seed", "per_model_quantiles",
    }
    assert data["n"] == 5 and data["s"] == 7 and data["seed"] == 3
    assert data["argmax_null"] == "kingman" and data["argmax_alt"] == "bs"
    assert isinstance(data["reject"], bool)
    assert len(data["per_model_quantiles"]) == 1
    assert math.isfinite(data["rho"])


def test_lr_test_rejects_folded_input(tmp_path, capsys):
    obs = tmp_path / "folded.csv"
    write_sfs(obs, [(1, 5), (2, 2)], header=("i", "folded_count"))
    rc = main(
        ["lr-test", "--null", "kingman", "--alt", "star", "--sfs", str(obs), "--folded",
         "--n", "5", "--s", "7", "--level", "0.1", "--reps", "300", "--seed", "3"]
    )
    assert rc == 3
    assert "unfolded" in capsys.readouterr().err


def test_lr_test_input_errors(tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    write_sfs(obs, [(1, 4), (2, 2), (3, 1)])
    base = ["lr-test", "--null", "kingman", "--alt", "star", "--sfs", str(obs),
            "--level", "0.1", "--reps", "300", "--seed", "3"]
    assert main(base + ["--s", "6"]) == 3  # file sums to 7
    assert "calibration was built" in capsys.readouterr().err
    assert main(
        ["lr-test", "--null", "kingman", "--alt", "star", "--sfs", str(tmp_path / "nope.csv"),
         "--s", "7", "--level", "0.1", "--reps", "300"]
    ) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("class,hits\n1,2\n")
    assert main(
        ["lr-test", "--null", "kingman", "--alt", "star", "--sfs", str(bad),
         "--s", "7", "--level", "0.1", "--reps", "300"]
    ) == 3


def test_power_curve(tmp_path):
    out = tmp_path / "power.csv"
    rc = main(
        ["power", "--null", "kingman", "--alt", "star", "--truth", "kingman+star",
         "--n", "6", "--s", "8", "--level", "0.2", "--reps", "400", "--power-reps", "200",
         "--seed", "5", "--out", str(out)]
    )
    assert rc == 0
    header, rows = read_csv(out)
    assert header == ["truth_param", "power", "se"]
    assert [r[0] for r in rows] == ["kingman", "star"]
    p_null, p_star = float(rows[0][1]), float(rows[1][1])
    assert 0.0 <= p_null <= 0.35  # size-ish under the null truth
    assert p_star == 1.0  # star data are all-singleton, always rejected
    assert float(rows[1][2]) == 0.0


def test_power_truth_param_column_uses_parameters(tmp_path):
    out = tmp_path / "power2.csv"
    rc = main(
        ["power", "--null", "kingman", "--alt", "beta:1.5", "--truth", "beta:1.2+growth:3",
         "--n", "5", "--s", "5", "--level", "0.2", "--reps", "100", "--power-reps", "50",
         "--seed", "6", "--out", str(out)]
    )
    assert rc == 0
    _, rows = read_csv(out)
    assert [r[0] for r in rows] == ["1.2", "3.0"]


def test_arg_simulate_unlinked(tmp_path):
    out = tmp_path / "arg.csv"
    rc = main(
        ["arg-simulate", "--family", "pointmass:0.5", "--n", "4", "--L", "2",
         "--theta", "2", "--reps", "2", "--seed", "11", "--out", str(out)]
    )
    assert rc == 0
    header, rows = read_csv(out)
    assert header == ["rep", "locus", "i", "count"]
    assert len(rows) == 2 * 2 * 3
    assert {r[0] for r in rows} == {"0", "1"}
    assert all(int(r[3]) >= 0 for r in rows)


def test_arg_simulate_linked_and_flag_conflicts(tmp_path, capsys):
    out = tmp_path / "linked.csv"
    base = ["arg-simulate", "--family", "beta:1.5", "--n", "4", "--L", "2",
            "--theta", "1", "--reps", "1", "--seed", "12", "--out", str(out)]
    assert main(base + ["--recomb", "0.5"]) == 0
    assert main(base + ["--recomb", "0.5", "--unlinked"]) == 2
    assert "mutually exclusive" in capsys.readouterr().err
    assert main(base + ["--recomb", "0.5,oops"]) == 3


def test_multilocus_lr_pipeline(tmp_path):
    obs = tmp_path / "obs.csv"
    rc = main(
        ["arg-simulate", "--family", "xipointmass:0.5", "--n", "6", "--L", "2",
         "--theta", "3", "--reps", "1", "--seed", "21", "--out", str(obs)]
    )
    assert rc == 0
    out = tmp_path / "ml.json"
    rc = main(
        ["multilocus-lr", "--null", "kingman", "--alt", "xipointmass:0.5", "--obs", str(obs),
         "--k", "2", "--M", "16", "--seed", "22", "--out", str(out)]
    )
    assert rc == 0
    data = read_json(out)
    assert data["argmax_null"] == "xi:kingman"  # plain grids are read four-fold
    assert data["argmax_alt"] == "xipointmass:0.5"
    assert data["n"] == 6 and data["L"] == 2 and data["M"] == 16
    assert data["observed"]["cutoff"] == 2
    assert 0 < data["observed"]["loci_used"] <= 2
    assert data["points_used"]["null"] == [16] or data["points_used"]["null"][0] < 16
    assert math.isfinite(data["statistic"])


def test_multilocus_lr_same_grids_score_zero(tmp_path):
    obs = tmp_path / "obs.csv"
    with open(obs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["locus", "i", "count"])
        w.writerows([(0, 1, 3), (0, 2, 1), (1, 1, 2), (1, 4, 1)])
    out = tmp_path / "same.json"
    rc = main(
        ["multilocus-lr", "--null", "xi:kingman", "--alt", "xi:kingman", "--obs", str(obs),
         "--k", "3", "--M", "12", "--seed", "23", "--s-targets", "5,10", "--out", str(out)]
    )
    assert rc == 0
    data = read_json(out)
    assert data["statistic"] == 0.0
    assert data["log_density_null"] == data["log_density_alt"]


def test_multilocus_lr_rejects_multi_replicate_files(tmp_path, capsys):
    obs = tmp_path / "multi.csv"
    with open(obs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "locus", "i", "count"])
        w.writerows([(0, 0, 1, 3), (1, 0, 1, 2)])
    rc = main(
        ["multilocus-lr", "--null", "xi:kingman", "--alt", "xi:kingman", "--obs", str(obs),
         "--k", "2", "--M", "8", "--seed", "1"]
    )
    assert rc == 3
    assert "several replicates" in capsys.readouterr().err


def test_multilocus_lr_degenerate_observation(tmp_path):
    obs = tmp_path / "zeros.csv"
    with open(obs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["locus", "i", "count"])
        w.writerows([(0, 1, 0), (0, 2, 0), (0, 3, 0)])
    rc = main(
        ["multilocus-lr", "--null", "xi:kingman", "--alt", "xi:kingman", "--obs", str(obs),
         "--k", "2", "--M", "8", "--seed", "1"]
    )
    assert rc == 4


def test_kde_fit_and_grid_export(tmp_path):
    data = tmp_path / "points.csv"
    with open(data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zeta1", "zetabar_k"])
        w.writerows([(0.5, 0.2), (0.6, 0.1), (0.4, 0.3), (0.55, 0.15), (0.45, 0.25)])
    out = tmp_path / "kde.json"
    grid = tmp_path / "grid.csv"
    rc = main(["kde", "--in", str(data), "--out", str(out),
               "--grid-out", str(grid), "--grid-steps", "5"])
    assert rc == 0
    model = read_json(out)
    assert set(model) == {"points", "bandwidth", "kernel", "fallback"}
    assert len(model["points"]) == 5
    header, rows = read_csv(grid)
    assert header == ["zeta1", "zetabar_k", "density"]
    assert len(rows) == 25
    assert all(float(r[2]) >= 0.0 for r in rows)

    rc = main(["kde", "--in", str(data), "--bandwidth", "0.2", "--out", str(out)])
    assert rc == 0
    assert np.allclose(read_json(out)["bandwidth"], (0.04 * np.eye(2)).tolist())

    assert main(["kde", "--in", str(data), "--grid-out", str(grid), "--grid-steps", "1",
                 "--out", str(out)]) == 3
    assert main(["kde", "--in", str(tmp_path / "missing.csv")]) == 3


def test_config_fills_missing_flags(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "kingman", "n": 6, "theta": 1.0}))
    out = tmp_path / "out.csv"
    rc = main(["expected-sfs", "--config", str(cfg), "--theta", "2", "--out", str(out)])
    assert rc == 0
    _, rows = read_csv(out)
    # the command-line theta wins over the config's
    assert [float(r[1]) for r in rows] == pytest.approx([2 / i for i in range(1, 6)], rel=1e-12)


def test_config_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "kingman", "bogus": 1}))
    rc = main(["expected-sfs", "--config", str(cfg), "--n", "4", "--theta", "1"])
    assert rc == 3
    assert "unknown setting" in capsys.readouterr().err
