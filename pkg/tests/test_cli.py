import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from spheroidsim.cli import main
from spheroidsim.core import CALIBRATED, prior_bounds
from spheroidsim.surrogate import TrainingSet, fit, latin_hypercube

FAST = "simulation:\n  duration: {d}\n  mechanics_dt: 6.0\n"


def cfg(tmp_path, days=2, extra=""):
    p = tmp_path / f"cfg{days}.yaml"
    p.write_text(FAST.format(d=days * 1440.0) + extra)
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_manifest(out):
    man = json.loads((out / "manifest.json").read_text())
    import hashlib
    for name, digest in man["artifacts"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    return man


def test_simulate_zero_duration(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--config", cfg(tmp_path, 0), "--group", "large", "--out", str(out)]) == 0
    r = rows(out / "aggregates.csv")
    assert len(r) == 1 and r[0]["day"] == "0"
    man = check_manifest(out)
    assert man["command"] == "simulate" and "aggregates.csv" in man["artifacts"]


def test_simulate_large_group_grows(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--config", cfg(tmp_path, 7), "--group", "large", "--seed", "1",
                 "--out", str(out)]) == 0
    area = {int(r["day"]): float(r["mean_area_um2"]) for r in rows(out / "aggregates.csv")}
    assert area[7] > area[1]


def test_simulate_is_idempotent_and_regenerates(tmp_path):
    args = ["simulate", "--config", cfg(tmp_path), "--group", "large", "--seed", "4", "--replicates", "2"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    man = check_manifest(a)
    for name in man["artifacts"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    (a / "cells_rep1.csv").unlink()
    assert main(args + ["--out", str(a)]) == 0
    assert (a / "cells_rep1.csv").read_bytes() == (b / "cells_rep1.csv").read_bytes()


def test_input_errors(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["simulate", "--params", str(tmp_path / "nope.yaml"), "--out", out]) == 2
    assert "nope.yaml" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("simulation:\n  duration: 10\n   seed: [\n")
    assert main(["simulate", "--config", str(bad), "--out", out]) == 2
    assert "line" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == 2


def test_population_cap_exit_code(tmp_path):
    c = cfg(tmp_path, 4, "  population_cap: 1\n  initial_atp: 1200\n")
    assert main(["simulate", "--config", c, "--group", "large", "--out", str(tmp_path / "o")]) == 4


def test_params_file(tmp_path):
    p = tmp_path / "p.yaml"
    p.write_text("parameters:\n  k_ene: 0.1\n")
    out = tmp_path / "o"
    assert main(["simulate", "--config", cfg(tmp_path), "--params", str(p), "--out", str(out)]) == 0
    assert rows(out / "aggregates.csv")[-1]["n_cells"] == "0"


def test_sweep_rows_and_determinism(tmp_path):
    c = cfg(tmp_path, 1)
    base = ["sweep", "--config", c, "--n", "2", "--days", "1", "--seed", "3",
            "--names", *CALIBRATED]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a = (tmp_path / "a" / "training.csv").read_bytes()
    assert a == (tmp_path / "b" / "training.csv").read_bytes()
    r = rows(tmp_path / "a" / "training.csv")
    assert len(r) == 2 and list(r[0])[:4] == list(CALIBRATED)
    assert main(["sweep", "--config", c, "--n", "2", "--names", "k_xyz",
                 "--out", str(tmp_path / "c")]) == 2


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SPHEROIDSIM_THREADS", "0")
    assert main(["sweep", "--config", cfg(tmp_path, 1), "--n", "2",
                 "--out", str(tmp_path / "o")]) == 2


def test_gp_train_and_sobol(tmp_path):
    sw = tmp_path / "sw"
    assert main(["sweep", "--config", cfg(tmp_path, 1), "--n", "12", "--names", *CALIBRATED,
                 "--out", str(sw)]) == 0
    gp = tmp_path / "gp"
    assert main(["gp-train", "--training", str(sw / "training.csv"), "--restarts", "1",
                 "--out", str(gp)]) == 0
    assert (gp / "gp_day1.json").exists() and not (gp / "gp_day0.json").exists()
    sob = tmp_path / "sob"
    assert main(["sobol", "--gp", str(gp / "gp_day1.json"), "--n", "1024", "--out", str(sob)]) == 0
    assert [r["parameter"] for r in rows(sob / "sobol.csv")] == list(CALIBRATED)
    assert main(["sobol", "--gp", str(gp / "gp_day1.json"), "--n", "1000", "--out", str(sob)]) == 2


def _toy_models(tmp_path):
    b = prior_bounds()
    x = latin_hypercube(60, b, seed=0)
    u = (x - b[:, 0]) / (b[:, 1] - b[:, 0])
    paths = []
    for day, scale in ((3, 1.0), (7, 2.0)):
        y = scale * (1000 + 3000 * u[:, 1] + 2000 * u[:, 2] + 200 * u[:, 0])
        m = fit(TrainingSet(x, y, b, CALIBRATED), restarts=1)
        m.save(tmp_path / f"gp_day{day}.json")
        paths.append(str(tmp_path / f"gp_day{day}.json"))
    return paths


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_calibrate(tmp_path):
    gps = _toy_models(tmp_path)
    obs = tmp_path / "obs.csv"
    rng = np.random.default_rng(0)
    lines = ["group,day,area_um2"]
    for g, base in (("small", 1500), ("medium", 2500), ("large", 4000)):
        for day, scale in ((3, 1.0), (7, 2.0)):
            lines += [f"{g},{day},{float(v)!r}" for v in scale * base + rng.normal(0, 50, 5)]
    obs.write_text("\n".join(lines) + "\n")
    out = tmp_path / "cal"
    code = main(["calibrate", "--obs", str(obs), "--gp", *gps, "--draws", "600", "--burn-in", "600",
                 "--out", str(out), "--rhat-max", "1.2"])
    assert code == 0
    for g in ("small", "medium", "large"):
        assert (out / f"posterior_{g}.csv").exists()
        rep = json.loads((out / f"map_{g}.json").read_text())
        assert set(rep["joint_map"]) == set(CALIBRATED) and rep["converged"]
    check_manifest(out)
    strict = tmp_path / "strict"
    code = main(["calibrate", "--obs", str(obs), "--gp", *gps, "--draws", "20", "--burn-in", "100",
                 "--out", str(strict), "--rhat-max", "1.0"])
    assert code == 3
    assert not json.loads((strict / "map_large.json").read_text())["converged"]


def test_calibrate_schema_errors(tmp_path):
    gps = _toy_models(tmp_path)
    empty = tmp_path / "empty.csv"
    empty.write_text("group,day,area_um2\n")
    assert main(["calibrate", "--obs", str(empty), "--gp", *gps, "--out", str(tmp_path / "o")]) == 2
    nod = tmp_path / "nod.csv"
    nod.write_text("group,day,area_um2\na,5,1\na,5,2\n")
    assert main(["calibrate", "--obs", str(nod), "--gp", *gps, "--out", str(tmp_path / "o")]) == 2


def test_measure(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--config", cfg(tmp_path, 3), "--group", "large", "--seed", "2", "--out", str(sim)])
    out = tmp_path / "m"
    assert main(["measure", "--cells", str(sim / "cells.csv"), "--out", str(out)]) == 0
    a = [float(r["mean_area_um2"]) for r in rows(sim / "aggregates.csv")]
    b = [float(r["mean_area_um2"]) for r in rows(out / "morphology.csv")]
    assert a == b


def test_compare(tmp_path, capsys):
    sim = tmp_path / "sim"
    main(["simulate", "--config", cfg(tmp_path, 3), "--group", "large", "--replicates", "5",
          "--out", str(sim)])
    agg = str(sim / "aggregates.csv")
    out = tmp_path / "cmp"
    assert main(["compare", agg, agg, "--labels", "x", "y", "--day", "3", "--out", str(out)]) == 0
    omni = {r["metric"]: float(r["omnibus_p"]) for r in rows(out / "comparison.csv")}
    assert omni and all(p == pytest.approx(1.0) for p in omni.values())
    assert main(["compare", agg, "--out", str(out)]) == 2
    other = tmp_path / "other.csv"
    other.write_text("replicate,day,n_cells\n0,3,5\n1,3,6\n")
    assert main(["compare", agg, str(other), "--day", "3", "--out", str(out)]) == 2
    assert "columns" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "spheroidsim", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
