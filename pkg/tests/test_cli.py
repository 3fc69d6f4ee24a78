import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fgcca.cli import EXIT_INVALID, EXIT_OK, main
from fgcca.data import write_csv, write_sidecar
from fgcca.simulation import SimSpec, generate


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    ds, _ = generate(SimSpec(J=2, N=40, grid_size=51, sparsity="dense", sigma2=0.1, seed=1))
    write_csv(ds, d / "data.csv")
    write_sidecar(ds, d / "schema.json")
    (d / "fit.json").write_text(json.dumps({"solver": {"n_components": 2}, "model": {"mean_bandwidth": 0.1}}))
    out = d / "fit"
    assert main(["fit", str(d / "data.csv"), "--schema", str(d / "schema.json"),
                 "--config", str(d / "fit.json"), "--out", str(out)]) == EXIT_OK
    return d, out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_fit_outputs(toy):
    _, out = toy
    fit = json.loads((out / "fit.json").read_text())
    assert len(fit["functions"]) == 2 and all(len(o) == 2 for o in fit["functions"])
    trace = _rows(out / "trace.csv")
    for m in ("1", "2"):
        vals = [float(r["criterion"]) for r in trace if r["order"] == m]
        assert np.all(np.diff(vals) >= -1e-12)
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["command"] == "fit"
    assert {"schema_version", "config", "inputs", "outputs", "seed", "threads", "versions", "timings"} <= set(man)
    assert "components.csv" in man["outputs"]
    assert (out / "run.log").exists()


def test_invalid_tau(tmp_path, toy, capsys):
    d, _ = toy
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[solver]\ntau = 0.0\n")
    code = main(["fit", str(d / "data.csv"), "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_INVALID
    assert "τ must lie in (0,1]" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == "failed"


def test_unknown_config_key(tmp_path, toy):
    d, _ = toy
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"solver": {"tua": 0.5}}))
    assert main(["fit", str(d / "data.csv"), "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_invalid_sparsity(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"config_version": 1, "sparsity": "x"}))
    assert main(["simulate", str(spec), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "invalid sparsity" in capsys.readouterr().err


def test_simulate_writes_report(tmp_path):
    spec = tmp_path / "s.toml"
    spec.write_text('config_version = 1\nsim = "sim1"\nN = 20\nsparsity = "medium"\n')
    assert main(["simulate", str(spec), "--replicates", "1", "--out", str(tmp_path / "o"), "--seed", "3"]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert any(n.startswith("sim1_seed3_") and n.endswith(".csv") for n in names)


def test_predict_dense_matches_reconstruction(toy, tmp_path):
    d, out = toy
    rec_dir = tmp_path / "rec"
    assert main(["reconstruct", str(out), str(d / "data.csv"), "--out", str(rec_dir)]) == EXIT_OK
    rec = _rows(rec_dir / "reconstructions.csv")
    subj = rec[0]["subject_id"]
    mine = [r for r in rec if r["subject_id"] == subj][::10]
    targets = tmp_path / "targets.csv"
    with open(targets, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("subject_id", "process_id", "time"))
        for r in mine:
            w.writerow((subj, r["process_id"], r["time"]))
    assert main(["predict", str(out), str(d / "data.csv"), str(targets), "--out", str(tmp_path / "p")]) == EXIT_OK
    pred = _rows(tmp_path / "p" / "predictions.csv")
    assert len(pred) == len(mine)
    for p, r in zip(pred, mine):
        assert float(p["prediction"]) == pytest.approx(float(r["value"]), abs=1e-8)


def test_predict_without_partial_data_gives_mean(toy, tmp_path):
    d, out = toy
    partial = tmp_path / "partial.csv"
    partial.write_text("subject_id,process_id,time,value\n")
    targets = tmp_path / "targets.csv"
    targets.write_text("subject_id,process_id,time,value\n1,1,0.5,0.3\n1,2,0.25,\n")
    assert main(["predict", str(out), str(partial), str(targets), "--out", str(tmp_path / "p")]) == EXIT_OK
    model = json.loads((out / "model.json").read_text())
    pred = _rows(tmp_path / "p" / "predictions.csv")
    grid = np.linspace(0, 1, len(model["means"][0]))
    assert float(pred[0]["prediction"]) == pytest.approx(np.interp(0.5, grid, model["means"][0]), abs=1e-12)
    assert float(pred[0]["squared_error"]) >= 0 and pred[1]["observed"] == ""
    assert "no partial data" in (tmp_path / "p" / "run.log").read_text()


def test_summarize(toy, tmp_path, capsys):
    d, _ = toy
    assert main(["summarize", str(d / "data.csv"), "--out", str(tmp_path / "s")]) == EXIT_OK
    assert "process 1" in capsys.readouterr().out
    rows = _rows(tmp_path / "s" / "summary.csv")
    assert [r["n_subjects"] for r in rows] == ["40", "40"]


def test_missing_input(tmp_path):
    assert main(["summarize", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "s")]) == EXIT_INVALID


def test_pure_python_backend_runs(toy, tmp_path):
    d, _ = toy
    env = {**os.environ, "FGCCA_PURE_PYTHON": "1"}
    code = ("import fgcca.smoothing as s, sys; "
            "from fgcca.cli import main; "
            "assert s.BACKEND == 'python', s.BACKEND; "
            f"sys.exit(main(['summarize', {str(d / 'data.csv')!r}, '--out', {str(tmp_path / 'o')!r}]))")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
