import csv
import hashlib
import json
import subprocess
from pathlib import Path

import pytest

from sparseulm.cli import METRICS_COLUMNS, main

ROOT = Path(__file__).resolve().parents[1]
SMALL = ["--sim.grid", "12", "--sim.frames", "32", "--dataset.n_movies", "10", "--dataset.test_concentrations", "[1,4]"]


def _tree_digest(path: Path, skip=("run.json",)) -> dict:
    return {
        str(p.relative_to(path)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(path.rglob("*"))
        if p.is_file() and p.name not in skip
    }


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["simulate", "--out", str(out)] + SMALL) == 0
    return out


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_scaling_typical_values(tmp_path):
    assert main(["scaling", "--out", str(tmp_path), "--scaling.alpha", "3", "--scaling.rho", "0.5", "--scaling.r", "8"]) == 0
    rep = json.loads((tmp_path / "scaling.json").read_text())
    assert rep["delta"] == 0.03125


def test_run_manifest_lists_existing_files(dataset):
    run = json.loads((dataset / "run.json").read_text())
    assert run["command"] == "simulate" and run["status"] == "ok"
    assert run["artifacts"]
    assert all((dataset / a).exists() for a in run["artifacts"])
    assert run["config"]["sim"]["grid"] == 12
    assert "wall_clock" in run


def test_simulate_twice_byte_identical(dataset, tmp_path):
    again = tmp_path / "ds"
    assert main(["simulate", "--out", str(again), "--workers", "2"] + SMALL) == 0
    assert _tree_digest(dataset) == _tree_digest(again)


def test_eval_identical_dirs_gives_one(dataset, tmp_path):
    assert main(["eval", "--out", str(tmp_path), "--pred", str(dataset), "--gt", str(dataset)]) == 0
    rows = _rows(tmp_path / "metrics.csv")
    assert rows[0] == METRICS_COLUMNS
    assert len(rows) == 3
    for r in rows[1:]:
        assert float(r[3]) == 1.0 and float(r[4]) == 1.0


def test_baseline_outputs_and_inputs_untouched(dataset, tmp_path):
    before = _tree_digest(dataset, skip=())
    out = tmp_path / "bl"
    assert main(["baseline", "--out", str(out), "--dataset", str(dataset)]) == 0
    assert _tree_digest(dataset, skip=()) == before
    rows = _rows(out / "tracks.csv")
    assert rows[0] == ["movie_id", "track_id", "frame", "x", "y"]
    fine = 12 * 8
    assert all(0 <= float(v) < fine for r in rows[1:] for v in r[3:])
    ev = tmp_path / "ev"
    assert main(["eval", "--out", str(ev), "--pred", str(out), "--gt", str(dataset), "--mode", "trajectory"]) == 0
    rows = _rows(ev / "metrics.csv")
    assert {r[2] for r in rows[1:]} == {"baseline"}
    assert all(0 <= float(r[4]) <= 1 for r in rows[1:])


def test_sparsify_report_and_tensors(dataset, tmp_path):
    assert main(["sparsify", "--out", str(tmp_path), "--dataset", str(dataset), "--sparsify.sweep", "[0.05,0.25]"]) == 0
    rows = _rows(tmp_path / "sparsity.csv")
    assert [float(r[1]) for r in rows[1:]] == [0.05, 0.25]
    assert float(rows[1][2]) > float(rows[2][2])
    assert len(list((tmp_path / "tensors").rglob("*.spt"))) == 11


def test_eval_trajectory_needs_tracks(dataset, tmp_path):
    ckpt = tmp_path / "tr"
    assert main(["train", "--out", str(ckpt), "--dataset", str(dataset), "--train.epochs", "1", "--train.max_movies", "1"]) == 0
    inf = tmp_path / "inf"
    assert main(["infer", "--out", str(inf), "--checkpoint", str(ckpt / "model.snn"), "--dataset", str(dataset)]) == 0
    assert main(["eval", "--out", str(tmp_path / "e1"), "--pred", str(inf), "--gt", str(dataset)]) == 0
    assert main(["eval", "--out", str(tmp_path / "e2"), "--pred", str(inf), "--gt", str(dataset), "--mode", "trajectory"]) == 2
    assert main(["bench", "--out", str(tmp_path / "b"), "--checkpoint", str(ckpt / "model.snn"), "--dataset", str(dataset), "--reps", "2"]) == 0
    rows = _rows(tmp_path / "b" / "timing.csv")
    assert len(rows) == 3 and float(rows[1][4]) > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(dataset, tmp_path):
    code = main(
        ["train", "--out", str(tmp_path), "--dataset", str(dataset), "--train.epochs", "3", "--train.max_movies", "1", "--train.lr", "1e38", "--train.cascaded", "false"]
    )
    assert code == 3
    assert json.loads((tmp_path / "run.json").read_text())["status"] == "diverged"


def test_config_errors_exit_2(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "sim": {"grid": 8,}\n}\n')
    assert main(["simulate", "--out", str(tmp_path / "a"), "--config", str(bad)]) == 2
    assert "bad.json:2:" in capsys.readouterr().err
    assert main(["simulate", "--out", str(tmp_path / "b"), "--sim.gridd", "8"]) == 2
    assert "sim.gridd" in capsys.readouterr().err
    assert main(["simulate", "--out", str(tmp_path / "c"), "--sim.dims", "5"]) == 2
    assert main(["train", "--out", str(tmp_path / "d"), "--dataset", str(dataset), "--net.preset", "nope"]) == 2
    assert main(["train", "--out", str(tmp_path / "e"), "--dataset", str(tmp_path / "missing")]) == 2
    assert main(["baseline", "--out", str(dataset), "--dataset", str(dataset)]) == 2
    assert main(["nosuchcommand", "--out", str(tmp_path)]) == 2


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scaling": {"alpha": 6, "rho": 0.5, "r": 8}}))
    assert main(["scaling", "--out", str(tmp_path / "a"), "--config", str(cfg)]) == 0
    assert json.loads((tmp_path / "a" / "scaling.json").read_text())["delta"] == 1.5 * 0.5 / (6 * 8)
    assert main(["scaling", "--out", str(tmp_path / "b"), "--config", str(cfg), "--scaling.alpha=3"]) == 0
    assert json.loads((tmp_path / "b" / "scaling.json").read_text())["delta"] == 0.03125


@pytest.mark.slow
def test_pipeline_script_end_to_end(tmp_path):
    res = subprocess.run(
        ["bash", str(ROOT / "scripts" / "pipeline.sh"), str(tmp_path / "run")],
        capture_output=True,
        text=True,
        env={"PATH": "/usr/bin:/bin", "PYTHONPATH": str(ROOT / "src")},
        timeout=600,
    )
    assert res.returncode == 0, res.stderr
    for stage in ("dataset", "sparse", "train", "infer", "baseline", "eval_net", "eval_baseline", "scaling"):
        run = json.loads((tmp_path / "run" / stage / "run.json").read_text())
        assert run["status"] == "ok"
    rows = _rows(tmp_path / "run" / "eval_net" / "metrics.csv")
    assert rows[0] == METRICS_COLUMNS and len(rows) > 1
