import json
import subprocess
import sys

import pytest

from unorm.cli import main

TRAIN_CFG = {
    "model": {"kind": "mlp", "depth": 1, "channels": 8,
              "norm": {"method": "un", "warmup_steps": 10, "window_m": 3, "filtration": True}},
    "task": {"batch": 8, "tokens": 4, "channels": 8, "out_dim": 3},
    "steps": 40, "lr": 0.05, "trace_channels": 4,
}


def _write(path, obj):
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(path)


@pytest.fixture
def trained(tmp_path):
    cfg = _write(tmp_path / "train.json", TRAIN_CFG)
    out = tmp_path / "run"
    assert main(["--out", str(out), "train", cfg]) == 0
    return out


def test_train_artifacts(trained):
    for name in ("train_report.csv", "stats_trace.csv", "final_state.json", "model.json",
                 "resolved_config.json"):
        assert (trained / name).exists()
    resolved = json.loads((trained / "resolved_config.json").read_text())
    assert resolved["model"]["norm"]["window_m"] == 3 and resolved["seed"] == 0
    header = (trained / "stats_trace.csv").read_text().splitlines()[0]
    assert header.startswith("# unorm-trace-v1 channels=") and len(header.split("=")[1].split()) == 4


def test_train_idempotent(tmp_path, trained):
    cfg = _write(tmp_path / "train.json", TRAIN_CFG)
    assert main(["--out", str(tmp_path / "again"), "train", cfg]) == 0
    for name in ("stats_trace.csv", "final_state.json", "model.json"):
        assert (tmp_path / "again" / name).read_text() == (trained / name).read_text()
    strip = lambda p: [ln.rsplit(",", 1)[0] for ln in p.read_text().splitlines()]  # noqa: E731
    assert strip(tmp_path / "again" / "train_report.csv") == strip(trained / "train_report.csv")


def test_train_config_errors(tmp_path, capsys):
    assert main(["train", _write(tmp_path / "bad.json", "{not json")]) == 2
    assert "malformed" in capsys.readouterr().err
    bad = {"model": {"norm": {"method": "un", "window_m": 1, "filtration": True}}}
    assert main(["train", _write(tmp_path / "m1.json", bad)]) == 2
    assert main(["train", str(tmp_path / "missing.json")]) == 2


def test_train_divergence_exit_code(tmp_path):
    cfg = {"model": {"norm": {"method": "un", "warmup_steps": 0}}, "steps": 100, "lr": 50.0}
    assert main(["--out", str(tmp_path / "d"), "train", _write(tmp_path / "d.json", cfg)]) == 3


def test_fuse(tmp_path, trained):
    state_before = (trained / "final_state.json").read_bytes()
    model_before = (trained / "model.json").read_bytes()
    out = tmp_path / "fused.json"
    assert main(["fuse", str(trained / "final_state.json"), str(trained / "model.json"),
                 str(out)]) == 0
    fused = json.loads(out.read_text())
    assert fused["fused"] and set(fused["norms"].values()) == {"identity"}
    assert (trained / "final_state.json").read_bytes() == state_before
    assert (trained / "model.json").read_bytes() == model_before


def test_fuse_rejects_ln_and_missing(tmp_path, capsys):
    cfg = dict(TRAIN_CFG, model={"depth": 1, "channels": 8, "norm": {"method": "ln"}}, steps=3)
    run = tmp_path / "ln"
    assert main(["--out", str(run), "train", _write(tmp_path / "ln.json", cfg)]) == 0
    rc = main(["fuse", str(run / "final_state.json"), str(run / "model.json"), str(tmp_path / "x")])
    assert rc == 2 and "not fusable" in capsys.readouterr().err
    assert main(["fuse", str(tmp_path / "nope.json"), str(run / "model.json"),
                 str(tmp_path / "x")]) == 2


def test_gradcheck_defaults_and_config(tmp_path):
    out = tmp_path / "g"
    assert main(["--out", str(out), "gradcheck"]) == 0
    rows = (out / "gradcheck.csv").read_text().splitlines()
    assert rows[1].startswith("bn,20,") and rows[1].endswith("True")
    cfg = _write(tmp_path / "g.json", {"norm": {"method": "un", "warmup_steps": 2}, "history": 6,
                                       "trials": 5})
    assert main(["--out", str(out), "gradcheck", cfg]) == 0
    assert main(["gradcheck", _write(tmp_path / "l.json", {"norm": {"method": "ln"}})]) == 2


def test_pnac_synthetic_gaussian(tmp_path):
    cfg = _write(tmp_path / "p.json", {"synthetic": {"channels": 256, "steps": 150}})
    out = tmp_path / "p"
    assert main(["--out", str(out), "pnac", cfg]) == 0
    lines = (out / "pnac.csv").read_text().splitlines()
    assert lines[0] == "layer,window_start,window_end,which,pnac"
    assert float(lines[1].split(",")[-1]) >= 90


def test_pnac_on_training_trace(tmp_path, trained):
    cfg = _write(tmp_path / "p.json", {"trace": str(trained / "stats_trace.csv"), "window": 20,
                                       "which": "both"})
    assert main(["--out", str(tmp_path / "p"), "pnac", cfg]) == 0
    assert (tmp_path / "p" / "outlier_accumulation.csv").exists()
    assert main(["pnac", _write(tmp_path / "e.json", {})]) == 2


def test_bench(tmp_path, trained):
    cfg = _write(tmp_path / "b.json", {"model_path": str(trained / "model.json"), "batches": 50})
    out = tmp_path / "b"
    assert main(["--out", str(out), "bench", cfg]) == 0
    rows = {r.split(",")[0]: r.split(",") for r in (out / "bench.csv").read_text().splitlines()}
    assert rows["fused"][2] == "0.0" and rows["fused"][3] == "0.0"
    assert float(rows["max_abs_diff"][1]) <= 1e-9 and float(rows["ratio"][1]) > 0


def test_sweep(tmp_path):
    cfg = dict(TRAIN_CFG, steps=10, axis="alpha", values=[0.7, 0.9])
    out = tmp_path / "s"
    assert main(["--out", str(out), "--jobs", "2", "sweep", _write(tmp_path / "s.json", cfg)]) == 0
    assert len((out / "sweep.csv").read_text().splitlines()) == 3
    assert main(["sweep", _write(tmp_path / "bad.json", dict(cfg, axis="depth"))]) == 2


def test_module_entry_point(tmp_path, monkeypatch):
    monkeypatch.setenv("UNORM_OUT", str(tmp_path / "envout"))
    r = subprocess.run([sys.executable, "-m", "unorm", "gradcheck"], capture_output=True, text=True,
                       cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "envout" / "gradcheck.csv").exists()
