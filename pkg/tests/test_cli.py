import json
import os
import subprocess
import sys

import pytest

from dfguide.cli import EXIT_CONFIG, EXIT_OK, EXIT_PRECONDITION, load_config, main


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_gen_data_idempotent(tmp_path):
    args = ["gen-data", "--dataset", "moons", "--n", "500", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"moons.csv", "moons.pmf.csv", "config.ini", "manifest.json", "run.log"}
    for name in a:
        if name != "run.log":
            assert a[name] == b[name], name


def test_dfm_seed_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("DFM_SEED", "11")
    cfg = load_config(None, {})
    assert cfg["run"]["seed"] == 11 and cfg["data"]["seed"] == 11


def test_unknown_config_key_exits_2(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[sampler]\nstepz = 3\n")
    assert main(["sample", "--config", str(ini), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    ini.write_text("[nope]\n")
    assert main(["sample", "--config", str(ini), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_unknown_dataset_exits_2(tmp_path):
    assert main(["gen-data", "--dataset", "blobs", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_regularization_without_target_exits_4(tmp_path):
    code = main(["fit", "guidance", "--lam", "0.5", "--train-steps", "1", "--dataset", "rings", "--out", str(tmp_path)])
    assert code == EXIT_PRECONDITION


def test_sample_eval_render_pipeline(tmp_path):
    common = ["--dataset", "8gaussians", "--init", "masked", "--gamma", "3"]
    fit = tmp_path / "fit"
    assert main(["fit", "guidance", "--exact", "--out", str(fit)] + common) == EXIT_OK
    smp = tmp_path / "smp"
    code = main(["sample", "--guidance", "rate", "--steps", "8", "--chains", "500", "--guidance-model",
                 str(fit / "guidance.dfmp"), "--out", str(smp)] + common)
    assert code == EXIT_OK
    rep = json.loads((smp / "sample_report.json").read_text())
    assert rep["calls_per_step"] == 3
    ev = tmp_path / "ev"
    assert main(["eval", "--samples", str(smp / "samples.csv"), "--out", str(ev)] + common) == EXIT_OK
    metrics = json.loads((ev / "metrics.json").read_text())
    assert 0.0 <= metrics["tv"] <= 1.0 and metrics["call_count"] == 3
    ren = tmp_path / "ren"
    assert main(["render", "--samples", str(smp / "samples.csv"), "--out", str(ren)] + common) == EXIT_OK
    assert (ren / "panels.pgm").read_bytes().startswith(b"P5")
    manifest = json.loads((smp / "manifest.json").read_text())
    assert "samples.csv" in json.dumps(manifest)


def test_sample_deterministic_across_threads(tmp_path):
    base = ["sample", "--dataset", "rings", "--guidance", "posterior", "--gamma", "3", "--steps", "8", "--chains", "400", "--seed", "5"]
    assert main(base + ["--threads", "1", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(base + ["--threads", "3", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "samples.csv").read_bytes() == (tmp_path / "b" / "samples.csv").read_bytes()


def test_eval_rejects_out_of_range_samples(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("chain_id,d_0,d_1\n0,40,1\n")
    assert main(["eval", "--samples", str(bad), "--out", str(tmp_path / "o")]) == EXIT_PRECONDITION


def test_grad_check_command(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("\n") >= 5


def test_console_script_entry_point(tmp_path):
    env = {**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)}
    res = subprocess.run([sys.executable, "-m", "dfguide.cli", "gen-data", "--dataset", "rings", "--n", "50",
                          "--out", str(tmp_path)], capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "rings.csv").exists()
