import json

import pytest

from prefield.cli import main


def test_simulate_fit_predict_score_round(tiny_toml, tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(tiny_toml), "--seed", "3", "--out-dir", str(out)]) == 0
    for f in ("field.csv", "tracks.csv", "records.csv", "manifest.json"):
        assert (out / f).exists()
    assert main(["fit", "--config", str(tiny_toml), "--tracks", str(out / "tracks.csv"), "--out-dir", str(out)]) == 0
    rep = json.loads((out / "fit_preferential.json").read_text())
    assert set(rep["estimates"]) >= {"mu", "phi", "sigma2", "alpha"}
    assert main(["predict", "--config", str(tiny_toml), "--tracks", str(out / "tracks.csv"),
                 "--out-dir", str(out)]) == 0
    assert (out / "pred_preferential.csv").exists() and (out / "pred_standard.csv").exists()


def test_experiment_then_score(tiny_toml, tmp_path):
    exp = tmp_path / "exp"
    assert main(["experiment", "--config", str(tiny_toml), "--out-dir", str(exp)]) == 0
    sc = tmp_path / "sc"
    assert main(["score", "--config", str(tiny_toml), "--input", str(exp), "--out-dir", str(sc),
                 "--rmspe-convention", "rmse"]) == 0
    d = json.loads((sc / "scores.json").read_text())
    assert d["rmspe_convention"] == "rmse"
    # re-scoring reproduces the study's own per-replicate ignorance
    orig = json.loads((exp / "scores.json").read_text())
    assert d["preferential"]["mign"] == pytest.approx(orig["preferential"]["mign"], rel=1e-12)


def test_analyze_raw(tiny_toml, tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(tiny_toml), "--out-dir", str(sim)]) == 0
    out = tmp_path / "an"
    assert main(["analyze", "--config", str(tiny_toml), "--raw", str(sim / "records.csv"), "--out-dir", str(out)]) == 0
    assert (out / "manifest.json").exists()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[field]\nphi = -3\n")
    assert main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["simulate", "--threads", "0", "--out-dir", str(tmp_path / "o")]) == 2


def test_data_error_exit_code(tiny_toml, tmp_path, capsys):
    raw = tmp_path / "raw.csv"
    raw.write_text("track_id,timestamp,longitude,latitude,response\na,0,75,10,1\na,1,75,bad,1\n")
    assert main(["analyze", "--config", str(tiny_toml), "--raw", str(raw), "--out-dir", str(tmp_path / "o")]) == 3
    assert "line 3" in capsys.readouterr().err
    assert main(["fit", "--config", str(tiny_toml), "--tracks", str(tmp_path / "missing.csv"),
                 "--out-dir", str(tmp_path / "o")]) == 3


def test_score_without_replicates_is_data_error(tmp_path):
    assert main(["score", "--input", str(tmp_path), "--out-dir", str(tmp_path / "o")]) == 3


def test_raw_input_needs_projection(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("track_id,timestamp,longitude,latitude,response\n")
    assert main(["fit", "--raw", str(raw), "--out-dir", str(tmp_path / "o")]) == 2


def test_numerical_failure_exit_code(monkeypatch, tmp_path):
    import prefield.cli as cli
    from prefield.study import StudyFailed

    def boom(*a, **k):
        raise StudyFailed("5 of 5 replicates failed")

    monkeypatch.setattr(cli, "run_simulation_study", boom)
    assert main(["experiment", "--out-dir", str(tmp_path)]) == 4
