import json

import numpy as np
import pytest

from transferop import io
from transferop.cli import main
from transferop.config import ConfigError, load_config, parse_grid
from transferop.dynamics import SnapshotDataset
from transferop.operators import SpectralModel

SMALL = ["--m", "2000", "--widths", "32"]


class TestConfig:
    def test_file_and_override_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.toml"
        cfg_file.write_text('[system]\nname = "lemon_slice"\nbeta = 2.0\n[data]\nm = 500\n[model]\nwidths = [64, 32]\n')
        cfg = load_config(cfg_file, ["data.m=800", ("model.n", 5)])
        assert cfg.system.name == "lemon_slice" and cfg.data.m == 800 and cfg.model.n == 5
        assert cfg.model.widths == [64, 32]

    def test_unknown_key(self, tmp_path):
        f = tmp_path / "bad.toml"
        f.write_text("[data]\nsize = 3\n")
        with pytest.raises(ConfigError, match="data.size"):
            load_config(f)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="solver"):
            load_config(None, ["solver.kind=1"])

    def test_type_errors(self):
        with pytest.raises(ConfigError, match="data.m"):
            load_config(None, ["data.m=1.5"])
        with pytest.raises(ConfigError, match="model.symmetrize"):
            load_config(None, ["model.symmetrize=3"])

    def test_choices(self):
        with pytest.raises(ConfigError, match="model.mode"):
            load_config(None, ["model.mode='koopman'"])

    def test_beta_defaults_per_system(self, tmp_path):
        assert load_config(None, ["system.name='lemon_slice'"]).system.beta == 2.0
        assert load_config(None, [("system.name", "ou")]).system.beta == 4.0
        assert load_config(None, [("system.name", "triple_well"), ("system.beta", 5.0)]).system.beta == 5.0
        f = tmp_path / "b.toml"
        f.write_text('[system]\nname = "triple_well"\nbeta = 3.0\n')
        assert load_config(f).system.beta == 3.0

    def test_lag_steps_from_time(self):
        assert load_config(None, ["data.lag_time=0.5", "data.h=0.005"]).lag_steps() == 100

    def test_grid(self):
        assert parse_grid("-2:2:401") == [(-2.0, 2.0, 401)]
        assert parse_grid("0:1:3,-1:1:5") == [(0.0, 1.0, 3), (-1.0, 1.0, 5)]
        with pytest.raises(ConfigError):
            parse_grid("0:1")


@pytest.fixture(scope="module")
def ou_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ou")
    assert main(["simulate", "--system", "ou", "--alpha", "1", "--beta", "4", "--lag-time", "0.5",
                 "--seed", "7", "--out", str(out), *SMALL]) == 0
    return out


class TestCommands:
    def test_simulate_outputs(self, ou_dir):
        ds = SnapshotDataset.load(ou_dir)
        assert ds.m == 2000 and ds.lag_time == pytest.approx(0.5) and ds.source["seed"] == 7
        assert (ou_dir / "X.topd").read_bytes()[:4] == b"TOPD"

    def test_simulate_validation(self, tmp_path, capsys):
        assert main(["simulate", "--system", "ou", "--m", "0", "--out", str(tmp_path)]) == 2
        assert "data.m" in capsys.readouterr().err

    def test_fit_is_deterministic(self, ou_dir, tmp_path):
        reports = []
        for name in ("a", "b"):
            assert main(["fit", "--data", str(ou_dir), "--out", str(tmp_path / name), *SMALL]) == 0
            reports.append(json.loads((tmp_path / name / "fit_report.json").read_text()))
        assert reports[0]["values"] == reports[1]["values"]
        assert (tmp_path / "a" / "model.spm").read_bytes() == (tmp_path / "b" / "model.spm").read_bytes()
        t = reports[0]["timings"]
        assert set(t) >= {"featurize", "covariances", "solve", "total"} and min(t.values()) >= 0

    def test_schrodinger_on_pairs_fails(self, ou_dir, tmp_path, capsys):
        assert main(["fit", "--data", str(ou_dir), "--mode", "schrodinger", "--out", str(tmp_path)]) == 3
        assert "ModeMismatch" in capsys.readouterr().err

    def test_eval_grid_and_training_data(self, ou_dir, tmp_path):
        assert main(["fit", "--data", str(ou_dir), "--out", str(tmp_path), *SMALL]) == 0
        model = tmp_path / "model.spm"
        assert main(["eval", "--model", str(model), "--grid=-2:2:401", "--out", str(tmp_path / "g")]) == 0
        header, vals = io.read_csv(tmp_path / "g" / "eval.csv")
        assert vals.shape == (401, 5) and header[0] == "x0"
        assert main(["eval", "--model", str(model), "--data", str(ou_dir), "--out", str(tmp_path / "d")]) == 0
        _, vals = io.read_csv(tmp_path / "d" / "eval.csv")
        ds = SnapshotDataset.load(ou_dir)
        ref = SpectralModel.load(model).evaluate(ds.X)
        np.testing.assert_allclose(vals[:, 1:].T, ref, rtol=0, atol=1e-12)

    def test_eval_dimension_mismatch(self, ou_dir, tmp_path):
        assert main(["fit", "--data", str(ou_dir), "--out", str(tmp_path), *SMALL]) == 0
        assert main(["eval", "--model", str(tmp_path / "model.spm"), "--grid", "0:1:3,0:1:3",
                     "--out", str(tmp_path)]) == 2

    def test_fit_iterative_zero_epochs(self, ou_dir, tmp_path):
        assert main(["fit-iterative", "--data", str(ou_dir), "--epochs", "0", "--n", "3",
                     "--out", str(tmp_path), *SMALL]) == 0
        rep = json.loads((tmp_path / "fit-iterative_report.json").read_text())
        assert len(rep["loss_history"]) == 1
        assert sum(rep["values"]) == pytest.approx(rep["loss_history"][0], rel=1e-8)

    def test_ensemble_reproducible(self, ou_dir, tmp_path):
        for name in ("a", "b"):
            assert main(["ensemble", "--data", str(ou_dir), "--members", "3", "--n", "3", "--grid=-1:1:9",
                         "--out", str(tmp_path / name), *SMALL]) == 0
        assert (tmp_path / "a" / "ensemble.csv").read_bytes() == (tmp_path / "b" / "ensemble.csv").read_bytes()
        header, vals = io.read_csv(tmp_path / "a" / "ensemble.csv")
        assert vals.shape == (9, 8) and np.all(vals[:, 5:] >= 0)

    def test_ensemble_needs_two(self, ou_dir, tmp_path):
        assert main(["ensemble", "--data", str(ou_dir), "--members", "1", "--out", str(tmp_path)]) == 2

    def test_cluster(self, ou_dir, tmp_path):
        assert main(["fit", "--data", str(ou_dir), "--out", str(tmp_path), *SMALL]) == 0
        args = ["cluster", "--model", str(tmp_path / "model.spm"), "--data", str(ou_dir)]
        assert main([*args, "--k", "1", "--out", str(tmp_path)]) == 2
        assert main([*args, "--k", "3", "--out", str(tmp_path)]) == 0
        _, vals = io.read_csv(tmp_path / "clusters.csv")
        assert vals.shape == (2000, 3) and set(np.unique(vals[:, 2])) == {0, 1, 2}

    def test_benchmark_single_row(self, tmp_path, capsys):
        assert main(["benchmark", "--systems", "ou", "--repetitions", "3", "--epochs", "2", "--out", str(tmp_path),
                     *SMALL]) == 0
        lines = (tmp_path / "benchmark.csv").read_text().splitlines()
        assert lines[0] == "system,closed_form_s,iterative_s,speedup,error" and len(lines) == 2
        assert "speedup" in capsys.readouterr().out

    def test_missing_inputs(self, tmp_path):
        assert main(["fit", "--out", str(tmp_path)]) == 2
        assert main(["fit", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2

    def test_threads_env(self, ou_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("TRANSFEROP_THREADS", "2")
        assert main(["fit", "--data", str(ou_dir), "--out", str(tmp_path), *SMALL]) == 0
        monkeypatch.setenv("TRANSFEROP_THREADS", "many")
        assert main(["fit", "--data", str(ou_dir), "--out", str(tmp_path), *SMALL]) == 2

    def test_config_file_end_to_end(self, tmp_path):
        cfg = tmp_path / "qho.toml"
        cfg.write_text('[system]\nname = "qho"\n[data]\nm = 1000\ndomain = [[-5.0, 5.0]]\n'
                       '[model]\nmode = "schrodinger"\nwidths = [64]\nn = 3\n')
        out = str(tmp_path / "o")
        assert main(["simulate", "--config", str(cfg), "--out", out]) == 0
        assert main(["fit", "--config", str(cfg), "--data", out, "--out", out]) == 0
        rep = json.loads((tmp_path / "o" / "fit_report.json").read_text())
        assert rep["mode"] == "schrodinger" and len(rep["values"]) == 3
