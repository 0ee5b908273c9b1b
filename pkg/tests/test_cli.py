import csv
import json

import numpy as np
import pytest

from stgcrnn.cli import main, write_csv
from stgcrnn.config import load_config
from stgcrnn.errors import ConfigurationError

TINY = """\
seed: 1
data:
  T: 3
  T_prime: 2
  synthetic: {nodes: 6, hours: 160, seed: 2}
model: {hidden_dim: 3, num_layers: 1, K: 1}
train: {max_epochs: 2, batch_size: 16}
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def run_dirs(root):
    return sorted(p for p in root.iterdir() if p.is_dir())


class TestConfig:
    def test_defaults(self):
        cfg = load_config(environ={})
        assert cfg.model.K == 2 and cfg.graph.epsilon == 0.01 and cfg.train.batch_size == 64

    def test_unknown_key_has_path(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  learning_rate: 0.1\n")
        with pytest.raises(ConfigurationError, match=r"train\.learning_rate"):
            load_config(p, environ={})

    def test_type_error_has_path(self):
        with pytest.raises(ConfigurationError, match=r"model\.K"):
            load_config(overrides={"model": {"K": "two"}}, environ={})

    def test_env_override(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  base_lr: 0.1\n")
        cfg = load_config(p, environ={"APP_TRAIN__BASE_LR": "1e-2", "APP_MODEL__K": "3", "OTHER": "x"})
        assert cfg.train.base_lr == 0.01 and cfg.model.K == 3

    def test_flag_beats_env(self):
        cfg = load_config(overrides={"seed": 5}, environ={"APP_SEED": "3"})
        assert cfg.seed == 5

    def test_unquoted_date(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("data:\n  train_end: 2017-01-01\n")
        assert load_config(p, environ={}).data.train_end == "2017-01-01"

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides={"model": {"conv": "attention"}}, environ={})


def test_csv_is_rfc4180(tmp_path):
    text = write_csv([("a,b", 1), ('say "hi"', 2)], ["name", "n"], tmp_path / "t.csv")
    assert text == 'name,n\r\n"a,b",1\r\n"say ""hi""",2\r\n'
    assert (tmp_path / "t.csv").read_bytes() == text.encode()


class TestBuildGraph:
    def test_colocated_pair(self, tmp_path, capsys):
        p = tmp_path / "s.csv"
        p.write_text("station_id,x_meters,y_meters\na,0,0\nb,0,0\nc,3000,0\nd,3000,500\n")
        assert main(["build-graph", str(p), "--epsilon", "0.0", "--out", str(tmp_path / "g.json")]) == 0
        out = capsys.readouterr().out
        assert "weight: max 1.0000" in out and "nodes: 4" in out
        doc = json.loads((tmp_path / "g.json").read_text())
        assert doc["W"][0][1] == 1.0

    def test_aggressive_threshold(self, tmp_path, capsys):
        p = tmp_path / "s.csv"
        p.write_text("station_id,x_meters,y_meters\na,0,0\nb,1000,0\nfar,90000,0\nc,500,800\n")
        assert main(["build-graph", str(p), "--epsilon", "0.99", "--out", str(tmp_path / "g.json")]) == 1
        assert "has no edges" in capsys.readouterr().err

    def test_25_stations(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 20000, (25, 2))
        rows = "".join(f"s{i},{x:.1f},{y:.1f}\n" for i, (x, y) in enumerate(xy))
        p = tmp_path / "s.csv"
        p.write_text("station_id,x_meters,y_meters\n" + rows)
        assert main(["build-graph", str(p), "--epsilon", "0.0", "--out", str(tmp_path / "g.json")]) == 0
        assert "nodes: 25" in capsys.readouterr().out


class TestTrain:
    def test_artifacts_and_reproducibility(self, tiny, tmp_path):
        out = tmp_path / "runs"
        assert main(["train", "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
        assert main(["train", "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
        first, second = run_dirs(out)
        for run in (first, second):
            assert {p.name for p in run.iterdir()} >= {"best.json", "history.jsonl", "metrics.json",
                                                     "config.yaml", "checkpoints"}
        assert (first / "best.json").read_bytes() == (second / "best.json").read_bytes()

        def losses(run):
            return [{k: v for k, v in json.loads(line).items() if k != "seconds"}
                    for line in (run / "history.jsonl").read_text().splitlines()]

        assert losses(first) == losses(second)

    def test_seed_flag(self, tiny, tmp_path):
        out = tmp_path / "runs"
        assert main(["train", "--config", str(tiny), "--out", str(out), "--seed", "7", "--quiet"]) == 0
        (run,) = run_dirs(out)
        assert run.name.endswith("seed7")
        assert "seed: 7" in (run / "config.yaml").read_text()

    def test_nothing_to_train(self, tiny, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("APP_TRAIN__MAX_EPOCHS", "0")
        assert main(["train", "--config", str(tiny), "--out", str(tmp_path / "r"), "--quiet"]) == 1
        assert "nothing to train" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("model:\n  kernel: 3\n")
        assert main(["train", "--config", str(p), "--quiet"]) == 2
        assert "model.kernel" in capsys.readouterr().err


@pytest.fixture
def trained(tiny, tmp_path):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(tiny), "--out", str(out), "--quiet"]) == 0
    return run_dirs(out)[0] / "best.json"


class TestEvalForecast:
    def test_eval_table_and_sp_rmse(self, trained, tmp_path, capsys):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(trained), "--sp-rmse", "--out", str(out), "--quiet"]) == 0
        report = json.loads((out / "eval_test.json").read_text())
        assert report["split"] == "test" and report["sp_rmse"] is not None
        rows = list(csv.reader(open(out / "horizon_rmse_test.csv", newline="")))
        assert rows[0] == ["horizon_hours", "rmse"] and len(rows) == 1 + 2

    def test_eval_train_split_labelled(self, trained, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(trained), "--split", "train", "--quiet"]) == 0
        assert '"split": "train"' in capsys.readouterr().out

    def test_schema_mismatch(self, trained, tmp_path, capsys):
        p = tmp_path / "other.yaml"
        p.write_text(TINY.replace("seed: 2}", "seed: 2, n_exogenous: 1}"))
        assert main(["eval", "--checkpoint", str(trained), "--config", str(p), "--quiet"]) == 1
        err = capsys.readouterr().err
        assert "expected ['pm']" in err and "exo_lag1" in err

    def test_forecast_csv(self, trained, tmp_path):
        out = tmp_path / "f.csv"
        assert main(["forecast", "--checkpoint", str(trained), "--horizon", "2", "--out", str(out),
                     "--quiet"]) == 0
        rows = list(csv.reader(open(out, newline="")))
        assert rows[0] == ["timestamp", "station_id", "horizon_hours", "pm"]
        assert len(rows) == 1 + 2 * 6

    def test_forecast_horizon_too_long(self, trained):
        assert main(["forecast", "--checkpoint", str(trained), "--horizon", "5", "--quiet"]) == 1


class TestAblate:
    @pytest.mark.parametrize("axis,rows", [("K", 4), ("epsilon", 3), ("conv", 3)])
    def test_row_counts(self, tiny, tmp_path, axis, rows, monkeypatch):
        monkeypatch.setenv("APP_TRAIN__MAX_EPOCHS", "1")
        assert main(["ablate", "--config", str(tiny), "--axis", axis, "--out", str(tmp_path), "--quiet"]) == 0
        table = list(csv.DictReader(open(tmp_path / f"ablation_{axis}.csv", newline="")))
        assert len(table) == rows

    def test_failed_row_recorded(self, tiny, tmp_path):
        assert main(["ablate", "--config", str(tiny), "--axis", "epsilon", "--values", "0.999", "0.0",
                     "--out", str(tmp_path), "--quiet"]) == 0
        table = list(csv.DictReader(open(tmp_path / "ablation_epsilon.csv", newline="")))
        assert [r["status"] for r in table] == ["failed", "ok"]
        assert "IsolatedNodeError" in table[0]["error"]


class TestDataCommands:
    def test_synth_writes_three_files(self, tiny, tmp_path):
        assert main(["synth", "--config", str(tiny), "--out", str(tmp_path), "--quiet"]) == 0
        assert {p.name for p in tmp_path.iterdir()} >= {"stations.csv", "graph.json", "dataset.npz"}

    def test_prepare_data_with_nearest_source(self, tmp_path, capsys):
        (tmp_path / "st.csv").write_text("station_id,x_meters,y_meters\na,0,0\nb,1000,0\nc,3000,900\n")
        assert main(["build-graph", str(tmp_path / "st.csv"), "--epsilon", "0.0",
                     "--out", str(tmp_path / "g.json")]) == 0
        (tmp_path / "air.csv").write_text(
            "timestamp,station_id,pm25\n" + "".join(
                f"2017-01-01T0{h}:00,{s},{h + i}\n" for h in range(4) for i, s in enumerate("abc")))
        (tmp_path / "met.csv").write_text(
            "timestamp,station_id,temp\n" + "".join(
                f"2017-01-01T0{h}:00,{s},{10 * h + i}\n" for h in range(5) for i, s in enumerate(["w", "e"])))
        (tmp_path / "met_st.csv").write_text("station_id,x_meters,y_meters\nw,-100,0\ne,1200,0\n")
        code = main(["prepare-data", "--graph", str(tmp_path / "g.json"), "--factor", f"air={tmp_path / 'air.csv'}",
                     "--factor", f"meteo={tmp_path / 'met.csv'}", "--sources", f"meteo={tmp_path / 'met_st.csv'}",
                     "--out", str(tmp_path / "d.npz"), "--quiet"])
        assert code == 0
        from stgcrnn.data import load_dataset

        d = load_dataset(tmp_path / "d.npz")
        assert d.shape == (5, 3, 2) and d.feature_names == ["pm25", "temp"]
        # a is nearest w; b and c are nearest e
        np.testing.assert_array_equal(d.data[1, :, 1], [10, 11, 11])
        assert d.missing_mask[4, :, 0].all()
