import csv
import json

import numpy as np
import pytest

from bcpnn import cli
from bcpnn.model import load

SMOKE = """
[data]
source = synthetic
n_samples = 400
n_features = 12
n_clusters = 3
spread = 0.05

[network]
hidden_hcus = 3
hidden_mcus = 6

[train]
n_epochs1 = 1
n_epochs2 = 1
batch_size = 32
fan_in = 24
lambda_hidden = 0.05
lambda_output = 0.05
float_format = f64

[output]
output_dir = out
"""


@pytest.fixture
def smoke(tmp_path):
    p = tmp_path / "smoke.ini"
    p.write_text(SMOKE)
    return p


def _csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestConfig:
    def test_defaults_and_paths(self, tmp_path):
        cfg = cli.parse_config("[output]\noutput_dir = runs/a\n", base_dir=tmp_path, env={})
        assert cfg.output_dir == tmp_path / "runs" / "a"
        assert cfg.train.n_workers == 1
        assert cfg.hidden_geometry.total_units == 3000

    def test_typed_values(self):
        cfg = cli.parse_config("[train]\nlambda_hidden = 0.1\nmask_update_period = none\nbatch_size = 64\n", env={})
        assert cfg.train.lambda_hidden == 0.1 and cfg.train.batch_size == 64
        assert cfg.train.mask_update_period is None

    @pytest.mark.parametrize(
        "text",
        ["[train]\nbogus = 1\n", "[nope]\na = 1\n", "[train]\nbatch_size = lots\n", "[data]\nsource = web\n",
         "[output]\nmetrics_format = xml\n", "[network]\nhidden_hcus = 0\n", "[train]\nlambda_hidden = 2\n", "not ini"],
    )
    def test_errors(self, text):
        with pytest.raises(cli.ConfigError):
            cli.parse_config(text, env={})

    def test_worker_env_default(self):
        assert cli.parse_config("", env={cli.WORKERS_ENV: "3"}).train.n_workers == 3
        assert cli.parse_config("[train]\nn_workers = 2\n", env={cli.WORKERS_ENV: "3"}).train.n_workers == 2


class TestCommands:
    def test_train(self, smoke):
        assert cli.main(["train", str(smoke)]) == 0
        out = smoke.parent / "out"
        net = load(out / "model.bcpnn")
        assert net.hidden_geom.n_hcus == 3
        rows = _csv(out / "metrics.csv")
        assert list(rows[0]) == list(cli.TRAIN_COLUMNS)
        assert float(rows[0]["test_accuracy"]) > 0.5
        report = json.loads((out / "train_report.json").read_text())
        assert [r["phase"] for r in report] == ["hidden", "output"]

    def test_train_deterministic(self, smoke):
        cli.main(["train", str(smoke)])
        first = (smoke.parent / "out" / "model.bcpnn").read_bytes()
        cli.main(["train", str(smoke)])
        assert (smoke.parent / "out" / "model.bcpnn").read_bytes() == first

    def test_eval(self, smoke):
        cli.main(["train", str(smoke)])
        assert cli.main(["eval", str(smoke), str(smoke.parent / "out" / "model.bcpnn")]) == 0
        acc_eval = float(_csv(smoke.parent / "out" / "eval_metrics.csv")[0]["test_accuracy"])
        acc_train = float(_csv(smoke.parent / "out" / "metrics.csv")[0]["test_accuracy"])
        assert acc_eval == acc_train

    def test_eval_missing_model(self, smoke):
        assert cli.main(["eval", str(smoke), str(smoke.parent / "none.bcpnn")]) == 3

    def test_sweep(self, smoke):
        assert cli.main(["sweep-precision", str(smoke), "--formats=bf16,f32"]) == 0
        rows = _csv(smoke.parent / "out" / "precision_sweep.csv")
        assert [r["format"] for r in rows] == ["bf16", "f32"]
        assert list(rows[0]) == list(cli.SWEEP_COLUMNS)

    def test_sweep_single_format_matches_train(self, smoke):
        cli.main(["train", str(smoke)])
        cli.main(["sweep-precision", str(smoke), "--formats=f64"])
        swept = _csv(smoke.parent / "out" / "precision_sweep.csv")
        trained = _csv(smoke.parent / "out" / "metrics.csv")
        assert len(swept) == 1 and swept[0]["test_accuracy"] == trained[0]["test_accuracy"]

    def test_sweep_unknown_format(self, smoke):
        assert cli.main(["sweep-precision", str(smoke), "--formats=bf17"]) == 2

    def test_bench_json(self, smoke):
        smoke.write_text(SMOKE.replace("output_dir = out", "output_dir = out\nmetrics_format = json"))
        assert cli.main(["bench", str(smoke), "--batch-sizes=16"]) == 0
        doc = json.loads((smoke.parent / "out" / "bench.json").read_text())
        assert doc["columns"] == list(cli.BENCH_COLUMNS)
        assert len(doc["rows"]) == 1
        row = doc["rows"][0]
        assert row["train_images_per_second"] > 0 and row["inference_images_per_second"] > 0

    def test_exit_codes(self, tmp_path, caplog):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nbogus = 1\n")
        assert cli.main(["train", str(bad)]) == 2
        assert cli.main(["train", str(tmp_path / "missing.ini")]) == 2
        nodata = tmp_path / "nodata.ini"
        nodata.write_text("[data]\nmnist_dir = nowhere\n")
        assert cli.main(["train", str(nodata)]) == 3
        assert "nowhere" in caplog.text

    def test_runtime_error(self, smoke):
        smoke.write_text(SMOKE.replace("fan_in = 24", "fan_in = 99"))
        assert cli.main(["train", str(smoke)]) == 1

    def test_metrics_only_in_files(self, smoke, capsys):
        cli.main(["train", str(smoke)])
        assert capsys.readouterr().out == ""
