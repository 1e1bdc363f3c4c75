import csv
import json

import numpy as np
import pytest

from moskit.cli import main
from conftest import grid_targets, synthetic_sequences, write_fixture_dataset


@pytest.fixture
def fixture_paths(tmp_path):
    train, _, _ = synthetic_sequences(12, 4, 4, 9, seed=21)
    val, _, _ = synthetic_sequences(6, 4, 4, 9, seed=22)
    train_manifest = write_fixture_dataset(tmp_path / "train", grid_targets(train))
    val_manifest = write_fixture_dataset(tmp_path / "val", grid_targets(val))
    return tmp_path, train_manifest, val_manifest


def run(argv):
    return main([str(a) for a in argv])


class TestStats:
    def test_histogram_counts_sum(self, tmp_path):
        data, _, _ = synthetic_sequences(3, 4, 4, 6, seed=2)
        manifest = write_fixture_dataset(tmp_path / "d", grid_targets(data))
        out = tmp_path / "out"
        assert run(["stats", "--manifest", manifest, "--out", out]) == 0
        with open(out / "histogram.csv") as f:
            rows = list(csv.DictReader(f))
        assert sum(int(r["count"]) for r in rows) == 3
        assert (out / "class_weights.csv").exists()
        assert (out / "resolved_config.cfg").exists()

    def test_scatter_written_when_votes_present(self, tmp_path):
        data, _, _ = synthetic_sequences(3, 4, 4, 6, seed=2)
        votes = {uid: [3, 3, 3, 3, 4, 4, 4, 4] for uid in data.ids}
        manifest = write_fixture_dataset(tmp_path / "d", data, votes=votes)
        out = tmp_path / "out"
        assert run(["stats", "--manifest", manifest, "--out", out]) == 0
        with open(out / "scatter.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1 and int(rows[0]["count"]) == 3


class TestPlanBatches:
    def test_ndjson_schema(self, tmp_path):
        data, _, _ = synthetic_sequences(7, 4, 4, 12, seed=3)
        manifest = write_fixture_dataset(tmp_path / "d", grid_targets(data))
        out = tmp_path / "out"
        assert run(["plan-batches", "--manifest", manifest, "--out", out,
                    "--batch_size", "3"]) == 0
        lines = (out / "batches.ndjson").read_text().splitlines()
        assert len(lines) == 3
        ids = []
        for line in lines:
            rec = json.loads(line)
            assert set(rec) == {"batch", "max_len", "padding"}
            assert rec["padding"] >= 0
            ids.extend(rec["batch"])
        assert sorted(ids) == sorted(data.ids)


class TestTrain:
    def _args(self, train_m, val_m, out, seed=0):
        return ["train", "--train-manifest", train_m, "--val-manifest", val_m,
                "--out", out, "--seed", str(seed),
                "--lstm_hidden", "6", "--dense_hidden", "6",
                "--micro_batch", "4", "--accumulation_steps", "2",
                "--max_epochs", "2", "--patience", "0", "--max_restarts", "0"]

    def test_writes_artifacts(self, fixture_paths):
        tmp, train_m, val_m = fixture_paths
        out = tmp / "run"
        assert run(self._args(train_m, val_m, out)) == 0
        assert (out / "checkpoint.mosm").exists()
        history = (out / "history.csv").read_text()
        assert history.splitlines()[0] == "iteration,lr,train_loss,val_loss,phase,batch_size"
        assert (out / "resolved_config.cfg").exists()

    def test_identical_seeds_identical_history(self, fixture_paths):
        tmp, train_m, val_m = fixture_paths
        assert run(self._args(train_m, val_m, tmp / "a", seed=11)) == 0
        assert run(self._args(train_m, val_m, tmp / "b", seed=11)) == 0
        assert (tmp / "a/history.csv").read_bytes() == (tmp / "b/history.csv").read_bytes()

    def test_rerun_from_snapshot_reproduces(self, fixture_paths):
        tmp, train_m, val_m = fixture_paths
        assert run(self._args(train_m, val_m, tmp / "a", seed=4)) == 0
        assert run(["train", "--train-manifest", train_m, "--val-manifest", val_m,
                    "--out", tmp / "c", "--config", tmp / "a/resolved_config.cfg"]) == 0
        assert (tmp / "a/history.csv").read_bytes() == (tmp / "c/history.csv").read_bytes()

    def test_classification_needs_init(self, fixture_paths, capsys):
        tmp, train_m, val_m = fixture_paths
        code = run(["train", "--train-manifest", train_m, "--val-manifest", val_m,
                    "--head", "classification", "--out", tmp / "x"])
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_classification_transfer_runs(self, fixture_paths):
        tmp, train_m, val_m = fixture_paths
        assert run(self._args(train_m, val_m, tmp / "reg")) == 0
        assert run(["train", "--train-manifest", train_m, "--val-manifest", val_m,
                    "--head", "classification", "--init-from", tmp / "reg/checkpoint.mosm",
                    "--out", tmp / "cls", "--max_epochs", "1", "--patience", "0",
                    "--lstm_hidden", "6", "--dense_hidden", "6"]) == 0
        history = (tmp / "cls/history.csv").read_text().splitlines()
        phases = {line.split(",")[4] for line in history[1:]}
        assert phases == {"cls1", "cls2", "cls3"}


class TestPredictEvaluate:
    def test_full_pipeline(self, fixture_paths):
        tmp, train_m, val_m = fixture_paths
        assert run(TestTrain()._args(train_m, val_m, tmp / "reg")) == 0
        out = tmp / "pred"
        assert run(["predict", "--manifest", val_m,
                    "--reg-checkpoint", tmp / "reg/checkpoint.mosm", "--out", out]) == 0
        with open(out / "predictions.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 6
        for row in rows:
            final = float(row["final"])
            assert 1.0 <= final <= 5.0
            steps = (final - 1.0) / 0.125
            assert abs(steps - round(steps)) < 1e-9
            assert row["raw_classification"] == ""
        out2 = tmp / "eval"
        assert run(["evaluate", "--manifest", val_m,
                    "--predictions", out / "predictions.csv", "--out", out2]) == 0
        report = (out2 / "report.csv").read_text().splitlines()
        assert report[0] == "level,metric,value"
        assert len(report) == 9

    def test_evaluate_perfect_predictions(self, tmp_path, capsys):
        data, _, _ = synthetic_sequences(6, 4, 4, 6, seed=31)
        data = grid_targets(data)
        manifest = write_fixture_dataset(tmp_path / "d", data)
        pred_path = tmp_path / "preds.csv"
        with open(pred_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["utterance_id", "final"])
            for uid in data.ids:
                w.writerow([uid, repr(data.targets[uid])])
        assert run(["evaluate", "--manifest", manifest, "--predictions", pred_path,
                    "--out", tmp_path / "out"]) == 0
        text = (tmp_path / "out/report.csv").read_text()
        rows = [r.split(",") for r in text.strip().splitlines()[1:]]
        values = {(r[0], r[1]): float(r[2]) for r in rows}
        assert values[("utterance", "mse")] == 0.0
        assert values[("utterance", "lcc")] == 1.0
        assert values[("system", "srcc")] == 1.0

    def test_predict_without_checkpoints_errors(self, fixture_paths, capsys):
        tmp, _, val_m = fixture_paths
        assert run(["predict", "--manifest", val_m, "--out", tmp / "p"]) == 1
        assert capsys.readouterr().err.startswith("error:")


class TestFinetuneCmd:
    def test_finetune_writes_checkpoint(self, fixture_paths):
        tmp, train_m, val_m = fixture_paths
        assert run(TestTrain()._args(train_m, val_m, tmp / "reg")) == 0
        out = tmp / "ft"
        assert run(["finetune", "--checkpoint", tmp / "reg/checkpoint.mosm",
                    "--train-manifest", val_m, "--val-manifest", val_m,
                    "--out", out, "--max_epochs", "1", "--patience", "0"]) == 0
        assert (out / "finetuned.mosm").exists()
        history = (out / "history.csv").read_text().splitlines()
        assert history[1].split(",")[4] == "finetune"


class TestErrors:
    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["stats", "--manifest", "x.csv", "--bogus-flag", "1"])
        assert exc.value.code == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_file_single_line_reason(self, tmp_path, capsys):
        assert run(["stats", "--manifest", tmp_path / "nope.csv", "--out", tmp_path]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert len(err.strip().splitlines()) == 1

    def test_malformed_predictions_cell(self, tmp_path, capsys):
        data, _, _ = synthetic_sequences(2, 4, 4, 6, seed=1)
        manifest = write_fixture_dataset(tmp_path / "d", grid_targets(data))
        bad = tmp_path / "preds.csv"
        bad.write_text("utterance_id,final\nu000,3.0\nu001,not-a-number\n")
        assert run(["evaluate", "--manifest", manifest, "--predictions", bad,
                    "--out", tmp_path / "o"]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and "row 3" in err

    def test_bad_flag_value(self, tmp_path, capsys):
        data, _, _ = synthetic_sequences(2, 4, 4, 6, seed=1)
        manifest = write_fixture_dataset(tmp_path / "d", grid_targets(data))
        assert run(["plan-batches", "--manifest", manifest, "--batch_size", "three",
                    "--out", tmp_path / "o"]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("bogus_key=1\n")
        data, _, _ = synthetic_sequences(2, 4, 4, 6, seed=1)
        manifest = write_fixture_dataset(tmp_path / "d", grid_targets(data))
        assert run(["stats", "--manifest", manifest, "--config", cfg,
                    "--out", tmp_path / "o"]) == 1
        assert capsys.readouterr().err.startswith("error:")
