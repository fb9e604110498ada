import os

import pytest
from mock import patch

from s4ecg.cli import main
from s4ecg.config import ModelConfig
from s4ecg.data import filter_rare_labels, ingest
from s4ecg.dataframe import read_comments, read_table, write_table
from s4ecg.model import S4Classifier, save_model
from s4ecg.runner import EXPERIMENT_FILE, INPUT_HASH_FILE, OUTPUT_HASH_FILE, load_experiment
from s4ecg.stats import PredictionSet
from s4ecg.util import derive_seeds

pytestmark = pytest.mark.unit

SYNTH = ["synth", "--n-records", "12", "--fs", "50", "--duration", "1", "--seed", "1"]


def synth(out) -> str:
    assert main(SYNTH + ["--out", str(out)]) == 0
    return str(out / "data" / "manifest.tsv")


class TestSynth:
    def test_writes_data_and_records_the_run(self, tmp_path) -> None:
        manifest = synth(tmp_path)

        assert os.path.exists(manifest)
        for name in (EXPERIMENT_FILE, INPUT_HASH_FILE, OUTPUT_HASH_FILE, "synth-50Hz.txt"):
            assert os.path.exists(tmp_path / name)
        assert load_experiment(str(tmp_path / EXPERIMENT_FILE)).seed == 1

    def test_same_seed_gives_the_same_output_hash(self, tmp_path, capsys) -> None:
        synth(tmp_path / "one")
        first = capsys.readouterr().out.strip()
        synth(tmp_path / "two")
        second = capsys.readouterr().out.strip()

        assert len(first) == 64
        assert first == second

    def test_one_directory_per_rate(self, tmp_path) -> None:
        args = ["synth", "--n-records", "4", "--fs", "50", "25", "--duration", "1", "--out", str(tmp_path)]

        assert main(args) == 0

        assert os.path.exists(tmp_path / "data-50Hz" / "manifest.tsv")
        assert os.path.exists(tmp_path / "data-25Hz" / "manifest.tsv")


class TestTrain:
    def test_configuration_reaches_the_runs(self, tmp_path) -> None:
        manifest = synth(tmp_path / "synth")
        args = ["train", "--data", manifest, "--runs", "2", "--min-count", "0", "--out", str(tmp_path / "run")]
        args += ["--set", "H=4", "--set", "depth=1", "--set", "epochs=3"]

        with patch("s4ecg.cli.train_runs", return_value=[]) as train_runs, patch(
            "s4ecg.cli.mean_macro_auc", return_value=0.5
        ):
            assert main(args) == 0

        dataset, model_config, train_config, seeds = train_runs.call_args[0]
        assert (model_config.H, model_config.depth, model_config.c_in) == (4, 1, 12)
        assert model_config.n_classes == len(dataset.vocabulary)
        assert train_config.epochs == 3
        assert seeds == derive_seeds(0, 2)
        assert os.path.exists(tmp_path / "run" / "model.txt")

    def test_unknown_override(self, tmp_path, capsys) -> None:
        manifest = synth(tmp_path / "synth")

        code = main(["train", "--data", manifest, "--set", "colour=red", "--out", str(tmp_path / "run")])

        assert code == 1
        assert "error: ConfigError:" in capsys.readouterr().err


class TestErrors:
    def test_missing_command_is_a_usage_error(self) -> None:
        assert main([]) == 2

    def test_unknown_option_is_a_usage_error(self, tmp_path) -> None:
        assert main(["synth", "--colour", "red", "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path, capsys) -> None:
        args = ["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path / "m.tsv")]

        code = main(args + ["--out", str(tmp_path / "out")])

        assert code == 1
        errors = [line for line in capsys.readouterr().err.splitlines() if line.startswith("error:")]
        assert len(errors) == 1
        assert errors[0].startswith("error: CheckpointError:")

    def test_missing_predictions(self, tmp_path, capsys) -> None:
        args = ["compare", "--a", str(tmp_path / "a.tsv"), "--b", str(tmp_path / "b.tsv"), "--out", str(tmp_path)]

        assert main(args) == 1
        assert "error: StatisticsError: Could not read" in capsys.readouterr().err


class TestEval:
    def test_statements_dropped_in_training_are_ignored(self, tmp_path) -> None:
        manifest = synth(tmp_path / "synth")
        table = read_table(manifest)
        table.loc[0, "labels"] += ",rare_code"
        write_table(table, manifest, comments=read_comments(manifest))
        vocabulary = filter_rare_labels(ingest(manifest), min_count=2).vocabulary
        checkpoint = str(tmp_path / "model.ckpt")
        config = ModelConfig(H=4, N=4, depth=1, c_in=12, n_classes=len(vocabulary), dropout=0.0)
        save_model(checkpoint, S4Classifier(config), {"codes": list(vocabulary.codes)})
        args = ["eval", "--checkpoint", checkpoint, "--data", manifest, "--folds"] + [str(f) for f in range(1, 11)]

        assert main(args + ["--window", "1", "--n-tta", "2", "--train-fs", "50", "--out", str(tmp_path / "eval")]) == 0

        predictions = PredictionSet.load(str(tmp_path / "eval" / "predictions.tsv"))
        assert "rare_code" not in predictions.codes
        assert predictions.codes == vocabulary.codes
        assert len(predictions.ids) == 12
