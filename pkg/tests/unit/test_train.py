import os

import numpy as np
import pytest
from scipy import special

from s4ecg.config import ModelConfig, TrainConfig
from s4ecg.data import Dataset, MetaStats, tta_crops
from s4ecg.errors import LabelError, ShapeError
from s4ecg.model import S4Classifier, load_model
from s4ecg.tensor import Tensor
from s4ecg.train import (
    METRICS_COLUMNS,
    bce_with_logits,
    evaluate,
    meta_stats_from_dict,
    meta_stats_to_dict,
    predict_dataset,
    predict_tta,
    train_supervised,
)

pytestmark = pytest.mark.unit


def small_model(with_meta: bool = False, seed: int = 0) -> S4Classifier:
    config = ModelConfig(H=4, N=4, depth=1, n_classes=3, c_in=3, dropout=0.0, with_meta=with_meta, meta_hidden=4)
    return S4Classifier(config, seed=seed)


def small_train_config(**overrides) -> TrainConfig:
    values = dict(batch_size=8, epochs=2, crop_seconds=1.0, fs=50.0, n_tta=2, lr=1e-2)
    values.update(overrides)
    return TrainConfig(**values)


class TestLoss:
    def test_matches_the_closed_form(self) -> None:
        logits = np.array([[-2.0, 0.0, 3.0], [1.0, -1.0, 0.5]])
        targets = np.array([[0, 1, 1], [1, 0, 0]])

        loss = bce_with_logits(Tensor(logits), targets).item()

        expected = -np.mean(targets * np.log(special.expit(logits)) + (1 - targets) * np.log(special.expit(-logits)))
        assert loss == pytest.approx(expected)

    def test_gradient_is_the_sigmoid_residual(self) -> None:
        logits = Tensor(np.array([[-2.0, 0.0], [1.0, 4.0]]), requires_grad=True)
        targets = np.array([[0, 1], [1, 1]])

        bce_with_logits(logits, targets).backward()

        np.testing.assert_allclose(logits.grad, (special.expit(logits.values) - targets) / 4.0)

    def test_stable_for_large_logits(self) -> None:
        assert bce_with_logits(Tensor([[1000.0, -1000.0]]), np.array([[1, 0]])).item() == pytest.approx(0.0)

    def test_invalid_targets(self) -> None:
        with pytest.raises(LabelError):
            bce_with_logits(Tensor([[0.0]]), np.array([[0.5]]))
        with pytest.raises(ShapeError):
            bce_with_logits(Tensor([[0.0, 1.0]]), np.array([[1]]))


class TestPrediction:
    def test_tta_averages_the_crop_probabilities(self, tiny_dataset: Dataset) -> None:
        model = small_model()
        record = tiny_dataset[0]

        probabilities = predict_tta(model, record, window_seconds=1.0, n=3)

        crops = tta_crops(record, 1.0, 3)
        expected = np.mean([special.expit(model.eval().forward_signal(Tensor(c)).values) for c in crops], axis=0)
        np.testing.assert_allclose(probabilities, expected, atol=1e-12)

    def test_prediction_restores_the_training_mode(self, tiny_dataset: Dataset) -> None:
        model = small_model()

        predict_tta(model, tiny_dataset[0], window_seconds=1.0, n=2)

        assert model.training

    def test_batching_does_not_change_predictions(self, tiny_dataset: Dataset) -> None:
        model = small_model()
        subset = Dataset(tiny_dataset.records[:5], tiny_dataset.vocabulary)

        batched = predict_dataset(model, subset, 1.0, n_tta=2, batch_records=4)
        single = predict_dataset(model, subset, 1.0, n_tta=2, batch_records=1)

        np.testing.assert_allclose(batched.probabilities, single.probabilities, atol=1e-12)
        assert batched.ids == tuple(subset.ids)
        assert batched.fs == 50.0

    def test_evaluate_selects_folds(self, tiny_dataset: Dataset) -> None:
        predictions = evaluate(small_model(), tiny_dataset, [10], window_seconds=1.0, n_tta=2, model_id="m", seed=4)

        assert len(predictions) == int(np.sum(tiny_dataset.folds == 10))
        assert (predictions.model_id, predictions.seed) == ("m", 4)


class TestTraining:
    def test_outputs_and_metrics(self, tmp_path, tiny_dataset: Dataset) -> None:
        result = train_supervised(small_model(), tiny_dataset, small_train_config(), output_dir=str(tmp_path))

        assert list(result.metrics.columns) == METRICS_COLUMNS
        assert result.metrics["epoch"].tolist() == [1, 2]
        assert np.all(np.isfinite(result.metrics["train_loss"]))
        for name in ("metrics.tsv", "final.ckpt", "best.ckpt"):
            assert os.path.exists(tmp_path / name)
        _, metadata = load_model(str(tmp_path / "final.ckpt"))
        assert metadata["epoch"] == 2
        assert metadata["train_config"]["crop_seconds"] == 1.0

    def test_training_is_reproducible(self, tiny_dataset: Dataset) -> None:
        first = train_supervised(small_model(), tiny_dataset, small_train_config())
        second = train_supervised(small_model(), tiny_dataset, small_train_config())

        np.testing.assert_array_equal(first.metrics["train_loss"], second.metrics["train_loss"])
        for name, values in first.model.state_dict().items():
            np.testing.assert_array_equal(second.model.state_dict()[name], values)

    def test_parameters_outside_the_optimizer_stay_fixed(self, tiny_dataset: Dataset) -> None:
        model = small_model()
        backbone = {k: v for k, v in model.state_dict().items() if k.startswith("backbone.")}
        model.backbone.freeze()

        classifier = model.classifier.named_parameters("classifier.")

        train_supervised(model, tiny_dataset, small_train_config(epochs=1), parameters=classifier)

        for name, values in backbone.items():
            np.testing.assert_array_equal(model.state_dict()[name], values)

    def test_training_with_metadata(self, tiny_dataset: Dataset) -> None:
        result = train_supervised(small_model(with_meta=True), tiny_dataset, small_train_config(epochs=1))

        assert isinstance(result.meta_stats, MetaStats)
        assert len(result.metrics) == 1

    def test_empty_training_folds(self, tiny_dataset: Dataset) -> None:
        with pytest.raises(LabelError):
            train_supervised(small_model(), tiny_dataset, small_train_config(train_folds=(42,)))

    def test_zero_epochs_with_a_label_fraction(self, tiny_dataset: Dataset) -> None:
        result = train_supervised(small_model(), tiny_dataset, small_train_config(epochs=0, label_fraction=0.1))

        assert len(result.metrics) == 0
        assert np.isnan(result.best_val_auc)


def test_meta_stats_dictionary_round_trip() -> None:
    stats = MetaStats(np.array([60.0, 1.0, 170.0, 75.0]), np.array([58.0, 0.5, 171.0, 76.0]), np.ones(4))

    restored = meta_stats_from_dict(meta_stats_to_dict(stats))

    np.testing.assert_array_equal(restored.medians, stats.medians)
    assert meta_stats_from_dict(None) is None
    assert meta_stats_to_dict(None) is None
