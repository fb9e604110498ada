import numpy as np
import pytest
from scipy import special

from s4ecg.config import ModelConfig
from s4ecg.data import random_crop, tta_starts, window_samples
from s4ecg.model import S4Classifier
from s4ecg.synth import SynthSpec, synth_generate
from s4ecg.tensor import Tensor
from s4ecg.train import predict_dataset

pytestmark = pytest.mark.integration


def test_ten_crop_schedule_at_the_default_resolution() -> None:
    width = window_samples(2.5, 100.0)

    assert tta_starts(1000, width, 10) == [0, 83, 167, 250, 333, 417, 500, 583, 667, 750]


def test_tta_reduces_the_prediction_variance_on_stationary_signals() -> None:
    dataset = synth_generate(SynthSpec("noise", n_records=200, fs=100.0, duration=10.0, n_channels=12), seed=0)
    model = S4Classifier(ModelConfig(H=16, N=8, depth=2, n_classes=2, dropout=0.0), seed=0).eval()
    rng = np.random.default_rng(0)

    tta = predict_dataset(model, dataset, window_seconds=2.5, n_tta=10).probabilities
    crops = np.stack([random_crop(record, 2.5, rng).values for record in dataset])
    single = special.expit(model.forward_signal(Tensor(crops)).values)

    assert np.all(tta.var(axis=0) < single.var(axis=0))
