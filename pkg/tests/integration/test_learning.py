from dataclasses import replace

import numpy as np
import pytest

from s4ecg.config import CpcConfig, ModelConfig, TrainConfig
from s4ecg.cpc import finetune, pretrain
from s4ecg.experiments import train_runs
from s4ecg.stats import PredictionSet, macro_auc
from s4ecg.synth import SynthSpec, band_power_scores, synth_generate
from s4ecg.train import evaluate

pytestmark = [pytest.mark.integration, pytest.mark.slow]

SEEDS = (0, 1, 2, 3, 4)


def test_small_model_learns_the_frequency_bands() -> None:
    dataset = synth_generate(SynthSpec("freq", n_records=800, fs=100.0, duration=5.0, n_channels=3), seed=0)
    model_config = ModelConfig(H=16, N=8, depth=2, n_classes=3, c_in=3, dropout=0.0)
    train_config = TrainConfig(batch_size=32, lr=1e-3, epochs=50)
    test = dataset.select(train_config.test_folds)
    oracle = PredictionSet(test.ids, band_power_scores(test), test.label_matrix(), test.vocabulary.codes)

    (predictions,) = train_runs(dataset, model_config, train_config, seeds=[0])

    assert macro_auc(oracle)[0] > 0.99
    assert macro_auc(predictions)[0] > 0.95


def test_pretraining_helps_with_few_labels(tmp_path) -> None:
    dataset = synth_generate(SynthSpec("ar", n_records=600, fs=100.0, duration=5.0, n_channels=3), seed=0)
    cpc_config = CpcConfig(
        width=16,
        depth=2,
        N=8,
        horizon=4,
        n_negatives=8,
        max_anchors=64,
        head_hidden=16,
        crop_seconds=2.5,
        dropout=0.0,
        c_in=3,
    )
    pretrain(dataset, cpc_config, TrainConfig(batch_size=32, lr=3e-3, epochs=10), output_dir=str(tmp_path))
    train_config = TrainConfig(batch_size=16, lr=3e-3, epochs=6, label_fraction=0.1)

    wins = 0
    for seed in SEEDS:
        config = replace(train_config, seed=seed)
        tuned = finetune(str(tmp_path / "backbone.ckpt"), dataset, config, head_only_epochs=4, full_epochs=2)
        pretrained = evaluate(tuned.model, dataset, config.test_folds, config.crop_seconds, n_tta=config.n_tta)
        (scratch,) = train_runs(dataset, cpc_config.backbone_config(n_classes=3), config, seeds=[seed])
        wins += macro_auc(pretrained)[0] > macro_auc(scratch)[0]

    assert wins >= 4


def test_metadata_fusion_helps_on_the_metadata_task() -> None:
    dataset = synth_generate(SynthSpec("meta", n_records=600, fs=50.0, duration=5.0, n_channels=3), seed=0)
    signal_only = ModelConfig(H=16, N=8, depth=1, n_classes=4, c_in=3, dropout=0.0, meta_hidden=16)
    fused = replace(signal_only, with_meta=True)
    train_config = TrainConfig(batch_size=32, lr=3e-3, epochs=15, fs=50.0)

    with_meta = train_runs(dataset, fused, train_config, SEEDS)
    without_meta = train_runs(dataset, signal_only, train_config, SEEDS)

    gains = np.array([macro_auc(a)[0] - macro_auc(b)[0] for a, b in zip(with_meta, without_meta)])
    assert np.sum(gains > 0.05) >= 4
