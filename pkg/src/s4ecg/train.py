"""Supervised multi-label training and test-time-augmented prediction"""

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from s4ecg.config import TrainConfig, to_dict
from s4ecg.data import Dataset, MetaStats, SignalRecord, impute_metadata, random_crop, subsample_labels, tta_crops
from s4ecg.dataframe import write_table
from s4ecg.errors import LabelError, ShapeError, StatisticsError
from s4ecg.functional import softplus
from s4ecg.model import S4Classifier, save_model
from s4ecg.nn import Parameter
from s4ecg.optim import AdamW
from s4ecg.stats import PredictionSet, macro_auc
from s4ecg.tensor import Tensor, as_tensor, get_default_dtype, no_grad

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "train_loss", "val_macro_auc", "wall_time"]


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy averaged over classes (and records), softplus(x) - y x per entry.

    Raises:
        LabelError: if a target is not 0 or 1
        ShapeError: if targets and logits differ in shape
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"Targets of shape {targets.shape} do not match logits of shape {logits.shape}")
    if np.any((targets != 0) & (targets != 1)):
        raise LabelError("Targets must be 0 or 1")
    return (softplus(logits) - logits * targets).mean()


@dataclass
class TrainResult:
    """A trained model with its per-epoch metrics and the best validation state"""

    model: S4Classifier
    metrics: pd.DataFrame
    best_epoch: int
    best_val_auc: float
    best_state: Dict[str, np.ndarray] = field(repr=False)
    meta_stats: Optional[MetaStats] = None


def _batch(signals: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack(signals).astype(get_default_dtype()))


def _meta_features(
    model: S4Classifier, dataset: Dataset, train_folds: Sequence[int]
) -> Tuple[np.ndarray, Optional[MetaStats]]:
    if model.meta_head is None:
        return np.zeros((len(dataset), 0)), None
    return impute_metadata(dataset, train_folds)


def meta_stats_to_dict(stats: Optional[MetaStats]) -> Optional[Dict[str, List[float]]]:
    if stats is None:
        return None
    return {"medians": stats.medians.tolist(), "means": stats.means.tolist(), "stds": stats.stds.tolist()}


def meta_stats_from_dict(values: Optional[Dict[str, List[float]]]) -> Optional[MetaStats]:
    if values is None:
        return None
    return MetaStats(np.array(values["medians"]), np.array(values["means"]), np.array(values["stds"]))


def predict_tta(
    model: S4Classifier,
    record: SignalRecord,
    window_seconds: float = 2.5,
    meta: Optional[np.ndarray] = None,
    n: int = 10,
) -> np.ndarray:
    """Mean of the sigmoid probabilities over n equidistant crops of the record"""
    return _predict_records(model, [record], window_seconds, None if meta is None else meta[None, :], n)[0]


def _predict_records(
    model: S4Classifier,
    records: Sequence[SignalRecord],
    window_seconds: float,
    meta: Optional[np.ndarray],
    n: int,
) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        crops = [c for record in records for c in tta_crops(record, window_seconds, n)]
        with no_grad():
            if model.meta_head is not None:
                if meta is None:
                    meta_batch = None
                else:
                    meta_batch = Tensor(np.repeat(np.asarray(meta), n, axis=0))
                logits = model.forward_with_meta(_batch(crops), meta_batch)
            else:
                logits = model.forward_signal(_batch(crops))
        probabilities = logits.sigmoid().values.astype(np.float64)
        return probabilities.reshape(len(records), n, -1).mean(axis=1)
    finally:
        model.train(was_training)


def predict_dataset(
    model: S4Classifier,
    dataset: Dataset,
    window_seconds: float = 2.5,
    meta_features: Optional[np.ndarray] = None,
    n_tta: int = 10,
    batch_records: int = 8,
    model_id: str = "",
    seed: int = 0,
) -> PredictionSet:
    """TTA predictions for every record, batching records whose crops share a shape"""
    def crop_shape(i: int) -> Tuple[int, float]:
        return dataset[i].signal.shape[0], dataset[i].fs

    probabilities: List[np.ndarray] = []
    start = 0
    while start < len(dataset):
        stop = start + 1
        while stop < len(dataset) and stop - start < batch_records and crop_shape(stop) == crop_shape(start):
            stop += 1
        meta = None if meta_features is None else meta_features[start:stop]
        probabilities.append(_predict_records(model, dataset.records[start:stop], window_seconds, meta, n_tta))
        start = stop
    n_classes = len(dataset.vocabulary)
    fs_values = {r.fs for r in dataset}
    return PredictionSet(
        tuple(dataset.ids),
        np.concatenate(probabilities) if probabilities else np.zeros((0, n_classes)),
        dataset.label_matrix(),
        dataset.vocabulary.codes,
        model_id=model_id,
        seed=seed,
        fs=fs_values.pop() if len(fs_values) == 1 else float("nan"),
    )


def evaluate(
    model: S4Classifier,
    dataset: Dataset,
    folds: Sequence[int],
    window_seconds: float = 2.5,
    meta_stats: Optional[MetaStats] = None,
    n_tta: int = 10,
    model_id: str = "",
    seed: int = 0,
) -> PredictionSet:
    """TTA predictions on the records of the given folds"""
    subset = dataset.select(folds)
    meta = meta_stats.transform(subset.meta_matrix()) if model.meta_head is not None and meta_stats else None
    return predict_dataset(model, subset, window_seconds, meta, n_tta, model_id=model_id, seed=seed)


def _validation_auc(
    model: S4Classifier, dataset: Dataset, index: np.ndarray, features: np.ndarray, config: TrainConfig
) -> float:
    if index.size == 0:
        return float("nan")
    subset = Dataset([dataset[i] for i in index], dataset.vocabulary)
    meta = features[index] if model.meta_head is not None else None
    predictions = predict_dataset(model, subset, config.crop_seconds, meta, config.n_tta)
    try:
        return macro_auc(predictions)[0]
    except StatisticsError:
        return float("nan")


def train_supervised(
    model: S4Classifier,
    dataset: Dataset,
    config: TrainConfig,
    output_dir: Optional[str] = None,
    parameters: Optional[Iterable[Tuple[str, Parameter]]] = None,
    epochs: Optional[int] = None,
    checkpoint_metadata: Optional[Dict] = None,
) -> TrainResult:
    """Trains on the training folds with random crops and AdamW, validating with TTA every epoch.

    Args:
        model: classifier to train in place
        dataset: dataset with assigned folds
        config: optimization settings
        output_dir: if given, receives metrics.tsv, final.ckpt and best.ckpt
        parameters: named parameters to optimize, by default all trainable ones
        epochs: overrides config.epochs
        checkpoint_metadata: extra metadata stored with the checkpoints

    Returns:
        the trained model, its metrics and the best validation state
    """
    if config.label_fraction < 1.0:
        dataset = subsample_labels(dataset, config.label_fraction, config.seed, config.train_folds)
    folds = dataset.folds
    train_index = np.flatnonzero(np.isin(folds, config.train_folds))
    val_index = np.flatnonzero(np.isin(folds, config.val_folds))
    if train_index.size == 0:
        raise LabelError(f"No records in the training folds {config.train_folds}")
    features, meta_stats = _meta_features(model, dataset, config.train_folds)
    labels = dataset.label_matrix()
    optimizer = AdamW(
        model.named_parameters() if parameters is None else parameters,
        lr=config.lr,
        betas=tuple(config.betas),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    n_epochs = config.epochs if epochs is None else epochs
    min_batch = 2 if model.meta_head is not None else 1

    rows = []
    best_epoch, best_auc, best_state = 0, float("-inf"), model.state_dict()
    for epoch in range(1, n_epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        model.set_rng(np.random.default_rng([config.seed, epoch, 1]))
        model.train()
        order = rng.permutation(train_index)
        losses = []
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            if batch.size < min_batch:
                continue
            x = _batch([random_crop(dataset[i], config.crop_seconds, rng).values for i in batch])
            optimizer.zero_grad()
            if model.meta_head is not None:
                logits = model.forward_with_meta(x, Tensor(features[batch]))
            else:
                logits = model.forward_signal(x)
            loss = bce_with_logits(logits, labels[batch])
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            logger.debug("epoch %d batch %d loss %.6f", epoch, start // config.batch_size, losses[-1])

        val_auc = _validation_auc(model, dataset, val_index, features, config)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_macro_auc": val_auc,
            "wall_time": time.perf_counter() - started,
        }
        rows.append(row)
        logger.info(
            "epoch %d train_loss %.5f val_macro_auc %.4f (%.1f s)",
            epoch,
            row["train_loss"],
            val_auc,
            row["wall_time"],
        )
        if not np.isnan(val_auc) and val_auc > best_auc:
            best_epoch, best_auc, best_state = epoch, val_auc, model.state_dict()

    metrics = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    result = TrainResult(model, metrics, best_epoch, best_auc if best_epoch else float("nan"), best_state, meta_stats)
    if output_dir is not None:
        save_training_outputs(result, config, output_dir, checkpoint_metadata)
    return result


def save_training_outputs(
    result: TrainResult, config: TrainConfig, output_dir: str, metadata: Optional[Dict] = None
) -> None:
    """Writes the metrics log and the final and best-validation checkpoints"""
    os.makedirs(output_dir, exist_ok=True)
    write_table(result.metrics, os.path.join(output_dir, "metrics.tsv"))
    common = {
        "train_config": to_dict(config),
        "meta_stats": meta_stats_to_dict(result.meta_stats),
        **(metadata or {}),
    }
    save_model(os.path.join(output_dir, "final.ckpt"), result.model, {**common, "epoch": len(result.metrics)})
    best = S4Classifier(result.model.config)
    best.load_state_dict(result.best_state)
    save_model(os.path.join(output_dir, "best.ckpt"), best, {**common, "epoch": result.best_epoch})
