"""Multi-seed training runs, cross-sampling-rate evaluation and the input size sweep"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from s4ecg.config import ModelConfig, TrainConfig
from s4ecg.data import Dataset, MetaStats
from s4ecg.dataframe import write_table
from s4ecg.errors import ConfigError, StatisticsError
from s4ecg.model import S4Classifier
from s4ecg.stats import MultiRunVerdict, PredictionSet, macro_auc, multi_run_verdict
from s4ecg.train import evaluate, train_supervised

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["window_seconds", "seed", "val_macro_auc", "test_macro_auc"]


def _safe_macro_auc(predictions: PredictionSet) -> float:
    try:
        return macro_auc(predictions)[0]
    except StatisticsError:
        return float("nan")


@dataclass(frozen=True)
class RunSpec:
    """One supervised training run of a multi-seed experiment"""

    model_config: ModelConfig
    train_config: TrainConfig
    model_id: str
    output_dir: Optional[str] = None


def _train_and_predict(args: Tuple[RunSpec, Dataset]) -> Tuple[PredictionSet, float]:
    run, dataset = args
    model = S4Classifier(run.model_config, seed=run.train_config.seed)
    result = train_supervised(
        model,
        dataset,
        run.train_config,
        output_dir=run.output_dir,
        checkpoint_metadata={"codes": list(dataset.vocabulary.codes), "model_id": run.model_id},
    )
    predictions = evaluate(
        result.model,
        dataset,
        run.train_config.test_folds,
        run.train_config.crop_seconds,
        result.meta_stats,
        run.train_config.n_tta,
        model_id=run.model_id,
        seed=run.train_config.seed,
    )
    if run.output_dir is not None:
        predictions.save(os.path.join(run.output_dir, "predictions.tsv"))
    return predictions, result.best_val_auc


def train_runs(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int],
    model_id: str = "model",
    output_dir: Optional[str] = None,
    jobs: int = 1,
) -> List[PredictionSet]:
    """Trains one model per seed and returns their TTA test predictions in seed order.

    With `jobs` > 1, runs are trained in worker processes; every run is fully determined by its
    seed, so the results do not depend on the number of workers.
    """
    runs = [
        RunSpec(
            model_config,
            replace(train_config, seed=seed),
            model_id,
            None if output_dir is None else os.path.join(output_dir, f"run-{index:02d}"),
        )
        for index, seed in enumerate(seeds)
    ]
    tasks = [(run, dataset) for run in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_train_and_predict, tasks))
    else:
        outcomes = [_train_and_predict(task) for task in tasks]
    for run, (predictions, _) in zip(runs, outcomes):
        logger.info(
            "%s seed %d test macro AUC %.4f", model_id, run.train_config.seed, _safe_macro_auc(predictions)
        )
    return [predictions for predictions, _ in outcomes]


def _check_rescalable(model: S4Classifier) -> None:
    if not model.backbone.s4_layers():
        raise ConfigError("The model has no state space layers whose step size could be rescaled")


def cross_rate_eval(
    model: S4Classifier,
    datasets: Mapping[float, Dataset],
    train_rate: float,
    folds: Sequence[int],
    window_seconds: float = 2.5,
    meta_stats: Optional[MetaStats] = None,
    n_tta: int = 10,
    model_id: str = "",
    seed: int = 0,
) -> Dict[float, PredictionSet]:
    """Evaluates a model trained at `train_rate` on test sets sampled at other rates.

    For every test rate the step sizes are rescaled by train_rate / test_rate; signals are used
    at their native rate and crop windows keep their physical length. The model's step sizes
    are restored afterwards.

    Args:
        model: trained classifier
        datasets: test datasets keyed by their sampling rate in Hz
        train_rate: sampling rate the model was trained at
        folds: folds to evaluate
        window_seconds: TTA crop length in seconds
        meta_stats: metadata statistics of the training folds, for models with a meta head
        n_tta: crops per record

    Returns:
        predictions keyed by test rate

    Raises:
        ConfigError: if the model has no state space layers
    """
    _check_rescalable(model)
    results = {}
    try:
        for rate, dataset in datasets.items():
            model.rescale_steps(train_rate, rate)
            results[rate] = evaluate(model, dataset, folds, window_seconds, meta_stats, n_tta, model_id, seed)
            logger.info(
                "Trained at %g Hz, tested at %g Hz: macro AUC %.4f", train_rate, rate, _safe_macro_auc(results[rate])
            )
    finally:
        model.rescale_steps(1.0, 1.0)
    return results


@dataclass(frozen=True)
class TrainedModel:
    """A trained classifier together with the rate and metadata statistics it was trained with"""

    name: str
    model: S4Classifier
    train_rate: float
    meta_stats: Optional[MetaStats] = None


def cross_rate_matrix(
    models: Sequence[TrainedModel],
    datasets: Mapping[float, Dataset],
    folds: Sequence[int],
    window_seconds: float = 2.5,
    n_tta: int = 10,
) -> Tuple[pd.DataFrame, Dict[str, Dict[float, PredictionSet]]]:
    """Macro AUC of every model at every test rate.

    Returns:
        a table with one row per model and one `test_<rate>Hz` column per test rate, and the
        predictions by model name and test rate
    """
    rows = []
    predictions = {}
    for entry in models:
        by_rate = cross_rate_eval(
            entry.model, datasets, entry.train_rate, folds, window_seconds, entry.meta_stats, n_tta, model_id=entry.name
        )
        predictions[entry.name] = by_rate
        row = {"model": entry.name, "train_fs": entry.train_rate}
        row.update({f"test_{rate:g}Hz": _safe_macro_auc(p) for rate, p in by_rate.items()})
        rows.append(row)
    return pd.DataFrame(rows), predictions


def compare_rates(
    runs_a: Sequence[PredictionSet],
    runs_b: Sequence[PredictionSet],
    threshold: float = 0.6,
    n_iter: int = 1000,
    seed: int = 0,
    jobs: int = 1,
) -> MultiRunVerdict:
    """Multi-run significance of evaluations of the same runs at two test rates.

    Records are matched by id, so both sides must be generated or recorded from the same
    underlying recordings.
    """
    aligned_b = [b.aligned_to(a.ids) for a, b in zip(runs_a, runs_b)]
    return multi_run_verdict(runs_a, aligned_b, threshold=threshold, n_iter=n_iter, seed=seed, jobs=jobs)


def input_size_sweep(
    dataset: Dataset,
    windows: Sequence[float],
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = (0,),
    output_dir: Optional[str] = None,
) -> pd.DataFrame:
    """Trains one model per window (and seed) with crops of that physical length.

    Validation and test AUCs use TTA with the same window. Windows longer than a record zero-pad
    it.

    Returns:
        one row per (window, seed) with columns `CURVE_COLUMNS`

    Raises:
        ConfigError: if there are no windows or a window is longer than every record
    """
    if not windows:
        raise ConfigError("The sweep needs at least one window")
    longest = max(record.duration for record in dataset)
    for window in windows:
        if window <= 0 or window > longest + 1e-9:
            raise ConfigError(f"Window of {window} s exceeds every record (longest {longest} s)")
    rows = []
    for window in windows:
        for seed in seeds:
            config = replace(train_config, crop_seconds=float(window), seed=seed)
            model = S4Classifier(model_config, seed=seed)
            run_dir = None if output_dir is None else os.path.join(output_dir, f"window-{window:g}s-seed-{seed}")
            result = train_supervised(model, dataset, config, output_dir=run_dir)
            test = evaluate(result.model, dataset, config.test_folds, window, result.meta_stats, config.n_tta)
            rows.append(
                {
                    "window_seconds": float(window),
                    "seed": seed,
                    "val_macro_auc": result.best_val_auc,
                    "test_macro_auc": _safe_macro_auc(test),
                }
            )
            logger.info("Window %g s seed %d: test macro AUC %.4f", window, seed, rows[-1]["test_macro_auc"])
    curve = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    if output_dir is not None:
        save_curve(curve, os.path.join(output_dir, "curve.tsv"))
    return curve


def summarize_curve(curve: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of the test macro AUC per window"""
    grouped = curve.groupby("window_seconds")["test_macro_auc"]
    return pd.DataFrame({"mean": grouped.mean(), "std": grouped.std(ddof=0)}).reset_index()


def save_curve(curve: pd.DataFrame, path: str) -> None:
    write_table(curve, path, comments=["macro AUC versus physical input size"])


def mean_macro_auc(runs: Sequence[PredictionSet]) -> float:
    return float(np.nanmean([_safe_macro_auc(p) for p in runs]))
