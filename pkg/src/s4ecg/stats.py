"""AUC, paired bootstrap comparisons and the multi-run significance rule.

Two models are compared on the same test records by resampling the records with replacement and
computing the per-label and macro AUC differences on every resample; a difference is significant
if its 95% bootstrap confidence interval excludes zero. Across n_runs trainings per model, all
n_runs^2 pairs are compared and a model is declared better (worse) if at least `threshold` of the
comparisons are significantly better (worse).

Labels without positives or without negatives in a resample are skipped in that iteration, both
per label and in the macro mean.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats as sp_stats

from s4ecg.dataframe import decode_vector, encode_vector, read_comments, read_table, write_table
from s4ecg.errors import StatisticsError
from s4ecg.util import derive_seeds

logger = logging.getLogger(__name__)

MACRO = "macro"


@dataclass(frozen=True)
class PredictionSet:
    """Per-record class probabilities and targets of one model on one test set.

    Attributes:
        ids: record ids
        probabilities: (n_records, n_classes) values in [0, 1]
        targets: (n_records, n_classes) multi-hot targets
        codes: statement codes of the columns
        model_id: free-form model identifier
        seed: seed of the run that produced the model
        fs: sampling rate of the test signals in Hz
    """

    ids: Tuple[str, ...]
    probabilities: np.ndarray
    targets: np.ndarray
    codes: Tuple[str, ...]
    model_id: str = ""
    seed: int = 0
    fs: float = float("nan")

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "codes", tuple(self.codes))
        probabilities = np.asarray(self.probabilities, dtype=np.float64)
        targets = np.asarray(self.targets).astype(np.int8)
        expected = (len(self.ids), len(self.codes))
        if probabilities.shape != expected or targets.shape != expected:
            raise StatisticsError(
                f"Expected probabilities and targets of shape {expected}, "
                f"got {probabilities.shape} and {targets.shape}"
            )
        if np.any(~np.isfinite(probabilities)) or np.any((probabilities < 0) | (probabilities > 1)):
            raise StatisticsError("Probabilities must lie in [0, 1]")
        if np.any((targets != 0) & (targets != 1)):
            raise StatisticsError("Targets must be 0 or 1")
        object.__setattr__(self, "probabilities", probabilities)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return len(self.ids)

    def aligned_to(self, ids: Sequence[str]) -> "PredictionSet":
        """The same predictions in the order of `ids`"""
        if tuple(ids) == self.ids:
            return self
        if sorted(ids) != sorted(self.ids):
            raise StatisticsError("Prediction sets cover different record ids")
        position = {record_id: i for i, record_id in enumerate(self.ids)}
        order = [position[i] for i in ids]
        return PredictionSet(
            tuple(ids), self.probabilities[order], self.targets[order], self.codes, self.model_id, self.seed, self.fs
        )

    def save(self, path: str) -> None:
        df = pd.DataFrame(
            {
                "id": list(self.ids),
                "targets": [encode_vector(t, integer=True) for t in self.targets],
                "probabilities": [encode_vector(p) for p in self.probabilities],
            }
        )
        comments = [
            f"model_id: {self.model_id}",
            f"seed: {self.seed}",
            f"fs: {self.fs!r}",
            f"codes: {','.join(self.codes)}",
        ]
        write_table(df, path, comments=comments)

    @classmethod
    def load(cls, path: str) -> "PredictionSet":
        try:
            comments = dict(c.split(": ", 1) for c in read_comments(path) if ": " in c)
            df = read_table(path)
            codes = tuple(c for c in comments.get("codes", "").split(",") if c)
            n_classes = len(codes)
            targets = [decode_vector(v, np.int8) for v in df["targets"]]
            probabilities = [decode_vector(v) for v in df["probabilities"]]
            return cls(
                tuple(df["id"]),
                np.array(probabilities).reshape(-1, n_classes),
                np.array(targets).reshape(-1, n_classes),
                codes,
                comments.get("model_id", ""),
                int(comments.get("seed", 0)),
                float(comments.get("fs", "nan")),
            )
        except (OSError, KeyError, ValueError) as e:
            if isinstance(e, StatisticsError):
                raise
            raise StatisticsError(f"Could not read the prediction set {path}.") from e


def _auc_columns(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Mann-Whitney AUC per column, NaN where a column has a single class"""
    n = scores.shape[0]
    positives = targets.sum(axis=0).astype(np.int64)
    negatives = n - positives
    doubled_ranks = np.rint(2.0 * sp_stats.rankdata(scores, axis=0)).astype(np.int64)
    doubled_u = (doubled_ranks * targets).sum(axis=0) - positives * (positives + 1)
    valid = (positives > 0) & (negatives > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        result = doubled_u / (2.0 * positives * negatives)
    return np.where(valid, result, np.nan)


def auc(scores: Sequence[float], targets: Sequence[int]) -> float:
    """Area under the ROC curve, (#concordant pairs + 0.5 #ties) / (#pos #neg).

    Raises:
        StatisticsError: if the targets contain a single class
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1, 1)
    targets = np.asarray(targets).astype(np.int64).reshape(-1, 1)
    if scores.shape != targets.shape:
        raise StatisticsError(f"{scores.shape[0]} scores for {targets.shape[0]} targets")
    value = _auc_columns(scores, targets)[0]
    if np.isnan(value):
        raise StatisticsError("AUC is undefined for targets with a single class")
    return float(value)


def macro_auc(pred: PredictionSet) -> Tuple[float, np.ndarray]:
    """Unweighted mean of the per-label AUCs over labels with both classes present.

    Returns:
        the macro AUC and the per-label AUCs, NaN for excluded labels
    """
    per_label = _auc_columns(pred.probabilities, pred.targets.astype(np.int64))
    degenerate = [code for code, v in zip(pred.codes, per_label) if np.isnan(v)]
    if degenerate:
        logger.warning("Excluded labels with a single class from the macro AUC: %s", degenerate)
    if np.all(np.isnan(per_label)):
        raise StatisticsError("No label has both positive and negative records")
    return float(np.mean(per_label[~np.isnan(per_label)])), per_label


def _order_statistics(values: np.ndarray) -> Dict[str, float]:
    """Median, quartiles and 95% interval from order statistics symmetric under negation"""
    values = np.sort(values[~np.isnan(values)])
    m = values.size
    if m == 0:
        return {k: float("nan") for k in ("median", "q25", "q75", "ci_low", "ci_high")}
    k_ci = int(np.floor(0.025 * (m - 1)))
    k_q = int(np.floor(0.25 * (m - 1)))
    half = m // 2
    median = values[half] if m % 2 else (values[half - 1] + values[half]) / 2.0
    return {
        "median": float(median),
        "q25": float(values[k_q]),
        "q75": float(values[m - 1 - k_q]),
        "ci_low": float(values[k_ci]),
        "ci_high": float(values[m - 1 - k_ci]),
    }


@dataclass(frozen=True)
class DifferenceStats:
    """Bootstrap distribution summary of an AUC difference (a - b)"""

    median: float
    q25: float
    q75: float
    ci_low: float
    ci_high: float
    n_valid: int

    @property
    def better(self) -> bool:
        return self.ci_low > 0

    @property
    def worse(self) -> bool:
        return self.ci_high < 0

    @property
    def significant(self) -> bool:
        return self.better or self.worse

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "DifferenceStats":
        return cls(n_valid=int(np.sum(~np.isnan(samples))), **_order_statistics(samples))


@dataclass(frozen=True)
class BootstrapReport:
    """Paired bootstrap comparison of model a against model b"""

    codes: Tuple[str, ...]
    per_label: Tuple[DifferenceStats, ...]
    macro: DifferenceStats
    macro_a: float
    macro_b: float
    n_iter: int
    seed: int

    @property
    def significant(self) -> bool:
        return self.macro.significant

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name, s in list(zip(self.codes, self.per_label)) + [(MACRO, self.macro)]:
            rows.append(
                {
                    "label": name,
                    "median": s.median,
                    "q25": s.q25,
                    "q75": s.q75,
                    "ci_low": s.ci_low,
                    "ci_high": s.ci_high,
                    "n_valid": s.n_valid,
                    "significant": s.significant,
                    "direction": "+" if s.better else "-" if s.worse else "",
                }
            )
        return pd.DataFrame(rows)

    def save(self, path: str) -> None:
        comments = [
            "bootstrap AUC differences (a - b), 95% interval from empirical 2.5/97.5 percentiles",
            "labels with a single class in a resample are skipped in that iteration",
            f"n_iter: {self.n_iter}",
            f"seed: {self.seed}",
            f"macro_auc_a: {self.macro_a!r}",
            f"macro_auc_b: {self.macro_b!r}",
            f"significant: {self.significant}",
        ]
        write_table(self.to_frame(), path, comments=comments)


def _check_paired(a: PredictionSet, b: PredictionSet) -> PredictionSet:
    if a.codes != b.codes:
        raise StatisticsError(f"Prediction sets have different labels {a.codes} and {b.codes}")
    try:
        b = b.aligned_to(a.ids)
    except StatisticsError as e:
        raise StatisticsError("Prediction sets cover different record ids") from e
    if not np.array_equal(a.targets, b.targets):
        raise StatisticsError("Prediction sets have different targets")
    return b


def bootstrap_compare(a: PredictionSet, b: PredictionSet, n_iter: int = 1000, seed: int = 0) -> BootstrapReport:
    """Paired bootstrap of the per-label and macro AUC differences a - b.

    Every iteration draws one resample of the records (with replacement) that is applied to both
    prediction sets.

    Raises:
        StatisticsError: if ids, labels or targets do not match
    """
    if n_iter < 1:
        raise StatisticsError(f"n_iter must be positive, got {n_iter}")
    b = _check_paired(a, b)
    n = len(a)
    if n == 0:
        raise StatisticsError("Cannot bootstrap an empty prediction set")
    rng = np.random.default_rng(seed)
    targets = a.targets.astype(np.int64)
    label_diffs = np.full((n_iter, len(a.codes)), np.nan)
    macro_diffs = np.full(n_iter, np.nan)
    for i in range(n_iter):
        index = rng.integers(0, n, n)
        auc_a = _auc_columns(a.probabilities[index], targets[index])
        auc_b = _auc_columns(b.probabilities[index], targets[index])
        valid = ~np.isnan(auc_a)
        label_diffs[i] = auc_a - auc_b
        if valid.any():
            macro_diffs[i] = np.mean(auc_a[valid]) - np.mean(auc_b[valid])

    report = BootstrapReport(
        codes=a.codes,
        per_label=tuple(DifferenceStats.from_samples(label_diffs[:, j]) for j in range(len(a.codes))),
        macro=DifferenceStats.from_samples(macro_diffs),
        macro_a=macro_auc(a)[0],
        macro_b=macro_auc(b)[0],
        n_iter=n_iter,
        seed=seed,
    )
    logger.debug(
        "Bootstrap macro difference %.4f [%.4f, %.4f]", report.macro.median, report.macro.ci_low, report.macro.ci_high
    )
    return report


@dataclass(frozen=True)
class LabelVerdict:
    """Outcome of the n_runs^2 comparisons for one label or the macro AUC"""

    label: str
    verdict: str
    n_better: int
    n_worse: int
    n_comparisons: int
    median: float
    q25: float
    q75: float
    std: float

    @property
    def marker(self) -> str:
        return {"better": "+", "worse": "-"}.get(self.verdict, "")


@dataclass(frozen=True)
class MultiRunVerdict:
    labels: Tuple[LabelVerdict, ...]
    macro: LabelVerdict
    threshold: float
    reports: Tuple[BootstrapReport, ...] = field(repr=False, default=())

    def to_frame(self) -> pd.DataFrame:
        rows = [vars(v) | {"marker": v.marker} for v in self.labels + (self.macro,)]
        return pd.DataFrame(rows)

    def save(self, path: str) -> None:
        comments = [
            f"threshold: {self.threshold}",
            f"comparisons: {self.macro.n_comparisons}",
            "median/q25/q75/std over the per-comparison median AUC differences (a - b)",
        ]
        write_table(self.to_frame(), path, comments=comments)

    def save_reports(self, directory: str, n_runs_b: int) -> List[str]:
        """Writes every pairwise report as pair-<run a>-<run b>.tsv

        Returns:
            the written paths, in comparison order
        """
        paths = []
        for index, report in enumerate(self.reports):
            run_a, run_b = divmod(index, n_runs_b)
            path = os.path.join(directory, f"pair-{run_a:02d}-{run_b:02d}.tsv")
            report.save(path)
            paths.append(path)
        return paths


def _verdict(name: str, stats: Sequence[DifferenceStats], threshold: float) -> LabelVerdict:
    n = len(stats)
    n_better = sum(s.better for s in stats)
    n_worse = sum(s.worse for s in stats)
    if n_better >= threshold * n and n_better > n_worse:
        verdict = "better"
    elif n_worse >= threshold * n and n_worse > n_better:
        verdict = "worse"
    else:
        verdict = "none"
    medians = np.array([s.median for s in stats])
    summary = _order_statistics(medians)
    valid = medians[~np.isnan(medians)]
    return LabelVerdict(
        name,
        verdict,
        int(n_better),
        int(n_worse),
        n,
        summary["median"],
        summary["q25"],
        summary["q75"],
        float(np.std(valid)) if valid.size else float("nan"),
    )


def verdict_from_reports(reports: Sequence[BootstrapReport], threshold: float = 0.6) -> MultiRunVerdict:
    """Applies the threshold rule to already computed pairwise reports"""
    if not 0.4 < threshold <= 1.0:
        raise StatisticsError(f"Threshold must lie in (0.4, 1], got {threshold}")
    if not reports:
        raise StatisticsError("No comparisons to aggregate")
    codes = reports[0].codes
    labels = tuple(_verdict(code, [r.per_label[j] for r in reports], threshold) for j, code in enumerate(codes))
    macro = _verdict(MACRO, [r.macro for r in reports], threshold)
    return MultiRunVerdict(labels, macro, threshold, tuple(reports))


def _compare_pair(args: Tuple[PredictionSet, PredictionSet, int, int]) -> BootstrapReport:
    a, b, n_iter, seed = args
    return bootstrap_compare(a, b, n_iter=n_iter, seed=seed)


def multi_run_verdict(
    runs_a: Sequence[PredictionSet],
    runs_b: Sequence[PredictionSet],
    threshold: float = 0.6,
    n_iter: int = 1000,
    seed: int = 0,
    jobs: int = 1,
    executor: Optional[ProcessPoolExecutor] = None,
) -> MultiRunVerdict:
    """Compares every run of model a with every run of model b.

    Model a is better (worse) for a label if at least `threshold` of the comparisons are
    significantly better (worse).

    Raises:
        StatisticsError: if the threshold is not above 0.4 or a pair cannot be compared
    """
    if not 0.4 < threshold <= 1.0:
        raise StatisticsError(f"Threshold must lie in (0.4, 1], got {threshold}")
    if not runs_a or not runs_b:
        raise StatisticsError("Both models need at least one run")
    pairs = [(a, b) for a in runs_a for b in runs_b]
    tasks = [(a, b, n_iter, s) for (a, b), s in zip(pairs, derive_seeds(seed, len(pairs)))]
    if jobs > 1 or executor is not None:
        pool = executor or ProcessPoolExecutor(max_workers=jobs)
        try:
            reports = list(pool.map(_compare_pair, tasks))
        finally:
            if executor is None:
                pool.shutdown()
    else:
        reports = [_compare_pair(t) for t in tasks]
    result = verdict_from_reports(reports, threshold)
    logger.info(
        "Macro AUC verdict over %d comparisons: %s (%d better, %d worse)",
        len(reports),
        result.macro.verdict,
        result.macro.n_better,
        result.macro.n_worse,
    )
    return result
