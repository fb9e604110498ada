"""Signal datasets: ingestion, label-balanced folds, rare-label filtering, metadata and crops.

A dataset is described by a manifest, a tab separated table with one record per line

    id  signal_path  fs  duration  labels  age  sex  height  weight  fold

where `labels` is a comma separated list of statement codes, empty demographic cells are missing
values and `fold` is optional. Signal files hold little-endian float32 samples, channel-major,
without a header.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from s4ecg.dataframe import read_comments, read_table, write_table
from s4ecg.errors import LabelError, ManifestError, MetadataError

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["id", "signal_path", "fs", "duration", "labels", "age", "sex", "height", "weight", "fold"]
META_COLUMNS = ["age", "sex", "height", "weight"]
SIGNAL_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered statement codes with their occurrence counts"""

    codes: Tuple[str, ...]
    counts: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.codes)) != len(self.codes):
            raise LabelError(f"Duplicate statement codes in {self.codes}")
        if not self.counts:
            object.__setattr__(self, "counts", (0,) * len(self.codes))

    def __len__(self) -> int:
        return len(self.codes)

    def index(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError as e:
            raise LabelError(f"Unknown statement code {code}") from e

    def encode(self, codes: Sequence[str]) -> np.ndarray:
        labels = np.zeros(len(self.codes), dtype=np.int8)
        for code in codes:
            labels[self.index(code)] = 1
        return labels

    def decode(self, labels: np.ndarray) -> List[str]:
        return [code for code, flag in zip(self.codes, labels) if flag]


@dataclass
class SignalRecord:
    """One recording.

    Attributes:
        id: record identifier
        signal: (C, L) float32 samples in millivolts
        fs: sampling frequency in Hz
        labels: multi-hot vector over the vocabulary
        meta: raw age, sex, height, weight with NaN for missing values
        fold: fold number starting at 1, None if not assigned yet
    """

    id: str
    signal: np.ndarray
    fs: float
    labels: np.ndarray
    meta: np.ndarray = field(default_factory=lambda: np.full(4, np.nan))
    fold: Optional[int] = None

    @property
    def length(self) -> int:
        return int(self.signal.shape[-1])

    @property
    def duration(self) -> float:
        return self.length / self.fs


@dataclass
class Dataset:
    records: List[SignalRecord]
    vocabulary: LabelVocabulary
    description: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SignalRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> SignalRecord:
        return self.records[index]

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    @property
    def folds(self) -> np.ndarray:
        return np.array([0 if r.fold is None else r.fold for r in self.records], dtype=int)

    def label_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, len(self.vocabulary)), dtype=np.int8)
        return np.stack([r.labels for r in self.records])

    def meta_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 4))
        return np.stack([r.meta for r in self.records]).astype(np.float64)

    def select(self, folds: Sequence[int]) -> "Dataset":
        """Records of the given folds"""
        wanted = set(folds)
        return Dataset([r for r in self.records if r.fold in wanted], self.vocabulary, list(self.description))

    def with_folds(self, folds: Sequence[int]) -> "Dataset":
        records = [dataclasses.replace(r, fold=int(f)) for r, f in zip(self.records, folds)]
        return Dataset(records, self.vocabulary, list(self.description))


def _parse_float(record_id: str, column: str, cell: str, required: bool) -> float:
    cell = cell.strip()
    if not cell:
        if required:
            raise ManifestError(record_id, f"missing value in column {column}")
        return float("nan")
    try:
        return float(cell)
    except ValueError as e:
        raise ManifestError(record_id, f"malformed value {cell!r} in column {column}") from e


def _samples(record_id: str, fs: float, duration: float) -> int:
    if not (fs > 0 and duration > 0):
        raise ManifestError(record_id, f"fs and duration must be positive, got {fs} and {duration}")
    length = int(round(fs * duration))
    if abs(fs * duration - length) > 1e-6 * max(1.0, fs * duration):
        raise ManifestError(record_id, f"duration {duration} s at {fs} Hz is not a whole number of samples")
    return length


def _parse_row(
    row: pd.Series, base_dir: str, vocabulary: Optional[LabelVocabulary], n_channels: int, drop_unknown: bool
) -> Tuple[SignalRecord, List[str]]:
    record_id = row["id"].strip()
    if not record_id:
        raise ManifestError("<empty>", "missing record id")
    fs = _parse_float(record_id, "fs", row["fs"], required=True)
    duration = _parse_float(record_id, "duration", row["duration"], required=True)
    length = _samples(record_id, fs, duration)

    codes = [c.strip() for c in row["labels"].split(",") if c.strip()]
    if vocabulary is not None:
        unknown = [c for c in codes if c not in vocabulary.codes]
        if unknown and not drop_unknown:
            raise ManifestError(record_id, f"unknown label codes {unknown}")
        if unknown:
            logger.warning("Record %s: dropping label codes %s outside the vocabulary", record_id, unknown)
            codes = [c for c in codes if c in vocabulary.codes]

    meta = np.array([_parse_float(record_id, c, row[c], required=False) for c in META_COLUMNS])
    if not np.isnan(meta[1]) and meta[1] not in (0.0, 1.0):
        raise ManifestError(record_id, f"sex must be 0 or 1, got {meta[1]}")

    fold_cell = row.get("fold", "").strip()
    try:
        fold = int(fold_cell) if fold_cell else None
    except ValueError as e:
        raise ManifestError(record_id, f"malformed fold {fold_cell!r}") from e
    if fold is not None and fold < 1:
        raise ManifestError(record_id, f"fold must be positive, got {fold}")

    path = row["signal_path"].strip()
    path = path if os.path.isabs(path) else os.path.join(base_dir, path)
    try:
        signal = np.fromfile(path, dtype=SIGNAL_DTYPE)
    except OSError as e:
        raise ManifestError(record_id, f"could not read signal file {path}") from e
    if signal.size != n_channels * length:
        raise ManifestError(
            record_id,
            f"signal has {signal.size} samples, expected {n_channels} x {length} for {duration} s at {fs} Hz",
        )
    signal = signal.reshape(n_channels, length).astype(np.float32)
    return SignalRecord(record_id, signal, fs, np.zeros(0, dtype=np.int8), meta, fold), codes


def ingest(
    path: str, vocabulary: Optional[LabelVocabulary] = None, n_channels: int = 12, drop_unknown: bool = False
) -> Dataset:
    """Reads and validates a manifest and its signal files.

    Args:
        path: manifest file; relative signal paths are resolved against its directory
        vocabulary: fixed vocabulary, unknown codes are rejected; by default the sorted set of all
            codes in the manifest
        n_channels: number of channels of every signal
        drop_unknown: with a fixed vocabulary, drop codes outside it with a warning instead of
            rejecting the record

    Returns:
        the dataset, with `#` comment lines of the manifest as its description

    Raises:
        ManifestError: naming the record for malformed rows, unknown codes or inconsistent signals
    """
    try:
        table = read_table(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ManifestError("<manifest>", f"could not read manifest {path}") from e
    missing = [c for c in MANIFEST_COLUMNS[:-1] if c not in table.columns]
    if missing:
        raise ManifestError("<manifest>", f"missing columns {missing} in {path}")

    base_dir = os.path.dirname(os.path.abspath(path))
    parsed = [_parse_row(row, base_dir, vocabulary, n_channels, drop_unknown) for _, row in table.iterrows()]
    ids = [record.id for record, _ in parsed]
    if len(set(ids)) != len(ids):
        duplicate = next(i for i in ids if ids.count(i) > 1)
        raise ManifestError(duplicate, "duplicate record id")

    if vocabulary is None:
        vocabulary = LabelVocabulary(tuple(sorted({c for _, codes in parsed for c in codes})))
    records = []
    for record, codes in parsed:
        record.labels = vocabulary.encode(codes)
        records.append(record)
    counts = np.stack([r.labels for r in records]).sum(axis=0) if records else np.zeros(len(vocabulary))
    vocabulary = LabelVocabulary(vocabulary.codes, tuple(int(c) for c in counts))
    logger.info("Ingested %d records with %d statements from %s", len(records), len(vocabulary), path)
    return Dataset(records, vocabulary, read_comments(path))


def export(dataset: Dataset, directory: str, manifest_name: str = "manifest.tsv") -> str:
    """Writes signal files and a manifest that `ingest` reads back bit-exactly.

    Returns:
        the manifest path
    """
    signal_dir = os.path.join(directory, "signals")
    os.makedirs(signal_dir, exist_ok=True)
    rows = []
    for record in dataset:
        file_name = f"{record.id}.f32"
        np.ascontiguousarray(record.signal, dtype=SIGNAL_DTYPE).tofile(os.path.join(signal_dir, file_name))
        rows.append(
            {
                "id": record.id,
                "signal_path": f"signals/{file_name}",
                "fs": repr(float(record.fs)),
                "duration": repr(record.length / record.fs),
                "labels": ",".join(dataset.vocabulary.decode(record.labels)),
                **{c: "" if np.isnan(v) else repr(float(v)) for c, v in zip(META_COLUMNS, record.meta)},
                "fold": "" if record.fold is None else str(record.fold),
            }
        )
    path = os.path.join(directory, manifest_name)
    write_table(pd.DataFrame(rows, columns=MANIFEST_COLUMNS), path, comments=dataset.description)
    logger.info("Exported %d records to %s", len(dataset), path)
    return path


def filter_rare_labels(dataset: Dataset, min_count: int = 10) -> Dataset:
    """Removes statements occurring fewer than `min_count` times in the full dataset.

    Records left without labels are kept.

    Raises:
        LabelError: if no statement remains
    """
    counts = dataset.label_matrix().sum(axis=0)
    keep = np.flatnonzero(counts >= min_count)
    if keep.size == 0:
        raise LabelError(f"No statement occurs at least {min_count} times")
    dropped = [dataset.vocabulary.codes[i] for i in np.flatnonzero(counts < min_count)]
    if dropped:
        logger.info("Removed %d rare statements: %s", len(dropped), dropped)
    vocabulary = LabelVocabulary(
        tuple(dataset.vocabulary.codes[i] for i in keep), tuple(int(counts[i]) for i in keep)
    )
    records = [dataclasses.replace(r, labels=r.labels[keep]) for r in dataset.records]
    return Dataset(records, vocabulary, list(dataset.description))


def assign_folds(dataset: Dataset, n_folds: int = 10, seed: int = 0) -> np.ndarray:
    """Label-balanced folds by iterative stratification.

    Folds provided by the manifest take precedence and are returned unchanged; only records
    without a fold are assigned. Their placement accounts for what the provided folds already
    hold. Records carrying the rarest remaining label are distributed first, each into the fold
    that still needs most examples of that label, ties broken by the overall remaining need and
    then at random. Label-free records fill the folds with the largest remaining need.

    Returns:
        fold numbers, one per record; assigned folds lie in 1..n_folds
    """
    provided = np.array([-1 if r.fold is None else r.fold - 1 for r in dataset.records], dtype=int)
    open_records = provided < 0
    if not open_records.any():
        logger.info("Using the folds provided by the manifest")
        return provided + 1

    rng = np.random.default_rng(seed)
    labels = dataset.label_matrix().astype(bool)
    n_records = len(dataset)
    desired_per_label = np.tile(labels.sum(axis=0) / n_folds, (n_folds, 1))
    desired_total = np.full(n_folds, n_records / n_folds)
    for code, count in zip(dataset.vocabulary.codes, labels.sum(axis=0)):
        if 0 < count < n_folds:
            logger.warning("Statement %s occurs %d times, too rare to cover all %d folds", code, count, n_folds)

    fixed = np.flatnonzero(~open_records & (provided < n_folds))
    for index in fixed:
        desired_per_label[provided[index], labels[index]] -= 1
        desired_total[provided[index]] -= 1
    if (~open_records).any():
        logger.info("Keeping %d folds provided by the manifest", int((~open_records).sum()))

    def place(index: int, candidates: np.ndarray) -> None:
        best = candidates[desired_total[candidates] == desired_total[candidates].max()]
        fold = best[0] if best.size == 1 else rng.choice(best)
        folds[index] = fold
        desired_per_label[fold, labels[index]] -= 1
        desired_total[fold] -= 1

    folds = provided.copy()
    remaining = labels & open_records[:, None]
    while remaining.any():
        counts = remaining.sum(axis=0)
        label = int(np.argmin(np.where(counts > 0, counts, np.iinfo(np.int64).max)))
        for index in np.flatnonzero(remaining[:, label]):
            need = desired_per_label[:, label]
            place(index, np.flatnonzero(need == need.max()))
            remaining[index] = False
    for index in np.flatnonzero(folds < 0):
        place(index, np.arange(n_folds))

    sizes = np.bincount(folds[open_records], minlength=n_folds)
    logger.info(
        "Assigned %d records to %d folds (sizes %d-%d)", int(open_records.sum()), n_folds, sizes.min(), sizes.max()
    )
    return folds + 1


def subsample_labels(dataset: Dataset, fraction: float, seed: int, folds: Sequence[int]) -> Dataset:
    """Keeps a seeded fraction of the labeled records of every given fold; other folds are untouched"""
    if not 0.0 < fraction <= 1.0:
        raise LabelError(f"Label fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep = np.ones(len(dataset), dtype=bool)
    fold_numbers = dataset.folds
    for fold in sorted(set(folds)):
        members = np.flatnonzero(fold_numbers == fold)
        if members.size == 0:
            continue
        n_keep = max(1, int(np.ceil(fraction * members.size)))
        dropped = rng.permutation(members)[n_keep:]
        keep[dropped] = False
    records = [r for r, k in zip(dataset.records, keep) if k]
    logger.info("Kept %d of %d records for label fraction %g", len(records), len(dataset), fraction)
    return Dataset(records, dataset.vocabulary, list(dataset.description))


@dataclass(frozen=True)
class MetaStats:
    """Medians for imputation and z-score statistics, computed on the training folds.

    Arrays are ordered age, sex, height, weight.
    """

    medians: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray) -> "MetaStats":
        """Statistics of raw (n, 4) training metadata with NaN for missing values"""
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, 4)
        for column, name in enumerate(META_COLUMNS):
            if np.all(np.isnan(raw[:, column])):
                raise MetadataError(f"Column {name} is missing for every training record")
        medians = np.nanmedian(raw, axis=0)
        means = np.nanmean(raw, axis=0)
        stds = np.nanstd(raw, axis=0)
        stds = np.where(stds > 0, stds, 1.0)
        return cls(medians, means, stds)

    def impute(self, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Raw values with missing entries replaced by the medians and the sex/height/weight flags"""
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, 4)
        missing = np.isnan(raw)
        if missing[:, 0].any():
            logger.warning("Imputed %d missing ages with the training median", int(missing[:, 0].sum()))
        values = np.where(missing, self.medians, raw)
        return values, missing[:, 1:].astype(np.float64)

    def transform(self, raw: np.ndarray) -> np.ndarray:
        """Seven features: standardized age, sex, standardized height and weight, three flags"""
        values, flags = self.impute(raw)
        features = np.empty((values.shape[0], 7))
        for column in (0, 2, 3):
            features[:, column] = (values[:, column] - self.means[column]) / self.stds[column]
        features[:, 1] = values[:, 1]
        features[:, 4:] = flags
        return features


def impute_metadata(dataset: Dataset, train_folds: Sequence[int]) -> Tuple[np.ndarray, MetaStats]:
    """Metadata features of every record using statistics of the training folds only.

    Returns:
        (n_records, 7) features and the statistics they were computed with
    """
    stats = MetaStats.fit(dataset.select(train_folds).meta_matrix())
    return stats.transform(dataset.meta_matrix()), stats


def window_samples(window_seconds: float, fs: float) -> int:
    return max(1, int(round(window_seconds * fs)))


@dataclass(frozen=True)
class Crop:
    values: np.ndarray
    start: int
    padded: bool


def _pad(signal: np.ndarray, width: int) -> np.ndarray:
    padded = np.zeros(signal.shape[:-1] + (width,), dtype=signal.dtype)
    padded[..., : signal.shape[-1]] = signal
    return padded


def random_crop(record: SignalRecord, window_seconds: float, rng: np.random.Generator) -> Crop:
    """A crop of round(window_seconds * fs) samples starting uniformly in [0, L - w].

    Records shorter than the window are zero-padded on the right.
    """
    width = window_samples(window_seconds, record.fs)
    length = record.length
    if length < width:
        logger.warning("Record %s is shorter than the window, zero-padding %d samples", record.id, width - length)
        return Crop(_pad(record.signal, width), 0, True)
    start = int(rng.integers(0, length - width + 1))
    return Crop(record.signal[..., start : start + width], start, False)


def tta_starts(length: int, width: int, n: int = 10) -> List[int]:
    """Starts round(i (L - w) / (n - 1)) for i = 0..n-1 with halves rounded up"""
    if n < 1:
        raise ValueError(f"Number of crops must be positive, got {n}")
    span = max(0, length - width)
    if n == 1:
        return [0]
    return [(2 * i * span + (n - 1)) // (2 * (n - 1)) for i in range(n)]


def tta_crops(record: SignalRecord, window_seconds: float, n: int = 10) -> List[np.ndarray]:
    """n equidistant overlapping crops covering the whole record"""
    width = window_samples(window_seconds, record.fs)
    signal = record.signal if record.length >= width else _pad(record.signal, width)
    return [signal[..., s : s + width] for s in tta_starts(signal.shape[-1], width, n)]
