"""Reproducible synthetic 12-channel datasets with known label generators.

Tasks:
    freq   one label per record, the band of the dominant frequency: 0.5-2, 3-5 or 6-9 Hz
    ar     one label per record, the pole angle class of an AR(2) process
    meta   the freq labels plus a fourth label that equals the sex with probability `strength`
           and is a fair coin otherwise
    pulse  one label per record, the rate class of a Gaussian pulse train
    noise  white noise with two random labels, unpredictable by construction

Except for `ar` and `noise`, signals are continuous-time functions sampled at `fs`, so generating
the same seed at several sampling rates yields the same recordings at different resolutions.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy import signal as sp_signal

from s4ecg.data import Dataset, LabelVocabulary, SignalRecord, assign_folds
from s4ecg.errors import ConfigError

logger = logging.getLogger(__name__)

FREQ_BANDS: Tuple[Tuple[float, float], ...] = ((0.5, 2.0), (3.0, 5.0), (6.0, 9.0))
AR_ANGLES = (np.pi / 24, np.pi / 8, np.pi / 3)
AR_RADIUS = 0.95
PULSE_RATES: Tuple[Tuple[float, float], ...] = ((0.8, 1.1), (1.4, 1.7), (2.0, 2.3))
PULSE_WIDTH = 0.04
NOISE_COMPONENTS = 6
NOISE_AMPLITUDE = 0.15


@dataclass(frozen=True)
class SynthSpec:
    """What to generate.

    Attributes:
        task: one of the task names
        n_records: number of records
        fs: sampling frequency in Hz
        duration: record length in seconds
        n_channels: number of leads
        strength: correlation of the sex-linked label with the sex feature (meta task)
        n_folds: number of folds assigned to the records
    """

    task: str = "freq"
    n_records: int = 500
    fs: float = 100.0
    duration: float = 10.0
    n_channels: int = 12
    strength: float = 0.8
    n_folds: int = 10


def _demographics(rng: np.random.Generator, missing: float) -> np.ndarray:
    meta = np.array(
        [
            rng.uniform(20.0, 90.0),
            float(rng.integers(0, 2)),
            rng.normal(170.0, 10.0),
            rng.normal(75.0, 12.0),
        ]
    )
    for column in (1, 2, 3):
        if rng.random() < missing:
            meta[column] = np.nan
    return meta


def _bandlimited_noise(rng: np.random.Generator, n_channels: int) -> Callable[[np.ndarray], np.ndarray]:
    freqs = rng.uniform(0.5, 9.5, (n_channels, NOISE_COMPONENTS))
    phases = rng.uniform(0.0, 2 * np.pi, (n_channels, NOISE_COMPONENTS))
    amplitudes = rng.uniform(0.0, NOISE_AMPLITUDE, (n_channels, NOISE_COMPONENTS))

    def evaluate(t: np.ndarray) -> np.ndarray:
        waves = amplitudes[..., None] * np.sin(2 * np.pi * freqs[..., None] * t + phases[..., None])
        return waves.sum(axis=1)

    return evaluate


def _gains(rng: np.random.Generator, n_channels: int) -> np.ndarray:
    return rng.uniform(0.5, 1.5, n_channels) * rng.choice([-1.0, 1.0], n_channels)


def _band_record(rng: np.random.Generator, spec: SynthSpec, t: np.ndarray) -> Tuple[np.ndarray, List[int]]:
    label = int(rng.integers(0, len(FREQ_BANDS)))
    freq = rng.uniform(*FREQ_BANDS[label])
    phase = rng.uniform(0.0, 2 * np.pi)
    gains = _gains(rng, spec.n_channels)
    noise = _bandlimited_noise(rng, spec.n_channels)
    signal = gains[:, None] * np.sin(2 * np.pi * freq * t + phase)[None, :] + noise(t)
    return signal, [label]


def _freq(rng: np.random.Generator, spec: SynthSpec, t: np.ndarray) -> Tuple[np.ndarray, List[int], np.ndarray]:
    signal, labels = _band_record(rng, spec, t)
    return signal, labels, _demographics(rng, missing=0.0)


def _meta(rng: np.random.Generator, spec: SynthSpec, t: np.ndarray) -> Tuple[np.ndarray, List[int], np.ndarray]:
    signal, labels = _band_record(rng, spec, t)
    meta = _demographics(rng, missing=0.0)
    linked = meta[1] if rng.random() < spec.strength else float(rng.integers(0, 2))
    if linked == 1.0:
        labels = labels + [len(FREQ_BANDS)]
    meta[1:][rng.random(3) < 0.1] = np.nan
    return signal, labels, meta


def _ar(rng: np.random.Generator, spec: SynthSpec, t: np.ndarray) -> Tuple[np.ndarray, List[int], np.ndarray]:
    label = int(rng.integers(0, len(AR_ANGLES)))
    theta = AR_ANGLES[label] * rng.uniform(0.9, 1.1)
    denominator = [1.0, -2.0 * AR_RADIUS * np.cos(theta), AR_RADIUS**2]
    warmup = 200
    drive = rng.normal(0.0, 1.0, (spec.n_channels, t.size + warmup))
    process = sp_signal.lfilter([1.0], denominator, drive, axis=-1)[:, warmup:]
    scale = process.std(axis=-1, keepdims=True)
    return process / np.where(scale > 0, scale, 1.0), [label], _demographics(rng, missing=0.0)


def _pulse(rng: np.random.Generator, spec: SynthSpec, t: np.ndarray) -> Tuple[np.ndarray, List[int], np.ndarray]:
    label = int(rng.integers(0, len(PULSE_RATES)))
    rate = rng.uniform(*PULSE_RATES[label])
    offset = rng.uniform(0.0, 1.0 / rate)
    beats = offset + np.arange(int(np.ceil(spec.duration * rate)) + 1) / rate
    train = np.exp(-0.5 * ((t[None, :] - beats[:, None]) / PULSE_WIDTH) ** 2).sum(axis=0)
    gains = _gains(rng, spec.n_channels)
    noise = _bandlimited_noise(rng, spec.n_channels)
    return gains[:, None] * train[None, :] + noise(t), [label], _demographics(rng, missing=0.0)


def _noise(rng: np.random.Generator, spec: SynthSpec, t: np.ndarray) -> Tuple[np.ndarray, List[int], np.ndarray]:
    labels = [i for i in range(2) if rng.random() < 0.5]
    return rng.normal(0.0, 1.0, (spec.n_channels, t.size)), labels, _demographics(rng, missing=0.0)


TASKS: Dict[str, Tuple[Tuple[str, ...], Callable[..., Tuple[np.ndarray, List[int], np.ndarray]], str]] = {
    "freq": (
        ("band_low", "band_mid", "band_high"),
        _freq,
        f"label = band of the sinusoid frequency, bands {FREQ_BANDS} Hz, plus bandlimited noise below 10 Hz",
    ),
    "ar": (
        ("ar_slow", "ar_mid", "ar_fast"),
        _ar,
        f"label = pole angle class of an AR(2) process, radius {AR_RADIUS}, "
        f"angles {tuple(round(a, 4) for a in AR_ANGLES)}",
    ),
    "meta": (
        ("band_low", "band_mid", "band_high", "sex_linked"),
        _meta,
        "freq labels; sex_linked = sex with probability strength, a fair coin otherwise",
    ),
    "pulse": (
        ("rate_low", "rate_mid", "rate_high"),
        _pulse,
        f"label = rate class of a Gaussian pulse train, rates {PULSE_RATES} Hz, width {PULSE_WIDTH} s",
    ),
    "noise": (("noise_a", "noise_b"), _noise, "white noise, labels are independent fair coins"),
}


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Generates a labeled dataset with assigned folds.

    Records are drawn from per-record generators derived from the seed, so the output depends only
    on (spec, seed).

    Raises:
        ConfigError: for an unknown task
    """
    if spec.task not in TASKS:
        raise ConfigError(f"Unknown synthetic task {spec.task}, expected one of {sorted(TASKS)}")
    codes, generate, generator_doc = TASKS[spec.task]
    length = int(round(spec.fs * spec.duration))
    t = np.arange(length) / spec.fs
    vocabulary = LabelVocabulary(codes)
    records = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(spec.n_records)):
        signal, labels, meta = generate(np.random.default_rng(child), spec, t)
        multi_hot = np.zeros(len(codes), dtype=np.int8)
        multi_hot[labels] = 1
        records.append(SignalRecord(f"{spec.task}-{i:05d}", signal.astype(np.float32), spec.fs, multi_hot, meta))

    description = [
        f"task: {spec.task}",
        f"seed: {seed}",
        f"fs: {spec.fs}",
        f"duration: {spec.duration}",
        f"generator: {generator_doc}",
    ]
    if spec.task == "meta":
        description.append(f"strength: {spec.strength}")
    dataset = Dataset(records, vocabulary, description)
    counts = dataset.label_matrix().sum(axis=0)
    dataset.vocabulary = LabelVocabulary(codes, tuple(int(c) for c in counts))
    folds = assign_folds(dataset, n_folds=spec.n_folds, seed=seed)
    logger.info("Generated %d %s records at %g Hz", spec.n_records, spec.task, spec.fs)
    return dataset.with_folds(folds)


def band_power_scores(dataset: Dataset) -> np.ndarray:
    """Spectral oracle for the frequency bands: per record, the share of power in each band"""
    scores = np.zeros((len(dataset), len(FREQ_BANDS)))
    for i, record in enumerate(dataset):
        freqs, power = sp_signal.periodogram(record.signal.astype(np.float64), fs=record.fs, axis=-1)
        power = power.sum(axis=0)
        band_power = np.array([power[(freqs >= lo) & (freqs <= hi)].sum() for lo, hi in FREQ_BANDS])
        scores[i] = band_power / max(band_power.sum(), np.finfo(float).tiny)
    return scores
