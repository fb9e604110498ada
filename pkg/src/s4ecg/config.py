"""Architecture, optimization and pretraining configurations.

Configurations are dataclasses that are stored as human-readable Python literal dictionaries and
read back with `ast.literal_eval`.
"""

import ast
import dataclasses
import os
import pprint
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Tuple, Type, TypeVar

from s4ecg.errors import ConfigError

ConfigT = TypeVar("ConfigT", "ModelConfig", "TrainConfig", "CpcConfig")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the S4 classifier.

    Attributes:
        H: model width, number of independent SSM channels per block
        depth: number of S4 blocks
        N: state dimension of every SSM channel
        n_classes: number of output labels
        directionality: "causal" or "bidirectional"
        encoder: "single_conv" (one convolution) or "fce" (four pointwise convolutions)
        dropout: dropout rate of blocks and meta head
        norm: normalization kind, only "layer" is supported
        with_meta: whether the meta head is fused before the classifier
        c_in: number of input channels
        encoder_kernel: kernel size of the single convolution encoder
        encoder_width: filters of the fce encoder layers
        step_min: lower bound of the initial step sizes
        step_max: upper bound of the initial step sizes
        train_a: whether the state matrix A is trained after HiPPO initialization
        bidirectional_merge: "concat" or "sum" of the two directions
        n_meta: number of metadata features
        meta_hidden: hidden units of the meta head layers
    """

    H: int = 128
    depth: int = 4
    N: int = 8
    n_classes: int = 3
    directionality: str = "bidirectional"
    encoder: str = "single_conv"
    dropout: float = 0.2
    norm: str = "layer"
    with_meta: bool = False
    c_in: int = 12
    encoder_kernel: int = 3
    encoder_width: int = 512
    step_min: float = 1e-3
    step_max: float = 1e-1
    train_a: bool = True
    bidirectional_merge: str = "concat"
    n_meta: int = 7
    meta_hidden: int = 64

    def __post_init__(self) -> None:
        if self.depth < 1 or self.H < 1 or self.N < 1 or self.n_classes < 1:
            raise ConfigError(f"depth, H, N and n_classes must be positive: {self}")
        if self.directionality not in ("causal", "bidirectional"):
            raise ConfigError(f"Unknown directionality {self.directionality}")
        if self.encoder not in ("single_conv", "fce"):
            raise ConfigError(f"Unknown encoder {self.encoder}")
        if self.norm != "layer":
            raise ConfigError(f"Unknown normalization {self.norm}")
        if self.bidirectional_merge not in ("concat", "sum"):
            raise ConfigError(f"Unknown bidirectional merge {self.bidirectional_merge}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"Dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.step_min <= self.step_max:
            raise ConfigError(f"Invalid step range [{self.step_min}, {self.step_max}]")

    @property
    def causal(self) -> bool:
        return self.directionality == "causal"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings of supervised training and finetuning.

    The folds default to the 8/1/1 split of ten label-balanced folds.
    """

    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 50
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    crop_seconds: float = 2.5
    seed: int = 0
    fs: float = 100.0
    dtype: str = "float64"
    label_fraction: float = 1.0
    train_folds: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    val_folds: Tuple[int, ...] = (9,)
    test_folds: Tuple[int, ...] = (10,)
    n_tta: int = 10

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"batch_size must be positive and epochs non-negative: {self}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"lr and weight_decay must be non-negative: {self}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"Unknown dtype {self.dtype}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.crop_seconds <= 0 or self.fs <= 0:
            raise ConfigError(f"crop_seconds and fs must be positive: {self}")


@dataclass(frozen=True)
class CpcConfig:
    """Contrastive pretraining settings"""

    width: int = 512
    depth: int = 4
    N: int = 8
    horizon: int = 12
    n_negatives: int = 16
    max_anchors: int = 128
    head_hidden: int = 512
    crop_seconds: float = 10.0
    dropout: float = 0.2
    cross_batch_negatives: bool = False
    c_in: int = 12

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.n_negatives < 1 or self.max_anchors < 1:
            raise ConfigError(f"horizon, n_negatives and max_anchors must be positive: {self}")

    def backbone_config(self, n_classes: int) -> ModelConfig:
        """The classifier configuration sharing this encoder and predictor"""
        return ModelConfig(
            H=self.width,
            depth=self.depth,
            N=self.N,
            n_classes=n_classes,
            directionality="causal",
            encoder="fce",
            dropout=self.dropout,
            c_in=self.c_in,
            encoder_width=self.width,
        )


def to_dict(config: Any) -> Dict[str, Any]:
    return dataclasses.asdict(config)


def from_dict(cls: Type[ConfigT], values: Mapping[str, Any]) -> ConfigT:
    """Builds a configuration, rejecting unknown keys.

    Raises:
        ConfigError: for unknown keys or invalid values
    """
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {unknown}")
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            value = values[f.name]
            coerced[f.name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**coerced)
    except TypeError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def with_overrides(config: ConfigT, overrides: Mapping[str, Any]) -> ConfigT:
    """Replaces the overridden fields that exist in this configuration, ignoring others"""
    known = {f.name for f in dataclasses.fields(config)}
    values = to_dict(config)
    values.update({k: v for k, v in overrides.items() if k in known})
    return from_dict(type(config), values)


def save_config(path: str, config: Any) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="UTF-8") as f:
        f.write(pprint.pformat(to_dict(config), sort_dicts=False))
        f.write("\n")


def load_config(path: str, cls: Type[ConfigT]) -> ConfigT:
    """Reads a configuration written by `save_config`.

    Raises:
        ConfigError: if the file cannot be read or parsed
    """
    try:
        with open(path, "r", encoding="UTF-8") as f:
            values = ast.literal_eval(f.read())
    except (OSError, ValueError, SyntaxError) as e:
        raise ConfigError(f"Could not read the configuration {path}.") from e
    if not isinstance(values, dict):
        raise ConfigError(f"Configuration {path} is not a dictionary")
    return from_dict(cls, values)
