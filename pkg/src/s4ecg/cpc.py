"""Contrastive predictive coding: pretraining the encoder and causal S4 predictor, then finetuning.

The pointwise encoder maps the signal to latents z_t, the causal predictor summarizes the past into
contexts c_t. For anchors t and offsets k = 1..K, a per-offset MLP forecasts z_{t+k} from c_t and
the forecast is scored by dot products against the true latent and n_negatives other latents
drawn from the same sequence. The InfoNCE loss is the cross-entropy of picking the true latent.
"""

import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from s4ecg import functional as F
from s4ecg.checkpoint import load_checkpoint, save_checkpoint
from s4ecg.config import CpcConfig, TrainConfig, from_dict, to_dict
from s4ecg.data import Dataset, random_crop
from s4ecg.dataframe import write_table
from s4ecg.errors import CheckpointError, ConfigError, HorizonError, SamplingError
from s4ecg.model import S4Backbone, S4Classifier
from s4ecg.nn import Linear, Module, ModuleList
from s4ecg.optim import AdamW
from s4ecg.tensor import Tensor, as_tensor, get_default_dtype
from s4ecg.train import TrainResult, train_supervised

logger = logging.getLogger(__name__)


class ForecastHead(Module):
    """Two fully connected layers forecasting a latent from a context"""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.hidden = Linear(in_features, hidden, rng)
        self.output = Linear(hidden, out_features, rng)

    def forward(self, c: Tensor) -> Tensor:
        return self.output(self.hidden(c).relu())


class CpcModel(Module):
    def __init__(self, config: CpcConfig, seed: int = 0) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.backbone = S4Backbone(config.backbone_config(n_classes=1), rng)
        self.heads = ModuleList(
            [ForecastHead(config.width, config.head_hidden, config.width, rng) for _ in range(config.horizon)]
        )
        self.set_rng(np.random.default_rng([seed, 1]))

    def encode(self, signal: Tensor) -> Tensor:
        """Latents (B, width, L), each time step computed from the same time step of the signal only"""
        return self.backbone.encode(_batched(signal))

    def forward(self, signal: Tensor) -> Tuple[Tensor, Tensor]:
        """Latents z and causal contexts c, both (B, width, L)"""
        z = self.encode(signal)
        return z, self.backbone.contextualize(z)

    def loss(self, signal: Tensor, rng: np.random.Generator) -> Tensor:
        z, c = self(signal)
        return infonce_loss(
            z,
            c,
            self.heads,
            self.config.horizon,
            self.config.n_negatives,
            rng,
            max_anchors=self.config.max_anchors,
            cross_batch=self.config.cross_batch_negatives,
        )


def _batched(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return x.reshape((1,) + x.shape) if x.ndim == 2 else x


def sample_candidates(
    rng: np.random.Generator, n_positions: int, positives: np.ndarray, n_negatives: int
) -> np.ndarray:
    """Candidate indices with the positive first and n_negatives distinct other positions after it.

    Negatives are drawn uniformly without replacement from [0, n_positions) without the positive.

    Args:
        rng: random generator
        n_positions: number of positions to draw from
        positives: integer array of positive indices of any shape
        n_negatives: negatives per positive

    Returns:
        array of shape positives.shape + (1 + n_negatives,)

    Raises:
        SamplingError: if fewer than n_negatives other positions exist
    """
    if n_negatives < 1 or n_negatives >= n_positions - 1:
        raise SamplingError(f"Cannot draw {n_negatives} negatives from {n_positions} positions without the positive")
    positives = np.asarray(positives)
    keys = rng.random(positives.shape + (n_positions,))
    np.put_along_axis(keys, positives[..., None], np.inf, axis=-1)
    negatives = np.argpartition(keys, n_negatives - 1, axis=-1)[..., :n_negatives]
    return np.concatenate([positives[..., None], negatives], axis=-1)


def infonce_loss(
    z: Tensor,
    c: Tensor,
    heads: Union[ModuleList, List[Module]],
    horizon: int,
    n_negatives: int,
    rng: np.random.Generator,
    max_anchors: int = 128,
    cross_batch: bool = False,
    return_samples: bool = False,
) -> Union[Tensor, Tuple[Tensor, np.ndarray, List[np.ndarray]]]:
    """InfoNCE forecasting loss.

    For anchors t in [0, L - K) (at most `max_anchors`, drawn without replacement) and every
    k = 1..K, the score of a candidate j is z_j . head_k(c_t); the loss is the mean over anchors,
    offsets and sequences of logsumexp(scores) - score(positive).

    Args:
        z: latents (B, D, L) or (D, L)
        c: contexts (B, D', L) or (D', L)
        heads: one forecast head per offset, mapping D' -> D
        horizon: number of offsets K
        n_negatives: negatives per positive
        rng: draws anchors, then candidates per offset
        max_anchors: upper bound on anchors per sequence
        cross_batch: draw negatives from all sequences of the batch instead of the same one
        return_samples: additionally return the anchors and the candidate indices per offset

    Returns:
        the scalar loss, and with `return_samples` the anchors (A,) and per offset candidates of
        shape (B, A, 1 + n_negatives) indexing positions of the sequence (or of the flattened
        batch of sequences with `cross_batch`)

    Raises:
        HorizonError: if L <= K
        SamplingError: if not enough negatives can be drawn
    """
    z, c = _batched(z), _batched(c)
    batch, _, length = z.shape
    if length <= horizon:
        raise HorizonError(f"Sequence length {length} does not exceed the horizon {horizon}")
    if len(heads) < horizon:
        raise HorizonError(f"{len(heads)} forecast heads for horizon {horizon}")
    n_positions = batch * length if cross_batch else length
    if n_negatives >= n_positions - 1:
        raise SamplingError(f"Cannot draw {n_negatives} negatives from {n_positions} positions without the positive")

    n_valid = length - horizon
    anchors = np.arange(n_valid)
    if n_valid > max_anchors:
        anchors = np.sort(rng.choice(n_valid, size=max_anchors, replace=False))
    n_anchors = anchors.size

    zt = z.swapaxes(1, 2)
    contexts = c.swapaxes(1, 2)[:, anchors, :]
    flat_z = zt.reshape((batch * length, zt.shape[-1])) if cross_batch else None
    rows = np.arange(batch)[:, None, None]
    offset = (np.arange(batch) * length)[:, None] if cross_batch else 0

    losses = []
    samples = []
    for k in range(1, horizon + 1):
        positives = np.broadcast_to(anchors + k, (batch, n_anchors)) + offset
        candidates = sample_candidates(rng, n_positions, positives, n_negatives)
        samples.append(candidates)
        forecast = heads[k - 1](contexts)
        z_candidates = flat_z[candidates] if cross_batch else zt[rows, candidates]
        scores = (z_candidates * forecast.reshape((batch, n_anchors, 1, forecast.shape[-1]))).sum(axis=-1)
        losses.append((F.logsumexp(scores, axis=-1) - scores[..., 0]).mean())

    loss = losses[0]
    for term in losses[1:]:
        loss = loss + term
    loss = loss / float(horizon)
    if return_samples:
        return loss, anchors, samples
    return loss


@dataclass
class PretrainResult:
    model: CpcModel
    metrics: pd.DataFrame


def pretrain(
    dataset: Dataset,
    cpc_config: CpcConfig,
    train_config: TrainConfig,
    output_dir: Optional[str] = None,
    epochs: Optional[int] = None,
) -> PretrainResult:
    """Trains encoder, predictor and forecast heads on random crops of every record; labels are ignored.

    Writes backbone.ckpt (encoder and predictor), heads.ckpt and pretrain_metrics.tsv to the
    output directory if given.
    """
    if len(dataset) == 0:
        raise ConfigError("Pretraining needs at least one record")
    model = CpcModel(cpc_config, seed=train_config.seed)
    optimizer = AdamW(
        model.named_parameters(),
        lr=train_config.lr,
        betas=tuple(train_config.betas),
        eps=train_config.eps,
        weight_decay=train_config.weight_decay,
    )
    baseline = float(np.log(1 + cpc_config.n_negatives))
    rows = []
    for epoch in range(1, (train_config.epochs if epochs is None else epochs) + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([train_config.seed, epoch])
        model.set_rng(np.random.default_rng([train_config.seed, epoch, 1]))
        model.train()
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, order.size, train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            crops = [random_crop(dataset[i], cpc_config.crop_seconds, rng).values for i in batch]
            x = Tensor(np.stack(crops).astype(get_default_dtype()))
            optimizer.zero_grad()
            loss = model.loss(x, rng)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "uniform_baseline": baseline,
            "wall_time": time.perf_counter() - started,
        }
        rows.append(row)
        logger.info("pretrain epoch %d infonce %.5f (uniform %.5f)", epoch, row["train_loss"], baseline)

    result = PretrainResult(model, pd.DataFrame(rows, columns=["epoch", "train_loss", "uniform_baseline", "wall_time"]))
    if output_dir is not None:
        write_table(result.metrics, os.path.join(output_dir, "pretrain_metrics.tsv"))
        save_pretrained(output_dir, model)
    return result


def save_pretrained(output_dir: str, model: CpcModel) -> Tuple[str, str]:
    """Writes the backbone and the forecast heads to separate checkpoints"""
    metadata = {"cpc_config": to_dict(model.config)}
    backbone_path = os.path.join(output_dir, "backbone.ckpt")
    heads_path = os.path.join(output_dir, "heads.ckpt")
    save_checkpoint(backbone_path, model.backbone.state_dict(), metadata)
    save_checkpoint(heads_path, model.heads.state_dict(), metadata)
    return backbone_path, heads_path


def load_backbone(path: str) -> Tuple[Dict[str, np.ndarray], CpcConfig]:
    state, metadata = load_checkpoint(path)
    if "cpc_config" not in metadata:
        raise CheckpointError(f"{path} is not a pretrained backbone")
    try:
        return state, from_dict(CpcConfig, metadata["cpc_config"])
    except ConfigError as e:
        raise CheckpointError(f"Invalid pretraining configuration in {path}") from e


@dataclass
class FinetuneResult:
    model: S4Classifier
    head_only: TrainResult
    full: TrainResult


def finetune(
    checkpoint: str,
    dataset: Dataset,
    train_config: TrainConfig,
    head_only_epochs: int,
    full_epochs: int,
    output_dir: Optional[str] = None,
    cpc_config: Optional[CpcConfig] = None,
) -> FinetuneResult:
    """Replaces the forecast heads with mean pooling and a new linear head and trains in two phases.

    Phase one trains only the linear head on the frozen backbone, phase two trains everything.

    Args:
        checkpoint: backbone checkpoint written by `pretrain`
        dataset: labeled dataset with folds
        train_config: supervised optimization settings of both phases
        head_only_epochs: epochs of phase one
        full_epochs: epochs of phase two
        output_dir: receives head_only/ and full/ training outputs if given
        cpc_config: expected architecture, by default the one stored in the checkpoint

    Raises:
        CheckpointError: if the checkpoint does not match the architecture
    """
    state, stored_config = load_backbone(checkpoint)
    config = cpc_config or stored_config
    model = S4Classifier(config.backbone_config(n_classes=len(dataset.vocabulary)), seed=train_config.seed)
    model.backbone.load_state_dict(state)
    metadata = {"codes": list(dataset.vocabulary.codes), "pretrained": checkpoint}

    model.backbone.freeze()
    head_only = train_supervised(
        model,
        dataset,
        train_config,
        output_dir=None if output_dir is None else os.path.join(output_dir, "head_only"),
        parameters=model.classifier.named_parameters("classifier."),
        epochs=head_only_epochs,
        checkpoint_metadata=metadata,
    )
    model.backbone.unfreeze()
    full = train_supervised(
        model,
        dataset,
        train_config,
        output_dir=None if output_dir is None else os.path.join(output_dir, "full"),
        epochs=full_epochs,
        checkpoint_metadata=metadata,
    )
    return FinetuneResult(model, head_only, full)
