"""The S4 sequence classifier with optional metadata fusion.

signal -> encoder -> [S4 block] x depth -> layer norm -> mean pool -> (concat meta head) -> linear

Every S4 block applies pre-norm, an S4 layer of H independent single-input single-output state
space systems, GeLU, dropout and a pointwise mixing convolution, and adds the result to its input.
"""

import copy
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from s4ecg import functional as F
from s4ecg.checkpoint import load_checkpoint, save_checkpoint
from s4ecg.config import ModelConfig, from_dict, to_dict
from s4ecg.errors import CheckpointError, ConfigError, MetadataError, ShapeError
from s4ecg.nn import (
    BatchNorm1d,
    Conv1d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    count_parameters,
)
from s4ecg.ssm import (
    ContinuousSsm,
    discretize_bilinear_tensor,
    hippo_legs_init,
    hippo_legs_input,
    kernel_tensor,
    rescale_step,
)
from s4ecg.tensor import Tensor, as_tensor, concat

logger = logging.getLogger(__name__)


class SsmKernel(Module):
    """Continuous-time parameters of H channels and their discrete convolution kernels"""

    def __init__(
        self,
        H: int,
        N: int,
        rng: np.random.Generator,
        step_min: float = 1e-3,
        step_max: float = 1e-1,
        train_a: bool = True,
    ) -> None:
        super().__init__()
        self.A = Parameter(np.tile(hippo_legs_init(N), (H, 1, 1)))
        self.B = Parameter(np.tile(hippo_legs_input(N), (H, 1, 1)))
        self.C = Parameter(rng.normal(0.0, 1.0 / np.sqrt(N), (H, 1, N)))
        self.log_step = Parameter(rng.uniform(np.log(step_min), np.log(step_max), H))
        if not train_a:
            self.fix("A")

    @property
    def H(self) -> int:
        return int(self.A.shape[0])

    def system(self, channel: int, D: float = 0.0) -> ContinuousSsm:
        return ContinuousSsm(
            self.A.values[channel],
            self.B.values[channel],
            self.C.values[channel],
            D,
            float(self.log_step.values[channel]),
        )

    def forward(self, length: int, step_scale: float = 1.0) -> Tensor:
        """Kernels of shape (H, length) for steps exp(log_step) * step_scale"""
        step = self.log_step.exp() * step_scale
        abar, bbar = discretize_bilinear_tensor(self.A, self.B, step)
        return kernel_tensor(abar, bbar, self.C, length)


class S4Layer(Module):
    """H state space channels applied as long convolutions, causal or bidirectional"""

    def __init__(
        self,
        H: int,
        N: int,
        rng: np.random.Generator,
        causal: bool = True,
        step_min: float = 1e-3,
        step_max: float = 1e-1,
        train_a: bool = True,
        merge: str = "concat",
    ) -> None:
        super().__init__()
        self.forward_ssm = SsmKernel(H, N, rng, step_min, step_max, train_a)
        self.D = Parameter(np.ones(H))
        self.backward_ssm = None if causal else SsmKernel(H, N, rng, step_min, step_max, train_a)
        self.merge = merge
        self.step_scale = 1.0

    @property
    def causal(self) -> bool:
        return self.backward_ssm is None

    @property
    def output_channels(self) -> int:
        h = self.forward_ssm.H
        return 2 * h if not self.causal and self.merge == "concat" else h

    def directional_outputs(self, u: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        """Outputs of the forward and, if bidirectional, the time-reversed pass, each (B, H, L)"""
        length = u.shape[-1]
        skip = u * self.D.reshape((-1, 1))
        y_forward = F.fft_convolve(u, self.forward_ssm(length, self.step_scale)) + skip
        if self.backward_ssm is None:
            return y_forward, None
        reverse = (Ellipsis, slice(None, None, -1))
        y_backward = F.fft_convolve(u[reverse], self.backward_ssm(length, self.step_scale))[reverse] + skip
        return y_forward, y_backward

    def forward(self, u: Tensor) -> Tensor:
        y_forward, y_backward = self.directional_outputs(u)
        if y_backward is None:
            return y_forward
        if self.merge == "sum":
            return y_forward + y_backward
        return concat([y_forward, y_backward], axis=1)


class S4Block(Module):
    def __init__(
        self,
        H: int,
        N: int,
        rng: np.random.Generator,
        causal: bool = True,
        dropout: float = 0.2,
        step_min: float = 1e-3,
        step_max: float = 1e-1,
        train_a: bool = True,
        merge: str = "concat",
    ) -> None:
        super().__init__()
        self.norm = LayerNorm(H)
        self.layer = S4Layer(H, N, rng, causal, step_min, step_max, train_a, merge)
        self.dropout = Dropout(dropout)
        self.mixing = Conv1d(self.layer.output_channels, H, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.layer(self.norm(x)).gelu()
        return x + self.mixing(self.dropout(y))


def make_bidirectional(block: S4Block) -> S4Block:
    """A bidirectional copy of a causal block.

    The reverse direction starts from the forward parameters. With the concat merge the mixing
    map receives zero weights for the reverse channels, so the new block initially computes the
    same outputs as the causal one.
    """
    result = copy.deepcopy(block)
    layer = result.layer
    if not layer.causal:
        return result
    layer.backward_ssm = copy.deepcopy(layer.forward_ssm)
    if layer.merge == "concat":
        weight = result.mixing.weight.values
        result.mixing.weight = Parameter(np.concatenate([weight, np.zeros_like(weight)], axis=1))
    return result


class Encoder(Module):
    """Maps C_in input channels to H model channels without changing the length.

    "single_conv" is one convolution of size `kernel_size`, "fce" four pointwise convolutions
    with ReLU activations.
    """

    def __init__(
        self,
        kind: str,
        c_in: int,
        H: int,
        rng: np.random.Generator,
        kernel_size: int = 3,
        width: int = 512,
        causal: bool = True,
    ) -> None:
        super().__init__()
        self.kind = kind
        if kind == "fce":
            sizes = [c_in, width, width, width, H]
            self.layers = ModuleList([Conv1d(a, b, 1, rng) for a, b in zip(sizes[:-1], sizes[1:])])
        else:
            self.layers = ModuleList([Conv1d(c_in, H, kernel_size, rng, causal=causal)])

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
            if self.kind == "fce":
                x = x.relu()
        return x


class S4Backbone(Module):
    """Encoder and S4 blocks, (B, C_in, L) -> (B, H, L)"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.encoder = Encoder(
            config.encoder,
            config.c_in,
            config.H,
            rng,
            kernel_size=config.encoder_kernel,
            width=config.encoder_width,
            causal=config.causal,
        )
        self.blocks = ModuleList(
            [
                S4Block(
                    config.H,
                    config.N,
                    rng,
                    causal=config.causal,
                    dropout=config.dropout,
                    step_min=config.step_min,
                    step_max=config.step_max,
                    train_a=config.train_a,
                    merge=config.bidirectional_merge,
                )
                for _ in range(config.depth)
            ]
        )
        self.norm = LayerNorm(config.H)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def contextualize(self, z: Tensor) -> Tensor:
        for block in self.blocks:
            z = block(z)
        return self.norm(z)

    def forward(self, x: Tensor) -> Tensor:
        return self.contextualize(self.encode(x))

    def s4_layers(self) -> List[S4Layer]:
        return [m for m in self.modules() if isinstance(m, S4Layer)]


class MetaHead(Module):
    """Three-layer MLP over the metadata features: (Linear, BatchNorm, ReLU, Dropout) x 3"""

    def __init__(self, n_features: int, hidden: int, dropout: float, rng: np.random.Generator) -> None:
        super().__init__()
        sizes = [n_features, hidden, hidden, hidden]
        self.linears = ModuleList([Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])])
        self.norms = ModuleList([BatchNorm1d(b) for b in sizes[1:]])
        self.dropout = Dropout(dropout)

    def forward(self, meta: Tensor) -> Tensor:
        x = meta
        for linear, norm in zip(self.linears, self.norms):
            x = self.dropout(norm(linear(x)).relu())
        return x


class S4Classifier(Module):
    """Multi-label classifier returning one logit per class"""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.backbone = S4Backbone(config, rng)
        self.meta_head = MetaHead(config.n_meta, config.meta_hidden, config.dropout, rng) if config.with_meta else None
        n_features = config.H + (config.meta_hidden if config.with_meta else 0)
        self.classifier = Linear(n_features, config.n_classes, rng)
        self.set_rng(np.random.default_rng([seed, 1]))

    def pooled_features(self, signal: Tensor, upto: Optional[int] = None) -> Tensor:
        """Mean-pooled backbone outputs (B, H); `upto` restricts pooling to the first `upto` steps"""
        signal = as_tensor(signal)
        if signal.ndim == 2:
            signal = signal.reshape((1,) + signal.shape)
        if signal.ndim != 3 or signal.shape[-1] == 0:
            raise ShapeError(f"Expected a non-empty (B, C, L) signal, got {signal.shape}")
        if signal.shape[1] != self.config.c_in:
            raise ShapeError(f"Expected {self.config.c_in} input channels, got signal of shape {signal.shape}")
        features = self.backbone(signal)
        if upto is not None:
            features = features[..., :upto]
        return F.mean_pool(features)

    def forward_signal(self, signal: Tensor, upto: Optional[int] = None) -> Tensor:
        """Logits from the signal alone, (n_classes,) for (C, L) input or (B, n_classes) for batches"""
        if self.meta_head is not None:
            raise MetadataError("Model fuses metadata, use forward_with_meta")
        logits = self.classifier(self.pooled_features(signal, upto))
        return logits.reshape((-1,)) if as_tensor(signal).ndim == 2 else logits

    def forward_with_meta(self, signal: Tensor, meta: Optional[Tensor]) -> Tensor:
        """Logits from the pooled signal representation concatenated with the meta head output"""
        if self.meta_head is None:
            raise MetadataError("Model was built without a meta head")
        if meta is None:
            raise MetadataError("Model requires metadata features")
        meta = as_tensor(meta)
        unbatched = meta.ndim == 1
        if unbatched:
            meta = meta.reshape((1, -1))
        if meta.shape[-1] != self.config.n_meta or not np.all(np.isfinite(meta.values)):
            raise MetadataError(f"Expected {self.config.n_meta} finite metadata features, got shape {meta.shape}")
        fused = concat([self.pooled_features(signal), self.meta_head(meta)], axis=1)
        logits = self.classifier(fused)
        return logits.reshape((-1,)) if unbatched else logits

    def forward(self, signal: Tensor, meta: Optional[Tensor] = None) -> Tensor:
        if self.meta_head is not None:
            return self.forward_with_meta(signal, meta)
        return self.forward_signal(signal)

    def rescale_steps(self, train_rate: float, test_rate: float) -> float:
        """Rediscretizes every state space layer for inputs sampled at `test_rate`"""
        scale = rescale_step(1.0, train_rate, test_rate)
        for layer in self.backbone.s4_layers():
            layer.step_scale = scale
        logger.debug("Rescaled step sizes by %g for %g Hz -> %g Hz", scale, train_rate, test_rate)
        return scale

    def continuous_systems(self) -> List[ContinuousSsm]:
        systems = []
        for layer in self.backbone.s4_layers():
            for ssm in (layer.forward_ssm, layer.backward_ssm):
                if ssm is not None:
                    systems.extend(ssm.system(h, float(layer.D.values[h])) for h in range(ssm.H))
        return systems


def parameter_breakdown(model: S4Classifier) -> Dict[str, int]:
    """Parameter counts per component and in total"""
    breakdown = {
        "encoder": count_parameters(model.backbone.encoder),
        "blocks": count_parameters(model.backbone.blocks) + count_parameters(model.backbone.norm),
        "meta_head": count_parameters(model.meta_head),
        "classifier": count_parameters(model.classifier),
    }
    breakdown["total"] = sum(breakdown.values())
    return breakdown


def save_model(path: str, model: S4Classifier, metadata: Optional[Dict] = None) -> None:
    """Checkpoints the parameters and buffers together with the model configuration"""
    save_checkpoint(path, model.state_dict(), {"model_config": to_dict(model.config), **(metadata or {})})


def load_model(path: str, strict: bool = True) -> Tuple[S4Classifier, Dict]:
    """Rebuilds a classifier from a checkpoint written by `save_model`.

    Raises:
        CheckpointError: if the checkpoint has no model configuration or does not match it
    """
    state, metadata = load_checkpoint(path)
    if "model_config" not in metadata:
        raise CheckpointError(f"{path} does not describe a classifier")
    try:
        config = from_dict(ModelConfig, metadata["model_config"])
    except ConfigError as e:
        raise CheckpointError(f"Invalid model configuration in {path}") from e
    model = S4Classifier(config)
    model.load_state_dict(state, strict=strict)
    return model, metadata
