"""Parameter containers and the basic layers the models are assembled from"""

from typing import Any, Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from s4ecg import functional as F
from s4ecg.errors import CheckpointError
from s4ecg.tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A leaf tensor that is optimized during training"""

    def __init__(self, values: Any, requires_grad: bool = True) -> None:
        super().__init__(np.array(values, dtype=get_default_dtype()), requires_grad=requires_grad)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, requires_grad={self.requires_grad})"


class Module:
    """Base class of all layers.

    Parameters, buffers (non-trained state such as running statistics) and submodules are
    discovered from the instance attributes, in attribute definition order.
    """

    def __init__(self) -> None:
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(0)
        self._fixed: Set[str] = set()

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def register_buffer(self, name: str, values: np.ndarray) -> None:
        self._buffers[name] = np.array(values, dtype=get_default_dtype())

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, values in self._buffers.items():
            yield f"{prefix}{name}", values
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_rng(self, rng: np.random.Generator) -> "Module":
        """Shares one random generator (dropout masks) across all submodules"""
        for module in self.modules():
            module._rng = rng
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def fix(self, name: str) -> None:
        """Excludes an own parameter from training, also across `unfreeze`"""
        self._fixed.add(name)
        parameter = getattr(self, name)
        parameter.requires_grad = False
        parameter.grad = None

    def unfreeze(self) -> "Module":
        for module in self.modules():
            for name, value in vars(module).items():
                if isinstance(value, Parameter) and name not in module._fixed:
                    value.requires_grad = True
                    value.grad = np.zeros_like(value.values)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.values.copy() for name, p in self.named_parameters()}
        state.update({name: values.copy() for name, values in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copies values into the parameters and buffers of this module.

        Args:
            state: mapping from dotted names to arrays
            strict: whether missing or unexpected names are an error

        Raises:
            CheckpointError: if names or shapes do not match
        """
        targets: Dict[str, np.ndarray] = {name: p.values for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        if strict:
            missing = sorted(set(targets) - set(state))
            unexpected = sorted(set(state) - set(targets))
            if missing or unexpected:
                raise CheckpointError(
                    f"State does not match the architecture: missing {missing}, unexpected {unexpected}"
                )
        for name, values in state.items():
            if name not in targets:
                continue
            if targets[name].shape != np.shape(values):
                raise CheckpointError(
                    f"Shape mismatch for {name}: expected {targets[name].shape}, got {np.shape(values)}"
                )
            targets[name][...] = values


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module]) -> None:
        super().__init__()
        for i, module in enumerate(modules):
            setattr(self, str(i), module)
        self._length = len(modules)

    def __len__(self) -> int:
        return self._length

    def __iter__(self) -> Iterator[Module]:
        return (getattr(self, str(i)) for i in range(self._length))

    def __getitem__(self, index: int) -> Module:
        return getattr(self, str(index % self._length))


class Linear(Module):
    """Affine map over the last axis, y = x W^T + b"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True) -> None:
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight.T
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    """Length-preserving 1D convolution over (B, C_in, L); kernel size 1 is a pointwise linear map"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        causal: bool = True,
    ) -> None:
        super().__init__()
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels))
        self.causal = causal

    def forward(self, x: Tensor) -> Tensor:
        out = F.causal_conv1d(x, self.weight, causal=self.causal)
        return out + self.bias.reshape((-1, 1))


class LayerNorm(Module):
    def __init__(self, features: int, axis: int = 1, eps: float = 1e-5) -> None:
        super().__init__()
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.axis = axis
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, axis=self.axis, eps=self.eps)


class BatchNorm1d(Module):
    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.register_buffer("running_mean", np.zeros(features))
        self.register_buffer("running_var", np.ones(features))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.weight,
            self.bias,
            self.buffer("running_mean"),
            self.buffer("running_var"),
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Dropout(Module):
    def __init__(self, p: float) -> None:
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"Dropout probability must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.training, self._rng)


def count_parameters(module: Optional[Module]) -> int:
    """Number of scalar parameters (trainable or frozen) of a module"""
    if module is None:
        return 0
    return int(sum(p.size for p in module.parameters()))

