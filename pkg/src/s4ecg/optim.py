"""AdamW with decoupled weight decay"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Tuple

import numpy as np

from s4ecg.errors import OptimizerError
from s4ecg.nn import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """First and second moment estimates per parameter name and the shared step count"""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> Dict[str, np.ndarray]:
    """One AdamW update.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)

    Args:
        params: current parameter values by name
        grads: gradients by name
        state: moment estimates, updated in place
        lr: learning rate
        betas: moment decay rates
        eps: denominator offset
        weight_decay: decoupled weight decay coefficient

    Returns:
        the updated parameter values

    Raises:
        OptimizerError: if a gradient is not finite, naming the parameter
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise OptimizerError(f"Non-finite gradient for parameter {name}")

    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    updated = {}
    for name, theta in params.items():
        grad = grads[name]
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        direction = (m / bias1) / (np.sqrt(v / bias2) + eps)
        updated[name] = theta - lr * (direction + weight_decay * theta)
    return updated


class AdamW:
    """Optimizes named parameters that require gradients, skipping frozen ones"""

    def __init__(
        self,
        named_parameters: Iterable[Tuple[str, Parameter]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> None:
        if lr < 0 or weight_decay < 0 or eps < 0:
            raise OptimizerError(f"Invalid hyperparameters lr={lr}, weight_decay={weight_decay}, eps={eps}")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise OptimizerError(f"Invalid betas {betas}")
        self.parameters: List[Tuple[str, Parameter]] = [(n, p) for n, p in named_parameters if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()
        logger.debug("AdamW over %d parameter tensors, lr=%g, weight_decay=%g", len(self.parameters), lr, weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.parameters:
            p.zero_grad()

    def step(self) -> None:
        params = {name: p.values for name, p in self.parameters}
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.values) for name, p in self.parameters}
        updated = adamw_step(params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)
        for name, p in self.parameters:
            p.values[...] = updated[name]
