"""Continuous-time state space systems, their discretization and application.

A single-input single-output system x'(t) = A x(t) + B u(t), y(t) = C x(t) + D u(t) is mapped to
discrete parameters (Abar, Bbar, Cbar) for a step size with the bilinear transform. The discrete
system can then be applied either as a causal convolution with the kernel
(Cbar Bbar, Cbar Abar Bbar, ..., Cbar Abar^{L-1} Bbar) or as a recurrence through the hidden state;
both give the same output.

The dataclasses in this module are immutable numpy views used for analysis and testing, the
`*_tensor` functions are the differentiable counterparts used inside the models.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import linalg

from s4ecg import functional as F
from s4ecg.errors import DiscretizationError, ShapeError
from s4ecg.tensor import Tensor

logger = logging.getLogger(__name__)


def _frozen(values: np.ndarray) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ContinuousSsm:
    """Continuous-time parameters of one channel.

    Attributes:
        A: (N, N) state matrix
        B: (N, 1) input matrix
        C: (1, N) output matrix
        D: skip coefficient
        log_step: log of the step size in seconds
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float
    log_step: float

    def __post_init__(self) -> None:
        a, b, c = _frozen(self.A), _frozen(self.B), _frozen(self.C)
        n = a.shape[0] if a.ndim == 2 else 0
        if n < 1 or a.shape != (n, n) or b.shape != (n, 1) or c.shape != (1, n):
            raise ShapeError(f"Inconsistent system shapes A={a.shape}, B={b.shape}, C={c.shape}")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "C", c)

    @property
    def N(self) -> int:
        return int(self.A.shape[0])

    @property
    def step(self) -> float:
        return float(np.exp(self.log_step))

    @classmethod
    def hippo(cls, N: int, step: float = 0.01, C: Optional[np.ndarray] = None, D: float = 1.0) -> "ContinuousSsm":
        """A system initialized with the HiPPO-LegS matrices"""
        c = np.ones((1, N)) if C is None else C
        return cls(hippo_legs_init(N), hippo_legs_input(N), c, D, float(np.log(step)))


@dataclass(frozen=True)
class DiscreteSsm:
    Abar: np.ndarray
    Bbar: np.ndarray
    Cbar: np.ndarray
    step: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "Abar", _frozen(self.Abar))
        object.__setattr__(self, "Bbar", _frozen(self.Bbar))
        object.__setattr__(self, "Cbar", _frozen(self.Cbar))

    @property
    def N(self) -> int:
        return int(self.Abar.shape[0])

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.Abar))))


@dataclass(frozen=True)
class KernelCache:
    """The materialized convolution kernel of a discrete system for a given length and step"""

    length: int
    step: float
    values: np.ndarray

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.shape != (self.length,):
            raise ShapeError(f"Kernel values of shape {values.shape} do not match length {self.length}")
        object.__setattr__(self, "values", values)


def hippo_legs_init(N: int) -> np.ndarray:
    """HiPPO-LegS state matrix.

    A_nk = -sqrt(2n+1) sqrt(2k+1) for n > k, -(n+1) for n == k and 0 for n < k (zero-indexed).

    Args:
        N: state dimension, N >= 1

    Returns:
        (N, N) lower-triangular matrix
    """
    if N < 1:
        raise ValueError(f"State dimension must be positive, got {N}")
    p = np.sqrt(1.0 + 2.0 * np.arange(N))
    a = np.tril(p[:, None] * p[None, :], k=-1) + np.diag(np.arange(N) + 1.0)
    return -a


def hippo_legs_input(N: int) -> np.ndarray:
    """HiPPO-LegS input matrix B_n = sqrt(2n+1), shape (N, 1)"""
    if N < 1:
        raise ValueError(f"State dimension must be positive, got {N}")
    return np.sqrt(1.0 + 2.0 * np.arange(N))[:, None]


def discretize_bilinear(ssm: ContinuousSsm, step: Optional[float] = None) -> DiscreteSsm:
    """Bilinear (Tustin) discretization.

    Abar = (I - step/2 A)^-1 (I + step/2 A), Bbar = (I - step/2 A)^-1 step B, Cbar = C.

    Args:
        ssm: continuous system
        step: step size, defaults to exp(ssm.log_step)

    Returns:
        the discrete system

    Raises:
        DiscretizationError: for non-positive steps or a singular (I - step/2 A)
    """
    step = ssm.step if step is None else float(step)
    if not step > 0:
        raise DiscretizationError(f"Step size must be positive, got {step}")
    identity = np.eye(ssm.N)
    lhs = identity - 0.5 * step * ssm.A
    try:
        abar = linalg.solve(lhs, identity + 0.5 * step * ssm.A)
        bbar = linalg.solve(lhs, step * ssm.B)
    except (linalg.LinAlgError, ValueError) as e:
        raise DiscretizationError(f"Matrix (I - step/2 A) is singular for step {step}") from e
    return DiscreteSsm(abar, bbar, ssm.C, step)


def materialize_kernel(dssm: DiscreteSsm, L: int) -> KernelCache:
    """Computes k_t = Cbar Abar^t Bbar for t = 0..L-1 by iterating v_{t+1} = Abar v_t"""
    if L < 1:
        raise ValueError(f"Kernel length must be positive, got {L}")
    values = np.empty(L)
    v = dssm.Bbar[:, 0].copy()
    for t in range(L):
        values[t] = dssm.Cbar[0] @ v
        v = dssm.Abar @ v
    return KernelCache(L, dssm.step, values)


def apply_convolution(kernel: KernelCache, u: np.ndarray, D: float, method: str = "fft") -> np.ndarray:
    """Causal convolution y_t = sum_{s<=t} k_s u_{t-s} + D u_t.

    Args:
        kernel: kernel with length >= len(u)
        u: input sequence
        D: skip coefficient
        method: "fft" (length-2L FFT) or "direct" (explicit sum)

    Returns:
        output sequence of the same length as u
    """
    u = np.asarray(u, dtype=np.float64)
    length = u.shape[-1]
    if kernel.length < length:
        raise ShapeError(f"Kernel of length {kernel.length} is shorter than signal of length {length}")
    k = kernel.values[:length]
    if method == "fft":
        n_fft = sp_fft.next_fast_len(2 * length, real=True)
        y = sp_fft.irfft(sp_fft.rfft(u, n=n_fft) * sp_fft.rfft(k, n=n_fft), n=n_fft)[:length]
    elif method == "direct":
        y = np.array([np.dot(k[: t + 1], u[t::-1]) for t in range(length)])
    else:
        raise ValueError(f"Unknown convolution method {method}")
    return y + D * u


def apply_recurrent(dssm: DiscreteSsm, u: np.ndarray, D: float, x0: Optional[np.ndarray] = None) -> np.ndarray:
    """Unrolls x_{t+1} = Abar x_t + Bbar u_t, y_t = Cbar x_{t+1} + D u_t"""
    u = np.asarray(u, dtype=np.float64)
    x = np.zeros(dssm.N) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(-1)
    if x.shape != (dssm.N,):
        raise ShapeError(f"Initial state of shape {x.shape} does not match state dimension {dssm.N}")
    b = dssm.Bbar[:, 0]
    c = dssm.Cbar[0]
    y = np.empty_like(u)
    for t, u_t in enumerate(u):
        x = dssm.Abar @ x + b * u_t
        y[t] = c @ x + D * u_t
    return y


def rescale_step(model_step: float, train_rate: float, test_rate: float) -> float:
    """Step size for inference at another sampling rate, step * train_rate / test_rate"""
    if not (train_rate > 0 and test_rate > 0):
        raise ValueError(f"Sampling rates must be positive, got {train_rate} and {test_rate}")
    return model_step * train_rate / test_rate


def discretize_bilinear_tensor(A: Tensor, B: Tensor, step: Tensor) -> Tuple[Tensor, Tensor]:
    """Differentiable bilinear discretization of H systems at once.

    Args:
        A: (H, N, N)
        B: (H, N, 1)
        step: (H,) positive step sizes

    Returns:
        Abar (H, N, N) and Bbar (H, N, 1)
    """
    n = A.shape[-1]
    identity = np.eye(n)
    half = (step * 0.5).reshape((-1, 1, 1))
    lhs = identity - half * A
    rhs = identity + half * A
    abar = F.solve(lhs, rhs)
    bbar = F.solve(lhs, step.reshape((-1, 1, 1)) * B)
    return abar, bbar


def kernel_tensor(abar: Tensor, bbar: Tensor, C: Tensor, length: int) -> Tensor:
    """Differentiable kernel (H, L) from discrete systems and output matrices C of shape (H, 1, N)"""
    powers = F.krylov(abar, bbar, length)
    return (C @ powers).reshape((C.shape[0], length))
