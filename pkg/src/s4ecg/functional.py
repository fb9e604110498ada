"""Differentiable operations built on top of `s4ecg.tensor`"""

import logging
from typing import Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy import special

from s4ecg.errors import DiscretizationError, ShapeError
from s4ecg.tensor import Function, Tensor, as_tensor, broadcast_shape

logger = logging.getLogger(__name__)


class Conv1d(Function):
    """Cross-correlation of (B, C_in, L) with (C_out, C_in, k), output length L"""

    def forward(  # type: ignore[override]
        self, x: np.ndarray, weights: np.ndarray, causal: bool
    ) -> np.ndarray:
        k = weights.shape[-1]
        left = k - 1 if causal else (k - 1) // 2
        right = k - 1 - left
        self.length = x.shape[-1]
        self.pads = (left, right)
        padded = np.pad(x, ((0, 0), (0, 0), (left, right)))
        self.windows = sliding_window_view(padded, k, axis=-1)
        self.weights = weights
        self.x_shape = x.shape
        return np.einsum("bclk,ock->bol", self.windows, weights, optimize=True)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        k = self.weights.shape[-1]
        grad_w = np.einsum("bol,bclk->ock", grad, self.windows, optimize=True)
        left, right = self.pads
        grad_padded = np.zeros(self.x_shape[:2] + (self.length + left + right,), dtype=grad.dtype)
        for j in range(k):
            contribution = np.einsum("bol,oc->bcl", grad, self.weights[:, :, j], optimize=True)
            grad_padded[..., j : j + self.length] += contribution
        return grad_padded[..., left : left + self.length], grad_w


def causal_conv1d(signal: Tensor, weights: Tensor, causal: bool = True) -> Tensor:
    """1D convolution preserving the temporal length.

    The causal variant pads only on the left so that the output at t depends on inputs <= t, the
    non-causal variant pads symmetrically.

    Args:
        signal: (C_in, L) or (B, C_in, L)
        weights: (C_out, C_in, k) with k >= 1
        causal: whether to pad on the left only

    Returns:
        (C_out, L) or (B, C_out, L)
    """
    signal, weights = as_tensor(signal), as_tensor(weights)
    if weights.ndim != 3 or weights.shape[-1] < 1:
        raise ShapeError(f"Convolution weights must have shape (C_out, C_in, k), got {weights.shape}")
    unbatched = signal.ndim == 2
    if unbatched:
        signal = signal.reshape((1,) + signal.shape)
    if signal.ndim != 3 or signal.shape[1] != weights.shape[1]:
        raise ShapeError(f"Signal of shape {signal.shape} does not match weights of shape {weights.shape}")
    out = Conv1d.apply(signal, weights, causal=causal)
    return out.reshape(out.shape[1:]) if unbatched else out


class FFTConv(Function):
    """Causal convolution y_t = sum_{s<=t} k_s u_{t-s} of (B, H, L) with an (H, L) kernel"""

    def forward(self, u: np.ndarray, kernel: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.length = u.shape[-1]
        self.n_fft = sp_fft.next_fast_len(2 * self.length, real=True)
        self.u_f = sp_fft.rfft(u, n=self.n_fft, axis=-1)
        self.k_f = sp_fft.rfft(kernel[..., : self.length], n=self.n_fft, axis=-1)
        self.kernel_length = kernel.shape[-1]
        return sp_fft.irfft(self.u_f * self.k_f, n=self.n_fft, axis=-1)[..., : self.length]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g_f = sp_fft.rfft(grad, n=self.n_fft, axis=-1)
        grad_u = sp_fft.irfft(g_f * np.conj(self.k_f), n=self.n_fft, axis=-1)[..., : self.length]
        grad_k = sp_fft.irfft(g_f * np.conj(self.u_f), n=self.n_fft, axis=-1)[..., : self.length]
        grad_k = grad_k.sum(axis=0)
        if self.kernel_length > self.length:
            grad_k = np.concatenate(
                [grad_k, np.zeros(grad_k.shape[:-1] + (self.kernel_length - self.length,), dtype=grad_k.dtype)],
                axis=-1,
            )
        return grad_u, grad_k


def fft_convolve(u: Tensor, kernel: Tensor) -> Tensor:
    """Causal long convolution of every channel with its own kernel via a length-2L FFT.

    Args:
        u: (B, H, L)
        kernel: (H, L') with L' >= L

    Returns:
        (B, H, L)
    """
    u, kernel = as_tensor(u), as_tensor(kernel)
    if u.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != u.shape[1]:
        raise ShapeError(f"Kernel of shape {kernel.shape} does not match signal of shape {u.shape}")
    if kernel.shape[-1] < u.shape[-1]:
        raise ShapeError(f"Kernel of length {kernel.shape[-1]} is shorter than signal of length {u.shape[-1]}")
    return FFTConv.apply(u, kernel)


class Krylov(Function):
    """Krylov sequence (b, Ab, A^2 b, ..., A^{L-1} b) for a batch of systems"""

    def forward(self, a: np.ndarray, b: np.ndarray, length: int) -> np.ndarray:  # type: ignore[override]
        self.a = a
        powers = np.empty(b.shape[:-1] + (length,), dtype=np.result_type(a, b))
        v = b[..., 0]
        for t in range(length):
            powers[..., t] = v
            if t + 1 < length:
                v = np.einsum("...nm,...m->...n", a, v)
        self.powers = powers
        return powers

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        length = grad.shape[-1]
        grad_a = np.zeros_like(self.a)
        g_next = np.zeros_like(grad[..., 0])
        for t in range(length - 1, -1, -1):
            if t < length - 1:
                grad_a += np.einsum("...n,...m->...nm", g_next, self.powers[..., t])
            g_next = grad[..., t] + np.einsum("...mn,...m->...n", self.a, g_next)
        return grad_a, g_next[..., None]


def krylov(a: Tensor, b: Tensor, length: int) -> Tensor:
    """Iterates v_0 = b, v_{t+1} = A v_t.

    Args:
        a: (..., N, N)
        b: (..., N, 1)
        length: number of steps L >= 1

    Returns:
        (..., N, L) with column t equal to A^t b
    """
    a, b = as_tensor(a), as_tensor(b)
    if length < 1:
        raise ShapeError(f"Kernel length must be positive, got {length}")
    if a.shape[-1] != a.shape[-2] or b.shape[-2:] != (a.shape[-1], 1):
        raise ShapeError(f"Cannot iterate matrix of shape {a.shape} on vector of shape {b.shape}")
    return Krylov.apply(a, b, length=length)


class Solve(Function):
    def forward(self, m: np.ndarray, rhs: np.ndarray) -> np.ndarray:  # type: ignore[override]
        try:
            self.x = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError as e:
            raise DiscretizationError("Matrix (I - step/2 A) is singular") from e
        self.m = m
        return self.x

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_rhs = np.linalg.solve(np.swapaxes(self.m, -1, -2), grad)
        grad_m = -np.matmul(grad_rhs, np.swapaxes(self.x, -1, -2))
        return grad_m, grad_rhs


def solve(m: Tensor, rhs: Tensor) -> Tensor:
    """Solves M X = R for a batch of square systems"""
    m, rhs = as_tensor(m), as_tensor(rhs)
    if m.shape[-1] != m.shape[-2] or m.shape[-1] != rhs.shape[-2]:
        raise ShapeError(f"Cannot solve system of shape {m.shape} with right-hand side {rhs.shape}")
    return Solve.apply(m, rhs)


class LogSumExp(Function):
    def forward(self, a: np.ndarray, axis: int, keepdims: bool) -> np.ndarray:  # type: ignore[override]
        self.axis, self.keepdims = axis, keepdims
        out = special.logsumexp(a, axis=axis, keepdims=True)
        self.softmax = np.exp(a - out)
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (grad * self.softmax,)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Overflow-safe log(sum(exp(x))) along one axis (max-shifted)"""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError(f"logsumexp over an empty axis of shape {x.shape}")
    return LogSumExp.apply(x, axis=axis, keepdims=keepdims)


class Softplus(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * special.expit(self.a),)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(as_tensor(x))


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def gelu(x: Tensor) -> Tensor:
    return as_tensor(x).gelu()


def mean_pool(x: Tensor, axis: int = -1) -> Tensor:
    """Averages over the temporal axis, e.g. (C, L) -> (C,) or (B, C, L) -> (B, C)"""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError(f"Cannot pool over an empty temporal axis of shape {x.shape}")
    return x.mean(axis=axis)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalizes over one axis (channels) and applies a per-channel affine map.

    Args:
        x: input, e.g. (B, H, L) normalized over H per time step
        weight: (H,)
        bias: (H,)
        axis: normalization axis
        eps: variance offset

    Returns:
        tensor of the same shape as x
    """
    x = as_tensor(x)
    mean = x.mean(axis=axis, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    normed = centered * (var + eps) ** -0.5
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return normed * weight.reshape(tuple(shape)) + bias.reshape(tuple(shape))


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis but the feature axis 1.

    In training mode the batch statistics are used and the running statistics are updated in
    place with the given momentum (unbiased variance); in eval mode the running statistics are
    used.
    """
    x = as_tensor(x)
    axes = tuple(a for a in range(x.ndim) if a != 1)
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    shape_t = tuple(shape)
    if training:
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise ShapeError(f"Batch normalization in training mode needs more than one value, got {x.shape}")
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        batch_var = var.values.reshape(-1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.values.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * batch_var * count / (count - 1)
        normed = centered * (var + eps) ** -0.5
    else:
        normed = (x - running_mean.reshape(shape_t)) * (1.0 / np.sqrt(running_var.reshape(shape_t) + eps))
    return normed * weight.reshape(shape_t) + bias.reshape(shape_t)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zeroes entries with probability p and rescales by 1/(1-p) at train time"""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"Dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


def broadcast_to_length(values: Union[Tensor, np.ndarray], length: int) -> Tensor:
    """Repeats (..., C) along a new trailing temporal axis of the given length"""
    values = as_tensor(values)
    broadcast_shape(values.shape + (1,), values.shape + (length,))
    return values.reshape(values.shape + (1,)) * np.ones(values.shape + (length,))
