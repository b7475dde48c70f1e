"""Dense float64 primitives with hand-written backward passes.

Activations are numpy arrays laid out ``(N, F, T, E)``: batch, channels,
frames, graph edges.  Each differentiable op comes as a ``*_forward`` function
returning ``(out, cache)`` and a ``*_backward`` function that maps the upstream
gradient and the cache to input gradients, accumulating parameter gradients
into :class:`ParamTensor.grad`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericalError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    momentum_buffer: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.momentum_buffer.shape):
            raise ValueError("value, grad and momentum buffer must share a shape")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.value.copy(), self.grad.copy(), self.momentum_buffer.copy())


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 400
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _batched(H: np.ndarray) -> tuple[np.ndarray, bool]:
    H = np.asarray(H, dtype=DTYPE)
    if H.ndim == 3:
        return H[None], True
    if H.ndim != 4:
        raise ValueError(f"expected a (F, T, E) or (N, F, T, E) tensor, got shape {H.shape}")
    return H, False


def check_finite(x: np.ndarray, what: str = "tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")


# ----------------------------------------------------------------------------
# contraction helpers on the (N, F, T, E) layout


def channel_map(Wm: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``out[n, o, t, e] = sum_i Wm[o, i] H[n, i, t, e]``."""
    N, F, T, E = H.shape
    return np.matmul(Wm, H.reshape(N, F, T * E)).reshape(N, Wm.shape[0], T, E)


def channel_map_grad(dout: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Gradient of :func:`channel_map` with respect to ``Wm``."""
    N, O, T, E = dout.shape
    F = H.shape[1]
    return np.matmul(dout.reshape(N, O, T * E), H.reshape(N, F, T * E).transpose(0, 2, 1)).sum(axis=0)


def edge_map(U: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``out[n, f, t, e'] = sum_e U[e', e] H[n, f, t, e]``."""
    N, F, T, E = H.shape
    return (H.reshape(-1, E) @ U.T).reshape(N, F, T, U.shape[0])


def edge_map_grad(dout: np.ndarray, H: np.ndarray) -> np.ndarray:
    return dout.reshape(-1, dout.shape[3]).T @ H.reshape(-1, H.shape[3])


# ----------------------------------------------------------------------------
# bilinear edge/channel map


def bilinear_forward(H, U: ParamTensor, W: ParamTensor, bias: ParamTensor | None = None, relu: bool = True):
    """``out[n, o, t, e'] = act(sum_e sum_i U[e', e] W[o, i] H[n, i, t, e] + bias[o])``.

    The two contractions commute; the narrower channel side is contracted with
    ``U`` to save work.  With ``relu=False`` the pre-activation is returned,
    which is what the network feeds to batch norm.
    """
    Hb, squeeze = _batched(H)
    F_out, F_in = W.shape
    E_out, E_in = U.shape
    if Hb.shape[1] != F_in or Hb.shape[3] != E_in:
        raise ValueError(
            f"bilinear shape mismatch: H {Hb.shape[1:]} vs W {W.shape} and U {U.shape}"
        )
    if bias is not None and bias.shape != (F_out,):
        raise ValueError(f"bias must have shape ({F_out},), got {bias.shape}")
    edges_first = F_in < F_out
    if edges_first:
        A = edge_map(U.value, Hb)
        pre = channel_map(W.value, A)
    else:
        A = channel_map(W.value, Hb)
        pre = edge_map(U.value, A)
    if bias is not None:
        pre += bias.value[None, :, None, None]
    out = np.maximum(pre, 0.0) if relu else pre
    cache = (Hb, A, edges_first, pre if relu else None, U, W, bias, squeeze)
    return (out[0] if squeeze else out), cache


def bilinear_backward(dout, cache):
    Hb, A, edges_first, pre, U, W, bias, squeeze = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    if pre is not None:
        dout = dout * (pre > 0)
    if bias is not None:
        bias.grad += dout.sum(axis=(0, 2, 3))
    if edges_first:
        # pre = W . (H U^T)
        W.grad += channel_map_grad(dout, A)
        dA = channel_map(W.value.T, dout)
        U.grad += edge_map_grad(dA, Hb)
        dH = edge_map(U.value.T, dA)
    else:
        # pre = (W . H) U^T
        U.grad += edge_map_grad(dout, A)
        dA = edge_map(U.value.T, dout)
        W.grad += channel_map_grad(dA, Hb)
        dH = channel_map(W.value.T, dA)
    return dH[0] if squeeze else dH


# ----------------------------------------------------------------------------
# temporal (K x 1) convolution


def _frame_windows(H: np.ndarray, K: int) -> np.ndarray:
    """im2col along frames: ``(N, F*K, T*E)`` with zero padding ``(K-1)/2``."""
    N, F, T, E = H.shape
    pad = (K - 1) // 2
    cols = np.zeros((N, F, K, T, E), dtype=DTYPE)
    for k in range(K):
        lo, hi = max(0, pad - k), min(T, T + pad - k)
        if lo < hi:
            cols[:, :, k, lo:hi] = H[:, :, lo + k - pad : hi + k - pad]
    return cols.reshape(N, F * K, T * E)


def temporal_conv_forward(H, kernel: ParamTensor, bias: ParamTensor):
    """Convolution along the frame axis with zero padding ``(K-1)/2`` and stride 1."""
    Hb, squeeze = _batched(H)
    F_out, F_in, K, one = kernel.shape
    if one != 1:
        raise ValueError(f"temporal kernel must be (F_out, F_in, K, 1), got {kernel.shape}")
    if K % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {K}")
    if Hb.shape[1] != F_in:
        raise ValueError(f"input has {Hb.shape[1]} channels, kernel expects {F_in}")
    if bias.shape != (F_out,):
        raise ValueError(f"bias must have shape ({F_out},), got {bias.shape}")
    N, _, T, E = Hb.shape
    cols = _frame_windows(Hb, K)
    out = np.matmul(kernel.value.reshape(F_out, F_in * K), cols).reshape(N, F_out, T, E)
    out += bias.value[None, :, None, None]
    return (out[0] if squeeze else out), (cols, Hb.shape, kernel, bias, squeeze)


def temporal_conv_backward(dout, cache):
    cols, shape, kernel, bias, squeeze = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    N, F_in, T, E = shape
    F_out, _, K, _ = kernel.shape
    pad = (K - 1) // 2
    bias.grad += dout.sum(axis=(0, 2, 3))
    d2 = dout.reshape(N, F_out, T * E)
    kernel.grad += np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    dcols = np.matmul(kernel.value.reshape(F_out, F_in * K).T, d2).reshape(N, F_in, K, T, E)
    dH = np.zeros(shape, dtype=DTYPE)
    for k in range(K):
        lo, hi = max(0, pad - k), min(T, T + pad - k)
        if lo < hi:
            dH[:, :, lo + k - pad : hi + k - pad] += dcols[:, :, k, lo:hi]
    return dH[0] if squeeze else dH


# ----------------------------------------------------------------------------
# pointwise (1x1) channel map, used by residual projections


def conv1x1_forward(H, weight: ParamTensor, bias: ParamTensor):
    Hb, squeeze = _batched(H)
    if Hb.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {Hb.shape[1]} channels, weight expects {weight.shape[1]}")
    out = channel_map(weight.value, Hb)
    out += bias.value[None, :, None, None]
    return (out[0] if squeeze else out), (Hb, weight, bias, squeeze)


def conv1x1_backward(dout, cache):
    Hb, weight, bias, squeeze = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    bias.grad += dout.sum(axis=(0, 2, 3))
    weight.grad += channel_map_grad(dout, Hb)
    dH = channel_map(weight.value.T, dout)
    return dH[0] if squeeze else dH


# ----------------------------------------------------------------------------
# batch norm over (N, T, E) per channel


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def _channel_sum(x: np.ndarray) -> np.ndarray:
    N, F = x.shape[:2]
    return x.reshape(N, F, -1).sum(axis=2).sum(axis=0)


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    N, F = a.shape[:2]
    return np.einsum("nfk,nfk->f", a.reshape(N, F, -1), b.reshape(N, F, -1))


def batch_norm_forward(H, gamma: ParamTensor, beta: ParamTensor, stats: RunningStats, mode: str = "train"):
    H = np.asarray(H, dtype=DTYPE)
    if H.ndim != 4:
        raise ValueError(f"batch norm expects (N, F, T, E), got shape {H.shape}")
    if H.size == 0:
        raise ValueError("batch norm on an empty batch")
    bshape = (1, -1, 1, 1)
    if mode == "train":
        count = H.shape[0] * H.shape[2] * H.shape[3]
        mu = _channel_sum(H) / count
        xhat = H - mu.reshape(bshape)
        var = _channel_dot(xhat, xhat) / count
        unbiased = var * count / (count - 1) if count > 1 else var
        stats.mean *= 1.0 - BN_MOMENTUM
        stats.mean += BN_MOMENTUM * mu
        stats.var *= 1.0 - BN_MOMENTUM
        stats.var += BN_MOMENTUM * unbiased
    elif mode == "eval":
        xhat = H - stats.mean.reshape(bshape)
        var = stats.var
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat *= inv_std.reshape(bshape)
    out = xhat * gamma.value.reshape(bshape)
    out += beta.value.reshape(bshape)
    return out, (xhat, inv_std, gamma, beta, mode)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, beta, mode = cache
    bshape = (1, -1, 1, 1)
    g_sum = _channel_sum(dout)
    g_dot = _channel_dot(dout, xhat)
    beta.grad += g_sum
    gamma.grad += g_dot
    scale = (gamma.value * inv_std).reshape(bshape)
    if mode == "eval":
        return dout * scale
    count = xhat.size // xhat.shape[1]
    dx = xhat * (-g_dot / count).reshape(bshape)
    dx += dout
    dx -= (g_sum / count).reshape(bshape)
    dx *= scale
    return dx


# ----------------------------------------------------------------------------
# activations, dropout, pooling, classifier, loss


def relu_forward(H):
    out = np.maximum(H, 0.0)
    return out, out > 0


def relu_backward(dout, mask):
    return dout * mask


def dropout(H, p: float, rng: np.random.Generator | None = None, active: bool = True, mask=None):
    """Inverted dropout.  Returns ``(out, mask)``; ``mask`` already carries the 1/(1-p) scale.

    An explicit ``mask`` bypasses sampling (used for exhaustive enumeration).
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    H = np.asarray(H, dtype=DTYPE)
    if mask is not None:
        mask = np.asarray(mask, dtype=DTYPE)
        return H * mask, mask
    if not active or p == 0:
        return H.copy(), np.ones_like(H)
    if rng is None:
        raise ValueError("active dropout needs a random generator")
    mask = (rng.random(H.shape) >= p) * (1.0 / (1.0 - p))
    return H * mask, mask


def dropout_backward(dout, mask):
    return dout * mask


def global_avg_pool_forward(H):
    Hb, squeeze = _batched(H)
    out = Hb.mean(axis=(2, 3))
    return (out[0] if squeeze else out), (Hb.shape, squeeze)


def global_avg_pool_backward(dout, cache):
    shape, squeeze = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    scale = 1.0 / (shape[2] * shape[3])
    dH = np.broadcast_to(dout[:, :, None, None] * scale, shape).copy()
    return dH[0] if squeeze else dH


def linear_forward(x, weight: ParamTensor, bias: ParamTensor):
    """``logits = weight @ x + bias`` for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=DTYPE)
    C, F = weight.shape
    if x.shape[-1] != F or bias.shape != (C,):
        raise ValueError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.value.T + bias.value, (x, weight, bias)


def linear_backward(dout, cache):
    x, weight, bias = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if x.ndim == 1:
        weight.grad += np.outer(dout, x)
        bias.grad += dout
    else:
        weight.grad += dout.T @ x
        bias.grad += dout.sum(axis=0)
    return dout @ weight.value


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = np.asarray(logits, dtype=DTYPE)
    if z.ndim == 1:
        z = z[None]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    N, C = z.shape
    if len(labels) != N:
        raise ValueError(f"{len(labels)} labels for {N} rows of logits")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(N), labels] - log_norm
    loss = float(-log_p.mean())
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(N), labels] -= 1.0
    return loss, grad / N


# ----------------------------------------------------------------------------
# optimizer


def sgd_step(params, config: TrainConfig):
    """Momentum SGD with L2 weight decay folded into the gradient; zeroes grads."""
    lr, mom, wd = config.learning_rate, config.momentum, config.weight_decay
    for p in params:
        g = p.grad + wd * p.value if wd else p.grad
        p.momentum_buffer *= mom
        p.momentum_buffer += g
        p.value -= lr * p.momentum_buffer
        p.zero_grad()
