"""Dense rank-4 tensor arithmetic with hand-written adjoints.

Tensors are plain ``numpy`` arrays laid out as (batch, channel, rows, cols).
Production math runs in float32; every op preserves the dtype of its inputs so
the same code runs in float64 for finite-difference checks.

The forward convolution accumulates in a fixed kernel-index-major order with
plain multiply-then-add arithmetic (no BLAS, no fused multiply-add), so each
output element is computed by the identical sequence of float operations
wherever it sits in the map.
That is what makes translated inputs give bit-identical translated outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numba
import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


@dataclass
class ConvKernel:
    """Convolution weights of shape (out, in, kh, kw) with an optional bias of shape (out,)."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape) < 1:
            raise DimensionError(f"kernel must be rank 4 with positive dims, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.weight.shape

    @property
    def has_bias(self) -> bool:
        return self.bias is not None

    @property
    def size(self) -> int:
        n = self.weight.size
        return n + (self.bias.size if self.bias is not None else 0)


def _check_rank4(x: np.ndarray, name: str = "input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int = 1) -> Tuple[int, int]:
    return (h - kh) // stride + 1, (w - kw) // stride + 1


@numba.njit(cache=True)
def _correlate_unit_stride(x, w):
    # no fastmath: every multiply and add rounds separately, in (a, b, c) order per output
    n_b, c_n, h, wd = x.shape
    o_n, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    out = np.zeros((n_b, o_n, ho, wo), x.dtype)
    for n in range(n_b):
        for o in range(o_n):
            for a in range(kh):
                for b in range(kw):
                    for c in range(c_n):
                        wv = w[o, c, a, b]
                        for i in range(ho):
                            src = x[n, c, i + a, b:b + wo]
                            dst = out[n, o, i]
                            for j in range(wo):
                                dst[j] += wv * src[j]
    return out


def conv2d_valid(x: np.ndarray, kernel: ConvKernel, stride: int = 1) -> np.ndarray:
    """Valid-region cross-correlation (no kernel flip, no padding).

    Output element (n, o, i, j) is ``sum_{a, b, c} w[o, c, a, b] * x[n, c, i*s + a, j*s + b]``
    plus bias, accumulated with ``a`` outermost, then ``b``, then ``c``.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    _check_rank4(x)
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(f"input has {c} channels but kernel expects {ci}")
    if h < kh or w < kw:
        raise DimensionError(f"input {h}x{w} is smaller than kernel {kh}x{kw}")
    ho, wo = conv_output_size(h, w, kh, kw, stride)
    weight = np.ascontiguousarray(kernel.weight, dtype=x.dtype)
    if stride == 1:
        out = _correlate_unit_stride(np.ascontiguousarray(x), weight)
    else:
        out = np.zeros((n, o, ho, wo), dtype=x.dtype)
        tmp = np.empty_like(out)
        for a in range(kh):
            for b in range(kw):
                window = x[:, :, a:a + (ho - 1) * stride + 1:stride, b:b + (wo - 1) * stride + 1:stride]
                for k in range(c):
                    np.multiply(weight[:, k, a, b][None, :, None, None], window[:, k:k + 1], out=tmp)
                    out += tmp
    if kernel.bias is not None:
        out += kernel.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, kernel: ConvKernel, stride: int = 1
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of :func:`conv2d_valid`.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is returned even
    when the kernel has no bias (it is then simply unused).
    """
    _check_rank4(x)
    _check_rank4(grad_out, "grad_out")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(f"input has {c} channels but kernel expects {ci}")
    ho, wo = conv_output_size(h, w, kh, kw, stride)
    if grad_out.shape != (n, o, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != expected {(n, o, ho, wo)}")
    weight = kernel.weight.astype(x.dtype, copy=False)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col as (C*kh*kw, N*ho*wo); the backward pass may use BLAS since only the forward order is pinned
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    grad_w = (g2 @ cols.T).reshape(kernel.shape)
    dcols = (weight.reshape(o, c * kh * kw).T @ g2).reshape(c, kh, kw, n, ho, wo)
    grad_x = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            rows = slice(a, a + (ho - 1) * stride + 1, stride)
            cols_ = slice(b, b + (wo - 1) * stride + 1, stride)
            grad_x[:, :, rows, cols_] += dcols[:, a, b].transpose(1, 0, 2, 3)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Passes the gradient where ``x > 0``; the subgradient at 0 is 0."""
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, ignore_index: Optional[int] = None
) -> Tuple[float, np.ndarray]:
    """Pixel-wise softmax cross-entropy averaged over counted pixels.

    ``logits`` is (N, K, H, W) and ``labels`` is (N, H, W) of class indices.
    Returns the scalar loss and its gradient with respect to the logits.
    """
    _check_rank4(logits, "logits")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} != {(n, h, w)}")
    labels = labels.astype(np.int64)
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    safe = np.where(valid, labels, 0)[:, None]
    # log-softmax in float64 so saturated logits do not produce log(0)
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    norm = exp.sum(axis=1, keepdims=True)
    log_picked = np.take_along_axis(shifted, safe, axis=1)[:, 0] - np.log(norm[:, 0])
    loss = float(-log_picked[valid].sum() / count)
    grad = exp / norm
    np.put_along_axis(grad, safe, np.take_along_axis(grad, safe, axis=1) - 1.0, axis=1)
    grad *= valid[:, None] / count
    return loss, grad.astype(logits.dtype)


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> Tuple[np.ndarray, np.ndarray]:
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    if not (param.shape == grad.shape == velocity.shape):
        raise DimensionError(
            f"param {param.shape}, grad {grad.shape} and velocity {velocity.shape} must match"
        )
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity
    return param, velocity


def permute_axes(x: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Contiguous copy of ``x`` with its axes reordered."""
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ValueError(f"{perm} is not a permutation of {x.ndim} axes")
    return np.ascontiguousarray(x.transpose(perm))


def inverse_permutation(perm: Sequence[int]) -> Tuple[int, ...]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


class GradTape:
    """Ordered record of backward closures for a chain of differentiable ops.

    Each recorded closure maps the gradient of its op's output to the gradient of
    its input, accumulating any parameter gradients as a side effect.
    """

    def __init__(self):
        self._entries: List[Tuple[str, Callable[[np.ndarray], np.ndarray]]] = []

    def record(self, name: str, backward: Callable[[np.ndarray], np.ndarray]):
        self._entries.append((name, backward))

    def __len__(self):
        return len(self._entries)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self._entries]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Run every recorded adjoint once, newest first, and clear the tape."""
        entries, self._entries = self._entries, []
        for _, fn in reversed(entries):
            grad = fn(grad)
        return grad


def gradient_check(
    forward: Callable[..., np.ndarray],
    backward: Callable[..., Sequence[np.ndarray]],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic adjoints with central differences in float64.

    ``forward(*inputs)`` returns an array (or scalar); ``backward(grad_out, *inputs)``
    returns one gradient per input. The output is contracted with a fixed random
    cotangent so every input coordinate is checked against a scalar objective.

    Returns max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    out = np.asarray(forward(*xs), dtype=np.float64)
    cotangent = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = backward(cotangent, *xs)
    if len(analytic) != len(xs):
        raise ValueError(f"backward returned {len(analytic)} gradients for {len(xs)} inputs")

    def objective() -> float:
        return float(np.sum(np.asarray(forward(*xs), dtype=np.float64) * cotangent))

    worst = 0.0
    for x, g in zip(xs, analytic):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise DimensionError(f"gradient shape {g.shape} != input shape {x.shape}")
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = objective()
            flat[i] = orig - eps
            minus = objective()
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
