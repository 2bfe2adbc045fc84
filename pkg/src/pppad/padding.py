"""Classic padding operators and the partial-convolution padding baseline."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

from .tensor import ConvKernel, DimensionError, conv2d_backward, conv2d_valid

if TYPE_CHECKING:
    from .pppad import PPPadConfig

ZERO = "zero"
REFLECT = "reflect"
REPLICATE = "replicate"
CIRCULAR = "circular"
PARTIAL = "partial"
PPPAD = "pp-pad"

CLASSIC_MODES = (ZERO, REFLECT, REPLICATE, CIRCULAR)
ALL_MODES = CLASSIC_MODES + (PARTIAL, PPPAD)


@dataclass(frozen=True)
class PaddingMode:
    """A padding choice by its stable lowercase name.

    ``pp_config`` is only meaningful (and then required) for ``"pp-pad"``.
    """

    tag: str
    pp_config: Optional[PPPadConfig] = None

    def __post_init__(self):
        if self.tag not in ALL_MODES:
            raise ValueError(f"unknown padding mode {self.tag!r}; expected one of {ALL_MODES}")
        if self.tag == PPPAD and self.pp_config is None:
            raise ValueError("pp-pad mode needs a PPPadConfig")

    @classmethod
    def parse(cls, name: str, pp_config=None) -> "PaddingMode":
        name = name.strip().lower()
        if name == PPPAD and pp_config is None:
            from .pppad import PPPadConfig

            pp_config = PPPadConfig()
        return cls(name, pp_config if name == PPPAD else None)

    @property
    def label(self) -> str:
        if self.tag == PPPAD:
            return f"pp-pad({self.pp_config.h_p}x{self.pp_config.w_p})"
        return self.tag

    def __str__(self):
        return self.tag


def source_index(length: int, p: int, mode: str) -> np.ndarray:
    """For each position of a padded axis, the source index in the unpadded axis.

    Zero padding positions map to -1.
    """
    idx = np.arange(-p, length + p)
    if mode == ZERO:
        return np.where((idx >= 0) & (idx < length), idx, -1)
    if mode == REPLICATE:
        return np.clip(idx, 0, length - 1)
    if mode == CIRCULAR:
        return np.mod(idx, length)
    if mode == REFLECT:
        if length == 1:
            return np.zeros_like(idx)
        period = 2 * (length - 1)
        m = np.mod(idx, period)
        return np.where(m < length, m, period - m)
    raise ValueError(f"{mode!r} is not a standalone pad mode")


def _validate(x: np.ndarray, mode: str, p: int):
    if x.ndim != 4:
        raise DimensionError(f"expected rank-4 input, got shape {x.shape}")
    if p < 0:
        raise ValueError(f"pad width must be nonnegative, got {p}")
    if mode not in CLASSIC_MODES:
        raise ValueError(f"{mode!r} is not a standalone pad mode; use one of {CLASSIC_MODES}")
    h, w = x.shape[2:]
    if h < 1 or w < 1:
        raise DimensionError("cannot pad an empty map")
    if mode == REFLECT and p > min(h, w) - 1:
        raise ValueError(f"reflect padding needs p <= min(H, W) - 1, got p={p} for {h}x{w}")


def pad(x: np.ndarray, mode: str, p: int = 1) -> np.ndarray:
    """Pad the two spatial axes by ``p`` on every side.

    Rows are padded first and columns second, which fixes the corner values.
    """
    mode = str(mode)
    _validate(x, mode, p)
    n, c, h, w = x.shape
    if mode == ZERO:
        out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        out[:, :, p:p + h, p:p + w] = x
        return out
    rows = source_index(h, p, mode)
    cols = source_index(w, p, mode)
    return np.ascontiguousarray(x[:, :, rows][:, :, :, cols])


def pad_backward(grad_padded: np.ndarray, mode: str, p: int, shape: Tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`pad`: every padded cell's gradient flows back to its source."""
    mode = str(mode)
    n, c, h, w = shape
    if grad_padded.shape != (n, c, h + 2 * p, w + 2 * p):
        raise DimensionError(f"grad shape {grad_padded.shape} does not match padded {shape} with p={p}")
    if mode == ZERO:
        return grad_padded[:, :, p:p + h, p:p + w].copy()
    if mode not in CLASSIC_MODES:
        raise ValueError(f"{mode!r} is not a standalone pad mode")
    rows = source_index(h, p, mode)
    cols = source_index(w, p, mode)
    by_col = np.zeros((n, c, h + 2 * p, w), dtype=grad_padded.dtype)
    np.add.at(by_col, (slice(None), slice(None), slice(None), cols), grad_padded)
    grad = np.zeros((n, c, h, w), dtype=grad_padded.dtype)
    np.add.at(grad, (slice(None), slice(None), rows), by_col)
    return grad


@lru_cache(maxsize=64)
def _partial_scale(h: int, w: int, kh: int, kw: int, p: int) -> np.ndarray:
    def valid_counts(length: int, k: int) -> np.ndarray:
        starts = np.arange(length + 2 * p - k + 1) - p
        lo = np.maximum(starts, 0)
        hi = np.minimum(starts + k, length)
        return np.maximum(hi - lo, 0)

    n_valid = np.outer(valid_counts(h, kh), valid_counts(w, kw))
    if np.any(n_valid == 0):
        raise DimensionError(f"pad width {p} leaves windows with no in-image cells for a {kh}x{kw} kernel")
    scale = (kh * kw) / n_valid.astype(np.float64)
    scale.setflags(write=False)
    return scale


def partial_scale(h: int, w: int, kh: int, kw: int, p: int) -> np.ndarray:
    """Ratio (kh*kw) / n_valid for every output position; geometry only."""
    return _partial_scale(h, w, kh, kw, p)


def partial_conv2d(x: np.ndarray, kernel: ConvKernel, p: int = 1) -> np.ndarray:
    """Zero-pad, convolve without bias, rescale border outputs by the valid-cell ratio, add bias."""
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"partial convolution needs an odd kernel, got {kh}x{kw}")
    if p < 1:
        raise ValueError(f"partial convolution needs p >= 1, got {p}")
    h, w = x.shape[2:]
    scale = partial_scale(h, w, kh, kw, p).astype(x.dtype)
    raw = conv2d_valid(pad(x, ZERO, p), ConvKernel(kernel.weight))
    out = raw * scale
    if kernel.bias is not None:
        out += kernel.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def partial_conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, kernel: ConvKernel, p: int = 1
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_input, grad_weight, grad_bias)`` for :func:`partial_conv2d`."""
    kh, kw = kernel.shape[2:]
    h, w = x.shape[2:]
    scale = partial_scale(h, w, kh, kw, p).astype(grad_out.dtype)
    padded = pad(x, ZERO, p)
    g_pad, g_w, _ = conv2d_backward(grad_out * scale, padded, ConvKernel(kernel.weight))
    return pad_backward(g_pad, ZERO, p, x.shape), g_w, grad_out.sum(axis=(0, 2, 3))
