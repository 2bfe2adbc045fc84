"""Peripheral prediction padding.

Each edge of a feature map gets its own three-stage predictor
(1 x w_p conv -> ReLU -> 1x1 conv -> ReLU -> 1x1 conv -> ReLU) that reads the
h_p-deep strip next to that edge and produces one padding value per interior
edge position. The strip is permuted so its depth becomes the channel axis and
the feature channels become a spatial axis; the same small filters therefore
run over every feature channel, which is where the parameter saving comes from.

Padding is always one pixel wide. The four corners and the end pixels of each
edge (where the sliding window would not fit) are zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import (
    DTYPE,
    ConvKernel,
    DimensionError,
    conv2d_backward,
    conv2d_valid,
    inverse_permutation,
    permute_axes,
    relu,
    relu_backward,
)

EDGES = ("top", "bottom", "left", "right")
STAGES = ("w1", "w2", "w3")

# (N, C, depth, L) -> (N, depth, C, L) for top/bottom; (N, C, L, depth) -> (N, depth, C, L) for left/right
_STRIP_PERM = {"top": (0, 2, 1, 3), "bottom": (0, 2, 1, 3), "left": (0, 3, 1, 2), "right": (0, 3, 1, 2)}


@dataclass(frozen=True)
class PPPadConfig:
    h_p: int = 2
    w_p: int = 3
    n: int = 8

    def __post_init__(self):
        if self.h_p < 1:
            raise ValueError(f"h_p must be >= 1, got {self.h_p}")
        if self.w_p < 3 or self.w_p % 2 == 0:
            raise ValueError(f"w_p must be odd and >= 3, got {self.w_p}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")

    @property
    def min_size(self) -> int:
        return max(self.h_p, self.w_p)


@dataclass
class EdgePredictor:
    """Bias-free weights of one edge's predictor."""

    w1: np.ndarray  # (n, h_p, 1, w_p)
    w2: np.ndarray  # (n, n, 1, 1)
    w3: np.ndarray  # (1, n, 1, 1)

    @classmethod
    def zeros(cls, cfg: PPPadConfig, dtype=DTYPE) -> "EdgePredictor":
        return cls(
            np.zeros((cfg.n, cfg.h_p, 1, cfg.w_p), dtype),
            np.zeros((cfg.n, cfg.n, 1, 1), dtype),
            np.zeros((1, cfg.n, 1, 1), dtype),
        )

    @classmethod
    def uniform(cls, cfg: PPPadConfig, rng: np.random.Generator, scale: float = 0.1) -> "EdgePredictor":
        zero = cls.zeros(cfg)
        return cls(*(rng.uniform(-scale, scale, w.shape).astype(DTYPE) for w in zero.weights()))

    def weights(self) -> List[np.ndarray]:
        return [self.w1, self.w2, self.w3]

    @property
    def num_weights(self) -> int:
        return sum(w.size for w in self.weights())


@dataclass
class PPPadLayer:
    """Independent predictors for the four edges of one padded feature map."""

    top: EdgePredictor
    bottom: EdgePredictor
    left: EdgePredictor
    right: EdgePredictor

    @classmethod
    def zeros(cls, cfg: PPPadConfig, dtype=DTYPE) -> "PPPadLayer":
        return cls(*(EdgePredictor.zeros(cfg, dtype) for _ in EDGES))

    @classmethod
    def uniform(cls, cfg: PPPadConfig, rng: np.random.Generator, scale: float = 0.1) -> "PPPadLayer":
        return cls(*(EdgePredictor.uniform(cfg, rng, scale) for _ in EDGES))

    def edge(self, name: str) -> EdgePredictor:
        if name not in EDGES:
            raise ValueError(f"unknown edge {name!r}")
        return getattr(self, name)

    def named_weights(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Weights in serialization order: (top, bottom, left, right) x (w1, w2, w3)."""
        for e in EDGES:
            pred = self.edge(e)
            for s in STAGES:
                yield f"{e}.{s}", getattr(pred, s)

    @property
    def num_weights(self) -> int:
        return sum(w.size for _, w in self.named_weights())


def param_count(cfg: PPPadConfig, channels: int, naive: bool = False) -> int:
    """Weights of one edge predictor.

    The shared form applies one 1 x w_p filter bank over all channels; the naive
    form is an ordinary h_p x w_p convolution reading all C channels at once.
    """
    n, window = cfg.n, cfg.h_p * cfg.w_p
    if naive:
        return window * channels * n + n * n + n * channels
    return window * n + n * n + n


def _check_fits(fm: np.ndarray, cfg: PPPadConfig):
    if fm.ndim != 4:
        raise DimensionError(f"expected rank-4 feature map, got {fm.shape}")
    h, w = fm.shape[2:]
    if h < cfg.min_size or w < cfg.min_size:
        raise DimensionError(
            f"feature map {h}x{w} too small for PP-Pad strip {cfg.h_p}x{cfg.w_p}; need >= {cfg.min_size}"
        )


def extract_strip(fm: np.ndarray, edge: str, h_p: int) -> np.ndarray:
    """Canonical strip of shape (N, h_p, C, L): depth 0 is nearest the edge, L runs increasing."""
    if edge == "top":
        strip = fm[:, :, :h_p, :]
    elif edge == "bottom":
        strip = fm[:, :, ::-1, :][:, :, :h_p, :]
    elif edge == "left":
        strip = fm[:, :, :, :h_p]
    elif edge == "right":
        strip = fm[:, :, :, ::-1][:, :, :, :h_p]
    else:
        raise ValueError(f"unknown edge {edge!r}")
    return permute_axes(strip, _STRIP_PERM[edge])


def scatter_strip(grad_strip: np.ndarray, edge: str, shape: Tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`extract_strip`."""
    h_p = grad_strip.shape[1]
    g = permute_axes(grad_strip, inverse_permutation(_STRIP_PERM[edge]))
    out = np.zeros(shape, dtype=grad_strip.dtype)
    h, w = shape[2:]
    if edge == "top":
        out[:, :, :h_p, :] = g
    elif edge == "bottom":
        out[:, :, h - h_p:, :] = g[:, :, ::-1, :]
    elif edge == "left":
        out[:, :, :, :h_p] = g
    else:
        out[:, :, :, w - h_p:] = g[:, :, :, ::-1]
    return out


@dataclass
class _EdgeCache:
    edge: str
    strip: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: np.ndarray
    pred: EdgePredictor


def _predict_edge_forward(fm: np.ndarray, edge: str, pred: EdgePredictor, cfg: PPPadConfig):
    h, w = fm.shape[2:]
    depth_avail, length = (h, w) if edge in ("top", "bottom") else (w, h)
    if cfg.h_p > depth_avail or cfg.w_p > length:
        raise DimensionError(f"{edge} strip {cfg.h_p}x{cfg.w_p} does not fit a {h}x{w} map")
    strip = extract_strip(fm, edge, cfg.h_p)
    z1 = conv2d_valid(strip, ConvKernel(pred.w1))
    a1 = relu(z1)
    z2 = conv2d_valid(a1, ConvKernel(pred.w2))
    a2 = relu(z2)
    z3 = conv2d_valid(a2, ConvKernel(pred.w3))
    out = permute_axes(relu(z3), (0, 2, 1, 3))
    return out, _EdgeCache(edge, strip, z1, a1, z2, a2, z3, pred)


def _predict_edge_backward(grad_out: np.ndarray, cache: _EdgeCache, fm_shape) -> Tuple[np.ndarray, List[np.ndarray]]:
    pred = cache.pred
    g3 = relu_backward(permute_axes(grad_out, (0, 2, 1, 3)), cache.z3)
    g_a2, g_w3, _ = conv2d_backward(g3, cache.a2, ConvKernel(pred.w3))
    g2 = relu_backward(g_a2, cache.z2)
    g_a1, g_w2, _ = conv2d_backward(g2, cache.a1, ConvKernel(pred.w2))
    g1 = relu_backward(g_a1, cache.z1)
    g_strip, g_w1, _ = conv2d_backward(g1, cache.strip, ConvKernel(pred.w1))
    return scatter_strip(g_strip, cache.edge, fm_shape), [g_w1, g_w2, g_w3]


def predict_edge(fm: np.ndarray, edge: str, pred: EdgePredictor, cfg: PPPadConfig) -> np.ndarray:
    """Padding values for one edge, shape (N, C, 1, L - w_p + 1)."""
    return _predict_edge_forward(fm, edge, pred, cfg)[0]


def _edge_slots(h: int, w: int, cfg: PPPadConfig):
    """Where each edge's predictions land in the (H+2) x (W+2) padded map."""
    off = (cfg.w_p - 1) // 2
    cols = slice(1 + off, w + 1 - off)
    rows = slice(1 + off, h + 1 - off)
    return {
        "top": (0, cols),
        "bottom": (h + 1, cols),
        "left": (rows, 0),
        "right": (rows, w + 1),
    }


@dataclass
class PPPadCache:
    shape: Tuple[int, ...]
    cfg: PPPadConfig
    edges: Dict[str, _EdgeCache] = field(default_factory=dict)


def pp_pad_forward(fm: np.ndarray, layer: PPPadLayer, cfg: PPPadConfig) -> Tuple[np.ndarray, PPPadCache]:
    _check_fits(fm, cfg)
    n, c, h, w = fm.shape
    out = np.zeros((n, c, h + 2, w + 2), dtype=fm.dtype)
    out[:, :, 1:h + 1, 1:w + 1] = fm
    cache = PPPadCache(fm.shape, cfg)
    for edge, (r, col) in _edge_slots(h, w, cfg).items():
        values, cache.edges[edge] = _predict_edge_forward(fm, edge, layer.edge(edge), cfg)
        # values: (N, C, 1, L')
        out[:, :, r, col] = values[:, :, 0, :]
    return out, cache


def pp_pad(fm: np.ndarray, layer: PPPadLayer, cfg: PPPadConfig) -> np.ndarray:
    """Pad by one pixel on every side with learned edge predictions."""
    return pp_pad_forward(fm, layer, cfg)[0]


def pp_pad_backward_cached(grad_padded: np.ndarray, cache: PPPadCache) -> Tuple[np.ndarray, Dict[str, List[np.ndarray]]]:
    n, c, h, w = cache.shape
    if grad_padded.shape != (n, c, h + 2, w + 2):
        raise DimensionError(f"grad shape {grad_padded.shape} != padded shape {(n, c, h + 2, w + 2)}")
    grad_fm = grad_padded[:, :, 1:h + 1, 1:w + 1].copy()
    grads = {}
    for edge, (r, col) in _edge_slots(h, w, cache.cfg).items():
        g_values = np.ascontiguousarray(grad_padded[:, :, r, col])[:, :, None, :]
        g_fm, grads[edge] = _predict_edge_backward(g_values, cache.edges[edge], cache.shape)
        grad_fm += g_fm
    return grad_fm, grads


def pp_pad_backward(
    grad_padded: np.ndarray, fm: np.ndarray, layer: PPPadLayer, cfg: PPPadConfig
) -> Tuple[np.ndarray, PPPadLayer]:
    """Gradients of :func:`pp_pad` with respect to the feature map and every predictor weight."""
    _, cache = pp_pad_forward(fm, layer, cfg)
    grad_fm, grads = pp_pad_backward_cached(grad_padded, cache)
    return grad_fm, PPPadLayer(*(EdgePredictor(*grads[e]) for e in EDGES))


def layer_from_flat(weights: List[np.ndarray]) -> PPPadLayer:
    """Rebuild a layer from its 12 weights in serialization order."""
    if len(weights) != 12:
        raise ValueError(f"expected 12 weight arrays, got {len(weights)}")
    return PPPadLayer(*(EdgePredictor(*weights[3 * i:3 * i + 3]) for i in range(4)))


def preactivations(cache: PPPadCache) -> Optional[np.ndarray]:
    """All ReLU inputs of the predictors, flattened; used to keep finite differences off the kinks."""
    parts = [np.concatenate([e.z1.ravel(), e.z2.ravel(), e.z3.ravel()]) for e in cache.edges.values()]
    return np.concatenate(parts) if parts else None
