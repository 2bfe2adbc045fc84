"""A small fully-convolutional segmentation network with pluggable padding.

Every layer is pad(1) -> 3x3 conv -> ReLU (the classifier layer has no ReLU),
so the spatial size is preserved and the padding touches every layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .padding import (
    PARTIAL,
    PPPAD,
    REFLECT,
    ZERO,
    PaddingMode,
    pad,
    pad_backward,
    partial_conv2d,
    partial_conv2d_backward,
)
from .pppad import EDGES, STAGES, PPPadLayer, pp_pad_backward_cached, pp_pad_forward
from .tensor import (
    DTYPE,
    ConvKernel,
    DimensionError,
    GradTape,
    conv2d_backward,
    conv2d_valid,
    relu,
    relu_backward,
    sgd_step,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 3
    widths: Tuple[int, ...] = (16, 16, 16, 16)
    num_classes: int = 4

    @property
    def channels(self) -> List[Tuple[int, int]]:
        dims = [self.in_channels, *self.widths, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (len(self.widths) + 1)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 100
    epochs_phase1: int = 30
    epochs_phase2: int = 30
    crop: int = 32
    flip: bool = True
    rotate: bool = True
    pp_init_scale: float = 0.1


def poly_lr(epoch: int, max_epoch: int, base_lr: float = 0.01, power: float = 0.9) -> float:
    """``base_lr * (1 - epoch / max_epoch) ** power``."""
    if max_epoch <= 0:
        raise ValueError(f"max_epoch must be positive, got {max_epoch}")
    if not 0 <= epoch <= max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {max_epoch}]")
    return base_lr * (1.0 - epoch / max_epoch) ** power


class SegNet:
    """Plain stack of 3x3 convolutions; all weights are float32 numpy arrays."""

    def __init__(self, config: SegNetConfig, padding: PaddingMode, rng: np.random.Generator):
        self.config = config
        self.padding = padding
        self.convs: List[ConvKernel] = []
        for c_in, c_out in config.channels:
            std = math.sqrt(2.0 / (9 * c_in))
            weight = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(DTYPE)
            self.convs.append(ConvKernel(weight, np.zeros(c_out, DTYPE)))
        self.pp_layers: List[PPPadLayer] = []
        if padding.tag == PPPAD:
            self.pp_layers = [PPPadLayer.uniform(padding.pp_config, rng) for _ in self.convs]

    def set_padding(self, padding: PaddingMode, rng: Optional[np.random.Generator] = None, init_scale: float = 0.1):
        """Swap the padding of every layer; PP-Pad predictors are freshly initialised."""
        self.padding = padding
        if padding.tag == PPPAD:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.pp_layers = [PPPadLayer.uniform(padding.pp_config, rng, init_scale) for _ in self.convs]
        else:
            self.pp_layers = []

    def named_parameters(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters in their fixed checkpoint order."""
        params = []
        for i, k in enumerate(self.convs):
            params.append((f"conv{i}.weight", k.weight))
            params.append((f"conv{i}.bias", k.bias))
        for i, layer in enumerate(self.pp_layers):
            for name, w in layer.named_weights():
                params.append((f"pppad{i}.{name}", w))
        return params

    def min_input_size(self) -> int:
        if self.padding.tag == PPPAD:
            return self.padding.pp_config.min_size
        return 2 if self.padding.tag == REFLECT else 1

    def forward(self, x: np.ndarray, tape: Optional[GradTape] = None, grads: Optional[Dict[str, np.ndarray]] = None):
        """Logits of shape (N, K, H, W).

        When ``tape`` is given, each op records its adjoint; parameter gradients
        land in ``grads`` (keyed like :meth:`named_parameters`) on ``tape.backward``.
        """
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        if min(x.shape[2:]) < self.min_input_size():
            raise DimensionError(f"input {x.shape[2:]} smaller than the network minimum {self.min_input_size()}")
        last = len(self.convs) - 1
        for i, kernel in enumerate(self.convs):
            x = self._conv_layer(i, x, kernel, tape, grads)
            if i != last:
                pre = x
                x = relu(pre)
                if tape is not None:
                    tape.record(f"relu{i}", lambda g, pre=pre: relu_backward(g, pre))
        return x

    def _conv_layer(self, i, x, kernel, tape, grads):
        mode = self.padding.tag
        if mode == PARTIAL:
            out = partial_conv2d(x, kernel, 1)
            if tape is not None:
                def back(g, x=x):
                    gx, gw, gb = partial_conv2d_backward(g, x, kernel, 1)
                    _accumulate(grads, f"conv{i}", gw, gb)
                    return gx
                tape.record(f"partial_conv{i}", back)
            return out

        if mode == PPPAD:
            padded, cache = pp_pad_forward(x, self.pp_layers[i], self.padding.pp_config)
        else:
            padded = pad(x, mode, 1)
        out = conv2d_valid(padded, kernel)
        if tape is None:
            return out

        def back(g, padded=padded, shape=x.shape):
            gp, gw, gb = conv2d_backward(g, padded, kernel)
            _accumulate(grads, f"conv{i}", gw, gb)
            if mode == PPPAD:
                gx, edge_grads = pp_pad_backward_cached(gp, cache)
                for e in EDGES:
                    for s, gs in zip(STAGES, edge_grads[e]):
                        grads[f"pppad{i}.{e}.{s}"] = grads.get(f"pppad{i}.{e}.{s}", 0) + gs
                return gx
            return pad_backward(gp, mode, 1, shape)

        tape.record(f"conv{i}", back)
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)


def _accumulate(grads, prefix, gw, gb):
    grads[f"{prefix}.weight"] = grads.get(f"{prefix}.weight", 0) + gw
    grads[f"{prefix}.bias"] = grads.get(f"{prefix}.bias", 0) + gb


def loss_and_grads(net: SegNet, x: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = GradTape()
    grads: Dict[str, np.ndarray] = {}
    logits = net.forward(x, tape, grads)
    loss, g = softmax_cross_entropy(logits, labels)
    tape.backward(g)
    return loss, grads


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def train_step(
    net: SegNet, x: np.ndarray, labels: np.ndarray, lr: float, cfg: TrainConfig, state: OptimizerState
) -> float:
    """One minibatch of SGD; every parameter (conv and PP-Pad alike) gets the same settings."""
    loss, grads = loss_and_grads(net, x, labels)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at lr={lr}")
    for name, param in net.named_parameters():
        v = state.velocity.setdefault(name, np.zeros_like(param))
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param)
        sgd_step(param, g.astype(param.dtype, copy=False), v, lr, cfg.momentum, cfg.weight_decay)
    return loss


def augment(
    image: np.ndarray, label: np.ndarray, rng: np.random.Generator, crop: Optional[int] = None,
    flip: bool = True, rotate: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random crop, horizontal flip and quarter-turn rotation, applied identically to both.

    ``image`` is (C, H, W) and ``label`` is (H, W). Draws from ``rng`` in a fixed
    order (crop y, crop x, flip, rotation) regardless of which transforms are on.
    """
    h, w = label.shape
    crop = crop or min(h, w)
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    do_flip = bool(rng.integers(0, 2))
    quarter_turns = int(rng.integers(0, 4))
    image = image[:, y:y + crop, x:x + crop]
    label = label[y:y + crop, x:x + crop]
    if flip and do_flip:
        image, label = image[:, :, ::-1], label[:, ::-1]
    if rotate and quarter_turns:
        image = np.rot90(image, quarter_turns, axes=(1, 2))
        label = np.rot90(label, quarter_turns)
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float


def train_phase(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    epochs: int,
    rng: np.random.Generator,
    state: Optional[OptimizerState] = None,
    start_epoch: int = 0,
    base_lr: Optional[float] = None,
) -> List[EpochRecord]:
    """Shuffled minibatch SGD with the poly schedule; returns one record per epoch."""
    if len(images) == 0:
        raise ValueError("empty training set")
    state = state if state is not None else OptimizerState()
    base_lr = cfg.base_lr if base_lr is None else base_lr
    history = []
    for epoch in range(start_epoch, epochs):
        lr = poly_lr(epoch, epochs, base_lr, cfg.power)
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [augment(images[j], labels[j], rng, cfg.crop, cfg.flip, cfg.rotate)
                     for j in order[start:start + cfg.batch_size]]
            x = np.stack([b[0] for b in batch]).astype(DTYPE)
            y = np.stack([b[1] for b in batch])
            losses.append(train_step(net, x, y, lr, cfg, state))
        record = EpochRecord(epoch + 1, lr, float(np.mean(losses)))
        logger.info("epoch %d lr %.6f loss %.5f", record.epoch, record.lr, record.loss)
        history.append(record)
    return history


def two_phase_training(
    net: SegNet,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    padding: PaddingMode,
    rng: np.random.Generator,
) -> Tuple[List[EpochRecord], List[EpochRecord]]:
    """Pretrain with zero padding, then swap in ``padding`` and train again from the base rate."""
    net.set_padding(PaddingMode(ZERO))
    first = train_phase(net, images, labels, cfg, cfg.epochs_phase1, rng)
    net.set_padding(padding, rng, cfg.pp_init_scale)
    second = train_phase(net, images, labels, cfg, cfg.epochs_phase2, rng)
    return first, second
