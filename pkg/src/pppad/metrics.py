"""Translation-invariance and accuracy metrics for sliding-window segmentation.

Overlapping patches vote a class for every pixel they cover. Per-pixel vote
entropy (base 2) measures how much the predictions disagree; ``meanE`` is its
mean over all pixels and ``disR`` the fraction of pixels above a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch: int
    stride: int
    coords: Tuple[Tuple[int, int], ...]

    def __len__(self):
        return len(self.coords)


def _axis_positions(length: int, patch: int, stride: int) -> List[int]:
    positions = list(range(0, length - patch + 1, stride))
    if positions[-1] != length - patch:
        positions.append(length - patch)
    return positions


def build_patch_grid(height: int, width: int, patch: int, stride: int) -> PatchGrid:
    """Row-major sliding-window positions; the last window on each axis sits flush with the border."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if patch < 1 or patch > height or patch > width:
        raise ValueError(f"patch {patch} does not fit a {height}x{width} image")
    if stride > patch:
        raise ValueError(f"stride {stride} > patch {patch} would leave pixels uncovered")
    ys = _axis_positions(height, patch, stride)
    xs = _axis_positions(width, patch, stride)
    return PatchGrid(height, width, patch, stride, tuple((y, x) for y in ys for x in xs))


@dataclass
class VoteHistogram:
    """Per-pixel class vote counts, shape (pixels, K). Rows of several images may be pooled."""

    counts: np.ndarray

    @classmethod
    def empty(cls, pixels: int, num_classes: int) -> "VoteHistogram":
        return cls(np.zeros((pixels, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.counts.shape[0]

    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @classmethod
    def pool(cls, hists: Iterable["VoteHistogram"]) -> "VoteHistogram":
        return cls(np.concatenate([h.counts for h in hists], axis=0))


def accumulate_votes(grid: PatchGrid, class_maps: Sequence[np.ndarray], num_classes: int) -> VoteHistogram:
    """Vote every patch's per-pixel classes into the image-sized histogram."""
    if len(class_maps) != len(grid.coords):
        raise ValueError(f"{len(class_maps)} class maps for {len(grid.coords)} patches")
    counts = np.zeros((grid.height, grid.width, num_classes), dtype=np.int64)
    p = grid.patch
    rows, cols = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    for (y, x), cmap in zip(grid.coords, class_maps):
        cmap = np.asarray(cmap)
        if cmap.shape != (p, p):
            raise ValueError(f"class map shape {cmap.shape} != {(p, p)}")
        if cmap.min() < 0 or cmap.max() >= num_classes:
            raise ValueError(f"class indices must lie in [0, {num_classes - 1}]")
        np.add.at(counts, (rows + y, cols + x, cmap.astype(np.int64)), 1)
    return VoteHistogram(counts.reshape(-1, num_classes))


def entropy_map(hist: VoteHistogram) -> np.ndarray:
    """Base-2 entropy of every row's vote distribution."""
    counts = hist.counts.astype(np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise ValueError("every pixel needs at least one vote")
    p = counts / totals
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return np.abs(-terms.sum(axis=1))


def pixel_entropy(row: Sequence[int]) -> float:
    """Entropy in bits of one pixel's vote counts."""
    row = np.asarray(row)
    if row.sum() < 1:
        raise ValueError("empty vote row")
    return float(entropy_map(VoteHistogram(row[None, :]))[0])


def mean_entropy(hist: VoteHistogram) -> float:
    return float(entropy_map(hist).mean())


def disagreement_rate(hist: VoteHistogram, theta: float = 0.0) -> float:
    """Fraction of pixels whose vote entropy is strictly above ``theta``."""
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    return float(np.mean(entropy_map(hist) > theta))


@dataclass
class InvarianceReport:
    meanE: float
    disR: float
    theta: float
    N: int
    K: int
    entropy: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_histogram(cls, hist: VoteHistogram, theta: float = 0.0, keep_map: bool = False) -> "InvarianceReport":
        e = entropy_map(hist)
        report = cls(
            meanE=float(e.mean()),
            disR=float(np.mean(e > theta)),
            theta=float(theta),
            N=hist.num_pixels,
            K=hist.num_classes,
            entropy=e if keep_map else None,
        )
        report.check_bounds()
        return report

    def check_bounds(self):
        """Entropy of K classes cannot exceed log2(K); anything above it is a bookkeeping bug."""
        bound = math.log2(self.K) if self.K > 1 else 0.0
        if not (0.0 <= self.meanE <= bound + 1e-12):
            raise AssertionError(f"meanE={self.meanE} outside [0, log2 K={bound}]")
        if not (0.0 <= self.disR <= 1.0):
            raise AssertionError(f"disR={self.disR} outside [0, 1]")

    def to_dict(self) -> Dict[str, float]:
        return {"meanE": self.meanE, "disR": self.disR, "theta": self.theta, "N": self.N, "K": self.K}


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts indexed (ground truth, prediction)."""
    truth = np.asarray(truth).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction must have the same number of pixels")
    if truth.size and (min(truth.min(), pred.min()) < 0 or max(truth.max(), pred.max()) >= num_classes):
        raise ValueError(f"class indices must lie in [0, {num_classes - 1}]")
    return np.bincount(truth * num_classes + pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes that appear in either ground truth or prediction."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        return 0.0
    return float(np.mean(inter[present] / union[present]))


def sliding_window_eval(
    predict: Callable[[np.ndarray], np.ndarray],
    images: np.ndarray,
    labels: np.ndarray,
    patch: int,
    stride: int,
    num_classes: int,
    theta: float = 0.0,
    batch_size: int = 32,
    keep_map: bool = False,
) -> Tuple[InvarianceReport, float, np.ndarray]:
    """Crop overlapping patches, predict each, and score invariance and accuracy.

    ``predict`` maps a (B, C, P, P) batch to (B, P, P) class indices. Returns the
    pooled invariance report, mIoU over all patch pixels, and the confusion matrix.
    """
    _, _, h, w = images.shape
    grid = build_patch_grid(h, w, patch, stride)
    hists = []
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for image, label in zip(images, labels):
        crops = np.stack([image[:, y:y + patch, x:x + patch] for y, x in grid.coords])
        maps = np.concatenate([predict(crops[i:i + batch_size]) for i in range(0, len(crops), batch_size)])
        hists.append(accumulate_votes(grid, list(maps), num_classes))
        truth = np.stack([label[y:y + patch, x:x + patch] for y, x in grid.coords])
        cm += confusion_matrix(truth, maps, num_classes)
    report = InvarianceReport.from_histogram(VoteHistogram.pool(hists), theta, keep_map=keep_map)
    return report, miou(cm), cm


def cyclic_shift_votes(
    predict: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    shifts: Sequence[Tuple[int, int]],
    num_classes: int,
) -> Tuple[VoteHistogram, np.ndarray]:
    """Votes of a toroidal image predicted under each cyclic shift, with every shift undone.

    ``image`` is (C, H, W); ``predict`` maps (B, C, H, W) to (B, H, W) classes.
    Also returns the unshifted class maps, shape (len(shifts), H, W).
    """
    _, h, w = image.shape
    counts = np.zeros((h * w, num_classes), dtype=np.int64)
    flat = np.arange(h * w)
    maps = []
    for dy, dx in shifts:
        shifted = np.roll(image, (dy, dx), axis=(1, 2))
        classes = np.roll(predict(shifted[None])[0], (-dy, -dx), axis=(0, 1)).astype(np.int64)
        np.add.at(counts, (flat, classes.ravel()), 1)
        maps.append(classes)
    return VoteHistogram(counts), np.stack(maps)


def cyclic_shift_eval(
    predict: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    shifts: Sequence[Tuple[int, int]],
    num_classes: int,
    theta: float = 0.0,
) -> InvarianceReport:
    """Invariance report of :func:`cyclic_shift_votes`."""
    return InvarianceReport.from_histogram(cyclic_shift_votes(predict, image, shifts, num_classes)[0], theta)


def write_pgm(path, values: np.ndarray, max_value: float):
    """Binary 8-bit portable graymap, values scaled from [0, max_value]."""
    scaled = np.clip(np.asarray(values, dtype=np.float64) / max(max_value, 1e-12), 0, 1)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
