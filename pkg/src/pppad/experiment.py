"""Experiment pipeline behind the command line: data, training, evaluation,
gradient checks, timing and parameter audits.

Every random draw is derived from the configured seed plus a fixed tag, so a
rerun with the same configuration writes byte-identical files.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import statistics
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import generate_dataset
from .io import ConfigError, ExperimentConfig, atomic_write_text, load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .metrics import (
    InvarianceReport,
    VoteHistogram,
    confusion_matrix,
    cyclic_shift_votes,
    miou,
    sliding_window_eval,
    write_pgm,
)
from .padding import (
    CLASSIC_MODES,
    ZERO,
    PaddingMode,
    pad,
    pad_backward,
    partial_conv2d,
    partial_conv2d_backward,
)
from .pppad import (
    EdgePredictor,
    PPPadConfig,
    layer_from_flat,
    param_count,
    pp_pad,
    pp_pad_backward,
    pp_pad_forward,
    preactivations,
)
from .segnet import EpochRecord, OptimizerState, SegNet, SegNetConfig, TrainConfig, train_phase, train_step
from .tensor import (
    DTYPE,
    ConvKernel,
    conv2d_backward,
    conv2d_valid,
    gradient_check,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-5


def tagged_rng(seed: int, tag: str) -> np.random.Generator:
    """Independent stream per (seed, tag); the tag is hashed with CRC-32."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]))


# -- configuration helpers ---------------------------------------------------

def pp_config_of(cfg: ExperimentConfig) -> PPPadConfig:
    return PPPadConfig(cfg["pad.h_p"], cfg["pad.w_p"], cfg["pad.n"])


def padding_of(cfg: ExperimentConfig, name: str) -> PaddingMode:
    return PaddingMode.parse(name, pp_config_of(cfg))


def modes_of(cfg: ExperimentConfig) -> List[PaddingMode]:
    modes = [padding_of(cfg, name) for name in cfg["pad.mode"]]
    if not modes:
        raise ValueError("pad.mode lists no padding modes")
    return modes


def validate(cfg: ExperimentConfig):
    """Reject values no command could run with, before any work starts."""
    modes_of(cfg)
    size = cfg["data.size"]
    checks = [
        (size >= 32, f"data.size must be >= 32, got {size}"),
        (cfg["data.classes"] >= 2, "data.classes must be >= 2"),
        (cfg["data.train_count"] >= 1 and cfg["data.eval_count"] >= 1, "data counts must be positive"),
        (cfg["data.noise"] >= 0 and cfg["data.jitter"] >= 0, "data.noise and data.jitter must be >= 0"),
        (1 <= cfg["train.crop"] <= size, f"train.crop must lie in [1, {size}]"),
        (cfg["train.batch_size"] >= 1, "train.batch_size must be positive"),
        (cfg["train.epochs_phase1"] >= 0 and cfg["train.epochs_phase2"] >= 0, "epochs must be >= 0"),
        (cfg["train.base_lr"] >= 0, "train.base_lr must be >= 0"),
        (1 <= cfg["eval.patch"] <= size, f"eval.patch must lie in [1, {size}]"),
        (1 <= cfg["eval.stride"] <= cfg["eval.patch"], "eval.stride must lie in [1, eval.patch]"),
        (cfg["eval.theta"] >= 0, "eval.theta must be >= 0"),
        (cfg["eval.oracle"] in ("sliding", "cyclic"), "eval.oracle must be 'sliding' or 'cyclic'"),
        (cfg["eval.shifts"] >= 1, "eval.shifts must be positive"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def net_config_of(cfg: ExperimentConfig) -> SegNetConfig:
    return SegNetConfig(3, tuple(cfg["model.widths"]), cfg["data.classes"])


def train_config_of(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        base_lr=cfg["train.base_lr"],
        power=cfg["train.power"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        epochs_phase1=cfg["train.epochs_phase1"],
        epochs_phase2=cfg["train.epochs_phase2"],
        crop=cfg["train.crop"],
        flip=cfg["train.flip"],
        rotate=cfg["train.rotate"],
        pp_init_scale=cfg["train.pp_init_scale"],
    )


def data_dir_of(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg["data.dir"]) if cfg["data.dir"] else Path(out) / "data"


def checkpoint_dir(out: Path, mode: PaddingMode) -> Path:
    return Path(out) / "checkpoints" / mode.tag


# -- data ----------------------------------------------------------------------

SPLITS = ("train", "eval")


def make_datasets(cfg: ExperimentConfig) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Train and eval splits from independent streams of the configured seed."""
    size, k = cfg["data.size"], cfg["data.classes"]
    out = {}
    for split in SPLITS:
        seed = int(tagged_rng(cfg["seed"], f"data.{split}").integers(0, 2**63))
        out[split] = generate_dataset(
            seed, cfg[f"data.{split}_count"], size, size, k, cfg["data.noise"], cfg["data.jitter"]
        )
    return out


def gen_data(cfg: ExperimentConfig, directory: Path) -> Dict[str, Path]:
    """Write ``<split>_images.ptns`` and ``<split>_labels.ptns`` for both splits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = {}
    for split, (images, labels) in make_datasets(cfg).items():
        save_tensor(directory / f"{split}_images.ptns", images)
        save_tensor(directory / f"{split}_labels.ptns", labels.astype(np.float32))
        written[split] = directory
    return written


def load_split(directory: Path, split: str) -> Tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    paths = [directory / f"{split}_images.ptns", directory / f"{split}_labels.ptns"]
    for path in paths:
        if not path.exists():
            raise FileNotFoundError(f"missing dataset file {path} (run gen-data first)")
    images = load_tensor(paths[0])
    labels = load_tensor(paths[1]).astype(np.int64)
    return images, labels


# -- checkpoints ---------------------------------------------------------------

def save_training_state(
    directory: Path,
    net: SegNet,
    state: OptimizerState,
    rng: np.random.Generator,
    epoch: int,
    extra: Optional[dict] = None,
):
    """Parameters, momentum buffers, epoch counter and generator state."""
    tensors = list(net.named_parameters())
    tensors += [(f"velocity/{name}", state.velocity[name]) for name, _ in net.named_parameters()
                if name in state.velocity]
    pp = net.padding.pp_config
    meta = {
        "epoch": epoch,
        "padding": net.padding.tag,
        "pp_config": [pp.h_p, pp.w_p, pp.n] if pp else None,
        "widths": list(net.config.widths),
        "in_channels": net.config.in_channels,
        "classes": net.config.num_classes,
        "rng_state": rng.bit_generator.state,
        **(extra or {}),
    }
    save_checkpoint(directory, tensors, meta)


def load_training_state(directory: Path) -> Tuple[SegNet, OptimizerState, np.random.Generator, dict]:
    tensors, meta = load_checkpoint(directory)
    pp = PPPadConfig(*meta["pp_config"]) if meta["pp_config"] else None
    padding = PaddingMode(meta["padding"], pp)
    config = SegNetConfig(meta["in_channels"], tuple(meta["widths"]), meta["classes"])
    net = SegNet(config, padding, np.random.default_rng(0))
    for name, param in net.named_parameters():
        if name not in tensors:
            raise ValueError(f"checkpoint {directory} lacks tensor {name!r}")
        if tensors[name].shape != param.shape:
            raise ValueError(f"tensor {name!r} has shape {tensors[name].shape}, expected {param.shape}")
        param[...] = tensors[name]
    state = OptimizerState({name[len("velocity/"):]: value.copy() for name, value in tensors.items()
                            if name.startswith("velocity/")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return net, state, rng, meta


# -- training ------------------------------------------------------------------

def loss_csv(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr", "loss"])
    for r in records:
        writer.writerow([r.epoch, f"{r.lr:.8g}", f"{r.loss:.8g}"])
    return buf.getvalue()


@dataclass
class TrainingRun:
    mode: PaddingMode
    phase1: List[EpochRecord]
    phase2: List[EpochRecord]


def run_training(cfg: ExperimentConfig, out: Path, images=None, labels=None) -> Dict[str, TrainingRun]:
    """Zero-padding pretraining once, then a second phase for every configured mode.

    Writes ``loss-phase1.csv``, ``loss-<mode>.csv`` and one checkpoint directory per mode.
    """
    out = Path(out)
    if images is None:
        images, labels = load_split(data_dir_of(cfg, out), "train")
    tcfg = train_config_of(cfg)
    seed = cfg["seed"]
    rng = tagged_rng(seed, "phase1")
    net = SegNet(net_config_of(cfg), PaddingMode(ZERO), rng)
    state = OptimizerState()
    phase1 = train_phase(net, images, labels, tcfg, tcfg.epochs_phase1, rng, state)
    atomic_write_text(out / "loss-phase1.csv", loss_csv(phase1))
    save_training_state(out / "checkpoints" / "phase1", net, state, rng, tcfg.epochs_phase1)

    runs = {}
    for mode in modes_of(cfg):
        mode_rng = tagged_rng(seed, f"phase2.{mode.tag}")
        model = copy.deepcopy(net)
        model.set_padding(mode, mode_rng, tcfg.pp_init_scale)
        # the optimizer restarts with the learning rate: fresh momentum buffers
        mode_state = OptimizerState()
        phase2 = train_phase(model, images, labels, tcfg, tcfg.epochs_phase2, mode_rng, mode_state)
        atomic_write_text(out / f"loss-{mode.tag}.csv", loss_csv(phase2))
        save_training_state(checkpoint_dir(out, mode), model, mode_state, mode_rng, tcfg.epochs_phase2,
                            {"label": mode.label})
        runs[mode.tag] = TrainingRun(mode, phase1, phase2)
        logger.info("%s: phase-2 loss %.4f -> %.4f", mode.label, phase2[0].loss if phase2 else math.nan,
                    phase2[-1].loss if phase2 else math.nan)
    return runs


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalResult:
    mode: str
    label: str
    report: InvarianceReport
    miou: float

    def to_dict(self) -> dict:
        return {"mode": self.label, "mIoU": self.miou, **self.report.to_dict()}


def _predictor(net: SegNet, batch_size: int = 32) -> Callable[[np.ndarray], np.ndarray]:
    def predict(batch):
        return np.concatenate([net.predict(batch[i:i + batch_size].astype(DTYPE))
                               for i in range(0, len(batch), batch_size)])
    return predict


def evaluate_net(cfg: ExperimentConfig, net: SegNet, images: np.ndarray, labels: np.ndarray,
                 keep_map: bool = False) -> Tuple[InvarianceReport, float]:
    k, theta = cfg["data.classes"], cfg["eval.theta"]
    predict = _predictor(net)
    if cfg["eval.oracle"] == "sliding":
        report, score, _ = sliding_window_eval(
            predict, images, labels, cfg["eval.patch"], cfg["eval.stride"], k, theta, keep_map=keep_map
        )
        return report, score
    if cfg["eval.oracle"] != "cyclic":
        raise ValueError(f"eval.oracle must be 'sliding' or 'cyclic', got {cfg['eval.oracle']!r}")
    rng = tagged_rng(cfg["seed"], "eval.shifts")
    hists, cm = [], np.zeros((k, k), dtype=np.int64)
    for image, label in zip(images, labels):
        h, w = label.shape
        shifts = [(int(a), int(b)) for a, b in zip(rng.integers(0, h, cfg["eval.shifts"]),
                                                   rng.integers(0, w, cfg["eval.shifts"]))]
        hist, maps = cyclic_shift_votes(predict, image, shifts, k)
        hists.append(hist)
        cm += confusion_matrix(np.broadcast_to(label, maps.shape), maps, k)
    report = InvarianceReport.from_histogram(VoteHistogram.pool(hists), theta, keep_map=keep_map)
    return report, miou(cm)


def comparison_csv(results: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mode", "mIoU", "meanE", "disR"])
    for r in results:
        writer.writerow([r.label, f"{r.miou:.6f}", f"{r.report.meanE:.6f}", f"{r.report.disR:.6f}"])
    return buf.getvalue()


def run_eval(cfg: ExperimentConfig, out: Path) -> List[EvalResult]:
    """One JSON report per mode plus ``comparison.csv``; optional entropy maps as PGM."""
    out = Path(out)
    images, labels = load_split(data_dir_of(cfg, out), "eval")
    keep = cfg["eval.entropy_map"]
    results = []
    for mode in modes_of(cfg):
        net, _, _, meta = load_training_state(checkpoint_dir(out, mode))
        report, score = evaluate_net(cfg, net, images, labels, keep_map=keep)
        report.check_bounds()
        result = EvalResult(mode.tag, meta.get("label", mode.label), report, score)
        payload = {**result.to_dict(), "oracle": cfg["eval.oracle"]}
        atomic_write_text(out / f"report-{mode.tag}.json", json.dumps(payload, indent=1, sort_keys=True) + "\n")
        if keep:
            h, w = labels.shape[1:]
            write_pgm(out / f"entropy-{mode.tag}.pgm", report.entropy[: h * w].reshape(h, w),
                      math.log2(report.K))
        results.append(result)
    atomic_write_text(out / "comparison.csv", comparison_csv(results))
    return results


# -- gradient checks -------------------------------------------------------------

def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.copysign(margin, x) + x, x)


def _check_conv(r):
    x, w, b = r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)
    return gradient_check(lambda x, w, b: conv2d_valid(x, ConvKernel(w, b)),
                          lambda g, x, w, b: conv2d_backward(g, x, ConvKernel(w, b)), [x, w, b])


def _check_relu(r):
    x = _away_from_zero(r.standard_normal((2, 3, 4, 4)))
    return gradient_check(relu, lambda g, x: [relu_backward(g, x)], [x])


def _check_softmax_ce(r):
    logits, labels = r.standard_normal((2, 4, 3, 3)), r.integers(0, 4, (2, 3, 3))
    return gradient_check(lambda z: np.array(softmax_cross_entropy(z, labels)[0]),
                          lambda g, z: [softmax_cross_entropy(z, labels)[1] * g], [logits])


def _pad_checker(mode):
    def check(r):
        x = r.standard_normal((2, 2, 4, 5))
        return gradient_check(lambda x: pad(x, mode, 1), lambda g, x: [pad_backward(g, mode, 1, x.shape)], [x])
    return check


def _check_partial(r):
    x, w, b = r.standard_normal((1, 2, 5, 5)), r.standard_normal((2, 2, 3, 3)), r.standard_normal(2)
    return gradient_check(lambda x, w, b: partial_conv2d(x, ConvKernel(w, b), 1),
                          lambda g, x, w, b: partial_conv2d_backward(g, x, ConvKernel(w, b), 1), [x, w, b])


def _check_pp_pad(r, cfg=PPPadConfig(2, 3, 2), shape=(1, 2, 5, 5), margin=1e-3):
    """pp_pad followed by a 3x3 conv, differentiated in the map, the conv and all 12 predictor weights.

    Instances whose predictor ReLU inputs come within ``margin`` of zero are
    redrawn, since central differences across a kink measure nothing useful.
    """
    shapes = [w.shape for w in EdgePredictor.zeros(cfg).weights()] * 4
    while True:
        fm = r.standard_normal(shape)
        flat = [r.uniform(-0.8, 0.8, s) for s in shapes]
        _, cache = pp_pad_forward(fm, layer_from_flat(flat), cfg)
        if np.min(np.abs(preactivations(cache))) > margin:
            break
    conv_w = r.standard_normal((2, shape[1], 3, 3))

    def forward(fm, cw, *ws):
        return conv2d_valid(pp_pad(fm, layer_from_flat(list(ws)), cfg), ConvKernel(cw))

    def backward(g, fm, cw, *ws):
        layer = layer_from_flat(list(ws))
        gp, gcw, _ = conv2d_backward(g, pp_pad(fm, layer, cfg), ConvKernel(cw))
        gfm, glayer = pp_pad_backward(gp, fm, layer, cfg)
        return [gfm, gcw] + [w for _, w in glayer.named_weights()]

    return gradient_check(forward, backward, [fm, conv_w, *flat])


GRADCHECK_OPS: Dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d_valid": _check_conv,
    "relu": _check_relu,
    "softmax_cross_entropy": _check_softmax_ce,
    **{f"pad[{mode}]": _pad_checker(mode) for mode in CLASSIC_MODES},
    "partial_conv2d": _check_partial,
    "pp_pad": _check_pp_pad,
}


def run_gradcheck(seed: int = 0, instances: int = 20, ops: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """Worst relative error per op over ``instances`` random float64 instances."""
    worst = {}
    for name in ops or GRADCHECK_OPS:
        check = GRADCHECK_OPS[name]
        rng = tagged_rng(seed, f"gradcheck.{name}")
        worst[name] = max(check(rng) for _ in range(instances))
    return worst


def gradcheck_table(errors: Dict[str, float], tolerance: float = GRADCHECK_TOLERANCE) -> str:
    width = max(len(name) for name in errors)
    lines = [f"{'op':<{width}}  max_rel_err  status"]
    for name, err in errors.items():
        lines.append(f"{name:<{width}}  {err:11.3e}  {'pass' if err < tolerance else 'FAIL'}")
    return "\n".join(lines)


# -- timing ----------------------------------------------------------------------

MIN_BENCH_ITERS, MIN_BENCH_WARMUP = 20, 3


def _median_seconds(fn: Callable[[], object], iters: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def run_bench(cfg: ExperimentConfig, out: Optional[Path] = None) -> List[dict]:
    """Median training-step and per-image inference times for every mode, zero padding always first."""
    names = [ZERO] + [m.tag for m in modes_of(cfg) if m.tag != ZERO]
    tcfg = train_config_of(cfg)
    iters, warmup = cfg["bench.iters"], cfg["bench.warmup"]
    if iters < MIN_BENCH_ITERS or warmup < MIN_BENCH_WARMUP:
        raise ValueError(f"bench needs >= {MIN_BENCH_ITERS} iterations after >= {MIN_BENCH_WARMUP} warmups")
    data_rng = tagged_rng(cfg["seed"], "bench.data")
    size, k = cfg["data.size"], cfg["data.classes"]
    x = data_rng.random((tcfg.batch_size, 3, tcfg.crop, tcfg.crop)).astype(DTYPE)
    y = data_rng.integers(0, k, (tcfg.batch_size, tcfg.crop, tcfg.crop))
    image = data_rng.random((1, 3, size, size)).astype(DTYPE)
    rows = []
    for name in names:
        mode = padding_of(cfg, name)
        ckpt = checkpoint_dir(out, mode) if out is not None else None
        if ckpt is not None and (ckpt / "manifest.json").exists():
            net = load_training_state(ckpt)[0]
        else:
            net = SegNet(net_config_of(cfg), mode, tagged_rng(cfg["seed"], f"bench.{name}"))
        state = OptimizerState()
        train_s = _median_seconds(lambda: train_step(net, x, y, 0.0, tcfg, state), iters, warmup)
        infer_s = _median_seconds(lambda: net.predict(image), iters, warmup)
        rows.append({"mode": mode.label, "train_s_per_iter": train_s, "infer_s_per_image": infer_s})
    base = rows[0]
    for row in rows:
        row["train_ratio"] = row["train_s_per_iter"] / base["train_s_per_iter"]
        row["infer_ratio"] = row["infer_s_per_image"] / base["infer_s_per_image"]
    if out is not None:
        atomic_write_text(Path(out) / "bench.csv", bench_csv(rows))
    return rows


def bench_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    fields = ["mode", "train_s_per_iter", "infer_s_per_image", "train_ratio", "infer_ratio"]
    writer = csv.DictWriter(buf, fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# -- parameter audit ---------------------------------------------------------------

def params_table(h_p: int, w_p: int, n: int, channels: Sequence[int]) -> List[dict]:
    """Shared versus naive predictor sizes; the shared count is audited against real arrays."""
    cfg = PPPadConfig(h_p, w_p, n)
    stored = EdgePredictor.zeros(cfg).num_weights
    rows = []
    for c in channels:
        shared, naive = param_count(cfg, c), param_count(cfg, c, naive=True)
        if shared != stored:
            raise AssertionError(f"formula gives {shared} weights but a predictor stores {stored}")
        row = {"h_p": h_p, "w_p": w_p, "n": n, "C": c, "shared": shared, "naive": naive, "savings": naive - shared}
        if (h_p, w_p) == (2, 3):
            row["identity_ok"] = row["savings"] == 7 * n * (c - 1)
        rows.append(row)
    return rows
