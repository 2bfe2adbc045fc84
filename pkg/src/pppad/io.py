"""File formats: the PTNS tensor container, ``key = value`` configs and checkpoints."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Tuple, Union

import numpy as np

MAGIC = b"PTNS"
VERSION = 1

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def atomic_write(path: PathLike, data: bytes):
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str):
    atomic_write(path, text.encode("utf-8"))


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    header = MAGIC + struct.pack("<HH", VERSION, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise FormatError("not a PTNS tensor file")
    version, rank = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported PTNS version {version}")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    offset = 8 + 4 * rank
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(data) - offset != expected:
        raise FormatError(f"payload is {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def save_tensor(path: PathLike, array: np.ndarray):
    atomic_write(path, encode_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- experiment config -------------------------------------------------------

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "data.dir": "",
    "data.train_count": 200,
    "data.eval_count": 20,
    "data.size": 64,
    "data.classes": 4,
    "data.noise": 0.1,
    "data.jitter": 0.1,
    "model.widths": (16, 16, 16, 16),
    "pad.mode": ("zero", "replicate", "circular", "partial", "pp-pad"),
    "pad.h_p": 2,
    "pad.w_p": 3,
    "pad.n": 8,
    "train.base_lr": 0.01,
    "train.power": 0.9,
    "train.momentum": 0.9,
    "train.weight_decay": 0.0001,
    "train.batch_size": 100,
    "train.epochs_phase1": 30,
    "train.epochs_phase2": 30,
    "train.crop": 32,
    "train.flip": True,
    "train.rotate": True,
    "train.pp_init_scale": 0.1,
    "eval.patch": 32,
    "eval.stride": 8,
    "eval.theta": 0.0,
    "eval.oracle": "sliding",
    "eval.shifts": 16,
    "eval.entropy_map": False,
    "bench.iters": 20,
    "bench.warmup": 3,
}


def _convert(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [item.strip() for item in raw.split(",") if item.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(i) for i in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r}") from None


@dataclass
class ExperimentConfig:
    values: Dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls(dict(DEFAULTS))

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
        values = dict(DEFAULTS)
        seen = set()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"config key {key!r} given twice")
            seen.add(key)
            values[key] = _convert(key, raw)
        return cls(values)

    @classmethod
    def load(cls, path: PathLike) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text())

    def override(self, **pairs: Any) -> "ExperimentConfig":
        values = dict(self.values)
        for key, value in pairs.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _convert(key, value) if isinstance(value, str) else value
        return ExperimentConfig(values)

    def dumps(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


# -- checkpoints -------------------------------------------------------------

def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".ptns"


def save_checkpoint(directory: PathLike, tensors: Iterable[Tuple[str, np.ndarray]], meta: Dict[str, Any]):
    """One PTNS file per tensor plus ``manifest.json`` listing names in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names: List[str] = []
    for name, array in tensors:
        save_tensor(directory / _tensor_file(name), array)
        names.append(name)
    manifest = {"tensors": names, **meta}
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    tensors = {name: load_tensor(directory / _tensor_file(name)) for name in manifest["tensors"]}
    return tensors, manifest
