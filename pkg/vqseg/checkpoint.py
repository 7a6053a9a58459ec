"""
Versioned binary checkpoints.

Layout (all integers little-endian):

    8 bytes   magic b"VQSEGCK1"
    uint32    format version (1)
    uint64    manifest length M
    M bytes   manifest, UTF-8 JSON: config echo, seed, iteration and the
              number of arrays in each section
    then, for every array of the sections params, buffers, optimizer in order:
        uint16    name length L
        L bytes   name, UTF-8
        uint8     dtype code (0 float32, 1 float64, 2 int64)
        uint8     ndim
        ndim x uint64  dimensions
        raw array bytes, C order, little-endian
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional

import numpy as np

from .config import RunConfig, config_diff
from .errors import ConfigurationError, DataError
from .layers import Module

logger = logging.getLogger(__name__)

MAGIC = b"VQSEGCK1"
VERSION = 1
SECTIONS = ("params", "buffers", "optimizer")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    manifest: Dict[str, Any]
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def iteration(self) -> int:
        return int(self.manifest.get("iteration", 0))

    @property
    def config(self) -> Dict[str, Any]:
        return self.manifest.get("config", {})


def _write_array(f: BinaryIO, name: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise ConfigurationError(f"cannot checkpoint {name} with dtype {array.dtype}")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim))
    f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    f.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def _read_exact(f: BinaryIO, n: int, path: Path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"checkpoint {path} is truncated")
    return data


def _read_array(f: BinaryIO, path: Path):
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, path))
    name = _read_exact(f, name_len, path).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2, path))
    if code not in _CODE_DTYPES:
        raise DataError(f"checkpoint {path}: unknown dtype code {code} for {name}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, path))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(f, count * dtype.itemsize, path)
    array = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    return name, array


def save_checkpoint(
    path: Path,
    model: Module,
    cfg: RunConfig,
    iteration: int,
    optimizer_state: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    """Write a checkpoint atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sections = {
        "params": OrderedDict((name, p.data) for name, p in model.named_parameters()),
        "buffers": OrderedDict(model.named_buffers()),
        "optimizer": OrderedDict(optimizer_state or {}),
    }
    manifest = {
        "format": "vqseg-checkpoint",
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "iteration": int(iteration),
        "sections": {name: len(sections[name]) for name in SECTIONS},
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(encoded)))
        f.write(encoded)
        for section in SECTIONS:
            for name, array in sections[section].items():
                _write_array(f, name, array)
    os.replace(tmp, path)
    logger.info("Saved checkpoint %s (iteration %d)", path, iteration)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), path) != MAGIC:
            raise DataError(f"{path} is not a vqseg checkpoint")
        version, manifest_len = struct.unpack("<IQ", _read_exact(f, 12, path))
        if version != VERSION:
            raise DataError(f"checkpoint {path} has format version {version}, expected {VERSION}")
        manifest = json.loads(_read_exact(f, manifest_len, path).decode("utf-8"))
        ckpt = Checkpoint(manifest=manifest)
        for section in SECTIONS:
            target = getattr(ckpt, section)
            for _ in range(manifest["sections"].get(section, 0)):
                name, array = _read_array(f, path)
                target[name] = array
    return ckpt


def check_config(ckpt: Checkpoint, cfg: RunConfig) -> None:
    """Raise when the model architecture in cfg differs from the checkpoint's."""
    current = cfg.model_dump(mode="json")
    diff = config_diff(ckpt.config, current)
    blocking = [name for name in diff if name.startswith("model.") and not name.endswith(".seed")]
    if blocking:
        raise ConfigurationError(f"config does not match checkpoint; differing fields: {', '.join(blocking)}")
    if diff:
        logger.info("Checkpoint was written with different run settings: %s", ", ".join(diff))


def restore(model: Module, ckpt: Checkpoint, cfg: Optional[RunConfig] = None) -> None:
    """Copy parameters and buffers from ckpt into model (in place)."""
    if cfg is not None:
        check_config(ckpt, cfg)
    params = OrderedDict(model.named_parameters())
    missing: List[str] = sorted(set(params) ^ set(ckpt.params))
    if missing:
        raise ConfigurationError(f"checkpoint parameters differ from the model: {', '.join(missing)}")
    for name, tensor in params.items():
        stored = ckpt.params[name]
        if stored.shape != tensor.shape:
            raise ConfigurationError(f"parameter {name}: checkpoint {stored.shape} vs model {tensor.shape}")
        tensor.data[...] = stored
    for name, buffer in model.named_buffers():
        if name not in ckpt.buffers:
            raise ConfigurationError(f"checkpoint has no buffer {name}")
        buffer[...] = ckpt.buffers[name]
