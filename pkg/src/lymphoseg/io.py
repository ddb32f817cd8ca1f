"""On-disk formats: raw rasters, checkpoints, key = value text, PGM exports."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .segnet import NetworkConfig, NetworkParams

CHECKPOINT_MAGIC = b"HSEG"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<II")


class FormatError(ValueError):
    """A file does not match the expected layout."""


# ------------------------------------------------------------------ rasters


def write_raster(path, array: np.ndarray) -> None:
    """``.img`` (uint16) or ``.lbl`` (uint8): width u32, height u32, then row-major pixels, little-endian."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"rasters are 2-D; got shape {array.shape}")
    dtype = "<u2" if Path(path).suffix == ".img" else "u1"
    if array.dtype.kind == "f" or array.min(initial=0) < 0 or array.max(initial=0) > np.iinfo(np.dtype(dtype)).max:
        raise ValueError(f"values of {array.dtype} do not fit a {dtype} raster")
    h, w = array.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(w, h))
        fh.write(array.astype(dtype).tobytes())


def read_raster(path) -> np.ndarray:
    path = Path(path)
    dtype = np.dtype("<u2") if path.suffix == ".img" else np.dtype("u1")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    w, h = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    if len(body) != w * h * dtype.itemsize:
        raise FormatError(f"{path}: expected {w}x{h} pixels of {dtype}, found {len(body)} bytes")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.uint16 if dtype.itemsize == 2 else np.uint8)


# -------------------------------------------------------------- key = value


def parse_kv(text: str, source: str = "<config>") -> "OrderedDict[str, str]":
    out: OrderedDict[str, str] = OrderedDict()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise FormatError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dict(items).items())


# -------------------------------------------------------------- checkpoints


def _config_items(config: NetworkConfig, epoch: int) -> dict:
    return {
        "input_channels": config.input_channels,
        "num_classes": config.num_classes,
        "widths": ",".join(str(w) for w in config.widths),
        "seed": config.seed,
        "epoch": epoch,
    }


def save_checkpoint(path, params: NetworkParams, epoch: int = 0) -> None:
    """Magic, version u32, length-prefixed config text, then a tensor table of
    (name, dims, little-endian float32 values)."""
    config = format_kv(_config_items(params.config, epoch)).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(config)), config,
             struct.pack("<I", len(params.tensors))]
    for name, t in params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[NetworkParams, int]:
    """Returns the parameters and the stored epoch counter."""
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    cfg = parse_kv(r.take(r.u32()).decode(), str(path))
    config = NetworkConfig(
        input_channels=int(cfg["input_channels"]),
        num_classes=int(cfg["num_classes"]),
        widths=tuple(int(w) for w in cfg["widths"].split(",")),
        seed=int(cfg["seed"]),
    )
    tensors = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return NetworkParams(config, tensors), int(cfg.get("epoch", 0))


# ---------------------------------------------------------------- exports


def write_pgm(path, values: np.ndarray) -> tuple[float, float]:
    """Min-max scale to 8 bits and write a binary PGM; returns (min, max) used."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape, np.uint8) if hi == lo else np.rint((v - lo) / (hi - lo) * 255).astype(np.uint8)
    h, w = scaled.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(scaled.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(x) for x in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
