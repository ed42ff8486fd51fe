"""Binary checkpoint format.

Layout (little-endian): magic ``CVFC``, u32 version=1, u32 tensor count,
then per tensor: u16 name length, UTF-8 name, u8 dtype code, u8 ndim,
ndim x u64 dims, raw row-major data. A u32 CRC32 of all preceding bytes
closes the file. Dtype codes: 0=f32, 1=f64 for parameters and buffers,
plus 2=u64 (counters, RNG state, config hash) and 3=u8 (embedded config
JSON) so a checkpoint fully describes the run that produced it.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError

MAGIC = b"CVFC"
VERSION = 1

_CODE_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "<u8", 3: "u1"}
_KIND_TO_CODE = {("f", 4): 0, ("f", 8): 1, ("u", 8): 2, ("u", 1): 3}

EPOCH_KEY = "__epoch__"
RNG_KEY = "__rng_state__"
CONFIG_HASH_KEY = "__config_hash__"
CONFIG_JSON_KEY = "__config_json__"
OPT_PREFIX = "__opt__.momentum."


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_CODE:
        raise CheckpointError(f"unsupported checkpoint dtype {arr.dtype}")
    return _KIND_TO_CODE[key]


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Serialize named arrays in insertion order."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint; magic/CRC errors and truncation are corrupt,
    an unknown version is a distinct version error."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 + 4:
        raise CorruptCheckpointError(f"checkpoint {path} is too short")
    if raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"checkpoint {path} has bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has version {version}, this build reads {VERSION}"
        )
    payload, (crc_stored,) = raw[:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CorruptCheckpointError(f"checkpoint {path} failed its CRC check")

    tensors: dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off : off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", payload, off)
            off += 2
            if code not in _CODE_TO_DTYPE:
                raise CorruptCheckpointError(f"unknown dtype code {code} in {path}")
            dims = struct.unpack_from(f"<{ndim}Q", payload, off)
            off += 8 * ndim
            dtype = np.dtype(_CODE_TO_DTYPE[code])
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
            if off + nbytes > len(payload):
                raise CorruptCheckpointError(f"checkpoint {path} is truncated")
            arr = np.frombuffer(payload, dtype=dtype, count=max(int(np.prod(dims)), 1) if ndim else 1, offset=off)
            off += nbytes
            tensors[name] = arr.reshape(dims).copy()
    except struct.error as exc:
        raise CorruptCheckpointError(f"checkpoint {path} is truncated: {exc}") from exc
    if off != len(payload):
        raise CorruptCheckpointError(f"checkpoint {path} has {len(payload) - off} trailing bytes")
    return tensors


def save_training_state(path, model, optimizer, epoch: int, cfg: TrainConfig) -> None:
    """Checkpoint parameters, BN buffers, optimizer state and run metadata."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params().items():
        tensors[name] = p.data
    for name, arr in model.buffers().items():
        tensors[name] = arr
    for name, arr in optimizer.state_arrays().items():
        tensors[OPT_PREFIX + name] = arr
    tensors[EPOCH_KEY] = np.asarray([epoch], dtype=np.uint64)
    tensors[RNG_KEY] = np.asarray([cfg.seed & 0xFFFFFFFF, epoch], dtype=np.uint64)
    tensors[CONFIG_HASH_KEY] = np.frombuffer(cfg.config_hash(), dtype=np.uint64).copy()
    tensors[CONFIG_JSON_KEY] = np.frombuffer(cfg.to_json().encode("utf-8"), dtype=np.uint8).copy()
    write_tensors(path, tensors)


def load_training_state(path, dtype=np.float32):
    """Rebuild (model, momentum_state, epoch, cfg) from a checkpoint.

    Parameters and buffers are restored bitwise; the embedded config JSON
    is authoritative and re-verified against the stored hash.
    """
    from .model import build_model
    from .train import SGD

    tensors = read_tensors(path)
    for key in (EPOCH_KEY, CONFIG_HASH_KEY, CONFIG_JSON_KEY):
        if key not in tensors:
            raise CorruptCheckpointError(f"checkpoint {path} lacks {key}")
    cfg = TrainConfig.from_json(bytes(tensors[CONFIG_JSON_KEY].tobytes()).decode("utf-8"))
    stored_hash = tensors[CONFIG_HASH_KEY].tobytes()
    if stored_hash != cfg.config_hash():
        raise CorruptCheckpointError(f"checkpoint {path} config hash mismatch")
    epoch = int(tensors[EPOCH_KEY][0])

    model = build_model(cfg, dtype)
    params = model.params()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint {path} missing parameter {name}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"checkpoint parameter {name} shape {arr.shape} != model {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=True)
    for name, buf in model.buffers().items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint {path} missing buffer {name}")
        buf[...] = tensors[name].astype(buf.dtype, copy=False)

    optimizer = SGD(params, lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    for name in params:
        key = OPT_PREFIX + name
        if key in tensors:
            optimizer.restore_state(name, tensors[key].astype(np.float64 if params[name].data.dtype == np.float64 else np.float32))
    return model, optimizer, epoch, cfg
