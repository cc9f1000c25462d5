"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"SACN" | u32 version | 32-byte sha256 of the model config | u32 n_params
    n_params x tensor                      # model parameters, enumeration order
    u64 optimizer step | u32 n_moments | n_moments x tensor   # AdamW m then v
    u32 json_len | json                    # kappa state, epoch, rng, configs

    tensor := u32 name_len | name | u8 dtype (1 = f32, 2 = f64) | u32 rank | rank x u32 dims | values
"""
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

MAGIC = b"SACN"
VERSION = 1
_DT = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_digest: bytes
    params: Dict[str, np.ndarray]
    opt_step: int = 0
    moments: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def digest_bytes(hexdigest: str) -> bytes:
    return bytes.fromhex(hexdigest)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODE:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", _CODE[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_DT[_CODE[arr.dtype]], copy=False).tobytes()


def _unpack_tensor(buf: memoryview, pos: int):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    name = bytes(buf[pos:pos + n]).decode()
    pos += n
    code, rank = struct.unpack_from("<BI", buf, pos)
    pos += 5
    if code not in _DT:
        raise CheckpointError(f"{name}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _DT[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise CheckpointError(f"{name}: truncated tensor data")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return name, arr, pos + nbytes


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), ckpt.config_digest, struct.pack("<I", len(ckpt.params))]
    parts += [_pack_tensor(k, v) for k, v in ckpt.params.items()]
    parts.append(struct.pack("<QI", ckpt.opt_step, len(ckpt.moments)))
    parts += [_pack_tensor(k, v) for k, v in ckpt.moments.items()]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def decode(blob: bytes, expected_digest: Optional[bytes] = None) -> Checkpoint:
    buf = memoryview(blob)
    if bytes(buf[:4]) != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(buf[8:40])
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("checkpoint was written for a different model config (digest mismatch)")
    (n,) = struct.unpack_from("<I", buf, 40)
    pos = 44
    params = {}
    for _ in range(n):
        name, arr, pos = _unpack_tensor(buf, pos)
        params[name] = arr
    step, nm = struct.unpack_from("<QI", buf, pos)
    pos += 12
    moments = {}
    for _ in range(nm):
        name, arr, pos = _unpack_tensor(buf, pos)
        moments[name] = arr
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(bytes(buf[pos:pos + mlen]).decode())
    if pos + mlen != len(buf):
        raise CheckpointError("trailing bytes after checkpoint metadata")
    return Checkpoint(digest, params, step, moments, meta)


def save(path, ckpt: Checkpoint) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode(ckpt))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def load(path, expected_digest: Optional[bytes] = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    try:
        return decode(blob, expected_digest)
    except (CheckpointError, struct.error) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
