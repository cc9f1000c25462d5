"""Synthetic segmentation data and the on-disk array formats.

Each sample holds a background, a large disk (easy), a thin annulus (hard,
thin structure) and a small square (hard, small, present 70% of the time).
Classes beyond four add further small squares.
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

MAGIC = b"SARR"
_DTYPES = {1: np.uint8, 2: np.float32, 3: np.float64, 4: np.int32}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

_COLORS = np.array([
    [0.15, 0.15, 0.20],
    [0.75, 0.30, 0.25],
    [0.30, 0.75, 0.30],
    [0.30, 0.35, 0.85],
    [0.80, 0.75, 0.25],
    [0.70, 0.30, 0.75],
    [0.25, 0.75, 0.80],
    [0.90, 0.55, 0.45],
])


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, S, S) in [0, 1]
    mask: np.ndarray  # (S, S) class ids


def _color(c: int, rng: np.random.Generator) -> np.ndarray:
    if c < len(_COLORS):
        return _COLORS[c]
    return rng.uniform(0.2, 0.9, 3)


def _sample(rng: np.random.Generator, S: int, C: int) -> SyntheticSample:
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    mask = np.zeros((S, S), dtype=np.uint8)

    r = rng.uniform(0.22, 0.29) * S
    cy, cx = rng.uniform(r, S - r, 2)
    mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1

    if C >= 3:
        outer = rng.uniform(0.22, 0.30) * S
        inner = outer - rng.uniform(0.09, 0.12) * S
        ay, ax = rng.uniform(outer, S - outer, 2)
        d2 = (yy - ay) ** 2 + (xx - ax) ** 2
        mask[(d2 <= outer * outer) & (d2 > inner * inner)] = 2

    for c in range(3, C):
        if rng.random() < 0.7:
            side = int(round(rng.uniform(0.12, 0.19) * S))
            sy, sx = rng.integers(0, S - side + 1, 2)
            mask[sy:sy + side, sx:sx + side] = c

    colors = np.stack([_color(c, rng) for c in range(C)])
    image = colors[mask].transpose(2, 0, 1).copy()
    # overlapping texture: a global ramp plus a per-channel ramp, then pixel noise
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx / S - 0.5) + np.sin(angle) * (yy / S - 0.5))
    image += rng.uniform(0.05, 0.15) * ramp
    image += rng.uniform(-0.05, 0.05, (3, 1, 1)) * (yy / S)
    image += rng.normal(0.0, 0.06, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SyntheticSample(image=image, mask=mask)


def gen_synthetic(seed: int, count: int, size: int = 32, classes: int = 4) -> List[SyntheticSample]:
    if classes < 2 or size < 16 or count < 1:
        raise ValueError(f"need classes >= 2, size >= 16, count >= 1 (got {classes}, {size}, {count})")
    if classes > 255:
        raise ValueError("at most 255 classes")
    rng = np.random.default_rng(seed)
    return [_sample(rng, size, classes) for _ in range(count)]


def stack(samples: List[SyntheticSample]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


def split(samples, train_fraction: float = 0.8):
    n_train = int(round(len(samples) * train_fraction))
    return samples[:n_train], samples[n_train:]


# array files ----------------------------------------------------------------

def write_array(path, arr: np.ndarray) -> None:
    """Flat binary: magic, dtype code (u8), rank (u8), dims (u32 LE), little-endian data."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an array file (bad magic {blob[:4]!r})")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    offset = 6 + 4 * ndim
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise ValueError(f"{path}: payload is {len(blob) - offset} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def save_dataset(samples: List[SyntheticSample], out_dir, meta: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_array(out / f"img_{i:05d}.bin", s.image.astype(np.float32))
        write_array(out / f"mask_{i:05d}.bin", s.mask.astype(np.uint8))
    (out / "meta.json").write_text(json.dumps(dict(meta, count=len(samples)), indent=2, sort_keys=True))


def load_dataset(data_dir) -> List[SyntheticSample]:
    d = Path(data_dir)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path}: dataset metadata not found")
    meta = json.loads(meta_path.read_text())
    return [SyntheticSample(read_array(d / f"img_{i:05d}.bin").astype(np.float64),
                            read_array(d / f"mask_{i:05d}.bin"))
            for i in range(meta["count"])]


# portable any-map text formats ----------------------------------------------------

def _pnm_tokens(path):
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    return tokens


def image_to_ppm(image: np.ndarray, path) -> None:
    """(3, H, W) float image in [0, 1] -> plain PPM (P3), 8-bit."""
    _, H, W = image.shape
    q = np.clip(np.round(image * 255.0), 0, 255).astype(int).transpose(1, 2, 0)
    lines = ["P3", f"{W} {H}", "255"] + [" ".join(map(str, row.ravel())) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def ppm_to_image(path) -> np.ndarray:
    tok = _pnm_tokens(path)
    if tok[0] != "P3":
        raise ValueError(f"{path}: expected plain PPM (P3), got {tok[0]}")
    W, H, maxval = int(tok[1]), int(tok[2]), int(tok[3])
    vals = np.array(tok[4:4 + 3 * W * H], dtype=np.float64)
    return (vals.reshape(H, W, 3) / maxval).transpose(2, 0, 1)


def mask_to_pgm(mask: np.ndarray, path) -> None:
    """Class-id mask -> plain PGM (P2) storing raw ids."""
    H, W = mask.shape
    maxval = max(1, int(mask.max()))
    lines = ["P2", f"{W} {H}", str(maxval)] + [" ".join(map(str, row)) for row in mask.astype(int)]
    Path(path).write_text("\n".join(lines) + "\n")


def pgm_to_mask(path) -> np.ndarray:
    tok = _pnm_tokens(path)
    if tok[0] != "P2":
        raise ValueError(f"{path}: expected plain PGM (P2), got {tok[0]}")
    W, H = int(tok[1]), int(tok[2])
    return np.array(tok[4:4 + W * H], dtype=np.uint8).reshape(H, W)
