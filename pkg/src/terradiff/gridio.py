"""Flat-binary array container and PNG raster I/O.

One container format serves every on-disk artifact: model and codec
checkpoints, generated DEM grids, and corpus samples.  Layout (all
little-endian):

    magic      8 bytes   b"TERRBIN1"
    manifest   u32 length + UTF-8 text, ``key=value`` lines
    count      u32 number of arrays
    entries    repeated: u16 name length + UTF-8 name,
                         u8 ndim, u32 per dim,
                         float32 data, C order

Data is stored as float32 regardless of in-memory dtype; callers cast on
load.  Binary masks round-trip exactly (0.0/1.0 are float32-exact).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError

MAGIC = b"TERRBIN1"


def _encode_manifest(manifest: dict[str, str]) -> bytes:
    lines = []
    for key, value in manifest.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ParameterError(f"manifest key/value may not contain '=' in key or newlines: {key}")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def parse_manifest(text: str) -> dict[str, str]:
    manifest = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        manifest[key] = value
    return manifest


def write_arrays(path, arrays: dict[str, np.ndarray], manifest: dict[str, str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mbytes = _encode_manifest(manifest or {})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nbytes = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(nbytes)))
            fh.write(nbytes)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def read_arrays(path):
    """Returns (arrays: dict[name, float32 ndarray], manifest: dict[str, str])."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ParameterError(f"{path}: bad magic {magic!r}, not a {MAGIC.decode()} file")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = parse_manifest(fh.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            arrays[name] = data.copy()
    return arrays, manifest


def write_grid(path, grid: np.ndarray, manifest: dict[str, str] | None = None) -> None:
    """Store a single 2-D float grid (e.g. a DEM in metres)."""
    write_arrays(path, {"grid": np.asarray(grid)}, manifest)


def read_grid(path):
    arrays, manifest = read_arrays(path)
    if "grid" not in arrays:
        raise ParameterError(f"{path}: no 'grid' entry")
    return arrays["grid"], manifest


# ---- PNG ----------------------------------------------------------------


def save_rgb_png(path, rgb: np.ndarray) -> None:
    """rgb: [3, H, W] in [-1, 1] -> 8-bit PNG."""
    arr = np.clip((np.asarray(rgb) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_rgb_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def save_gray16_png(path, unit: np.ndarray) -> None:
    """unit: [H, W] in [0, 1] -> 16-bit grayscale PNG."""
    arr = np.clip(np.asarray(unit) * 65535.0, 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def load_gray16_png(path) -> np.ndarray:
    img = Image.open(path)
    return np.asarray(img, dtype=np.float64) / 65535.0


def save_gray8_png(path, unit: np.ndarray) -> None:
    """unit: [H, W] in [0, 1] -> 8-bit grayscale PNG (hillshade renders)."""
    arr = np.clip(np.asarray(unit) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
