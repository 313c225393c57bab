"""Raw tensor files and synthetic video clips.

Tensor file layout (little-endian)::

    offset  size     field
    0       8        magic b"SSMTENSR"
    8       2        format version (1)
    10      2        dtype code: 1 = float32, 2 = float64
    12      4        ndim
    16      8*ndim   dims, u64 each
    ...              row-major element data

Clips are stored as (3, T, H, W); teacher features as (T, P, C) or
(B, T, P, C). The same container serves both.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSMTENSR"
VERSION = 1
SUFFIX = ".tensor"
_HEADER = struct.Struct("<8sHHI")
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFileError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_OF:
        arr = arr.astype(np.float32)
    code = _CODE_OF[np.dtype(arr.dtype)]
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    data = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return _HEADER.pack(MAGIC, VERSION, code, arr.ndim) + dims + data


def decode_tensor(raw: bytes) -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise TensorFileError("tensor file is truncated")
    magic, version, code, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    if code not in _CODES:
        raise TensorFileError(f"unknown dtype code {code}")
    offset = _HEADER.size + 8 * ndim
    if len(raw) < offset:
        raise TensorFileError("tensor file is truncated")
    dims = struct.unpack_from(f"<{ndim}Q", raw, _HEADER.size)
    dtype = _CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != offset + count * dtype.itemsize:
        raise TensorFileError(f"payload is {len(raw) - offset} bytes, dims {dims} need {count * dtype.itemsize}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(arr))
    return path


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def load_clips(directory) -> list[np.ndarray]:
    """Every ``*.tensor`` file in ``directory``, sorted by name; each must be (3, T, H, W)."""
    paths = sorted(Path(directory).glob(f"*{SUFFIX}"))
    if not paths:
        raise TensorFileError(f"no {SUFFIX} files in {directory}")
    clips = []
    for path in paths:
        clip = read_tensor(path)
        if clip.ndim != 4 or clip.shape[0] != 3:
            raise TensorFileError(f"{path.name}: expected (3, T, H, W), got {clip.shape}")
        clips.append(clip)
    return clips


def synthetic_clip(
    seed: int,
    frames: int = 8,
    height: int = 32,
    width: int = 32,
    shapes: int = 3,
    dtype=np.float32,
) -> np.ndarray:
    """Coloured discs and squares gliding and bouncing over a dark gradient.

    Returns a (3, frames, height, width) array with values in [0, 1]; the same
    seed always gives the same clip.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    background = 0.1 + 0.1 * (yy / max(height - 1, 1))
    video = np.empty((3, frames, height, width))
    size = rng.uniform(0.12, 0.3, shapes) * min(height, width)
    pos = np.stack([rng.uniform(0, height, shapes), rng.uniform(0, width, shapes)], axis=1)
    vel = rng.uniform(-1.5, 1.5, (shapes, 2)) * min(height, width) / 16
    colour = rng.uniform(0.3, 1.0, (shapes, 3))
    disc = rng.random(shapes) < 0.5
    for t in range(frames):
        canvas = np.broadcast_to(background, (3, height, width)).copy()
        for s in range(shapes):
            cy, cx = pos[s]
            if disc[s]:
                inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size[s] / 2) ** 2
            else:
                inside = (np.abs(yy - cy) <= size[s] / 2) & (np.abs(xx - cx) <= size[s] / 2)
            canvas[:, inside] = colour[s][:, None]
        video[:, t] = canvas
        pos += vel
        for axis, limit in ((0, height), (1, width)):
            out = (pos[:, axis] < 0) | (pos[:, axis] > limit - 1)
            vel[out, axis] *= -1
            pos[:, axis] = np.clip(pos[:, axis], 0, limit - 1)
    return video.astype(dtype)


def write_synthetic_clips(directory, count: int, seed: int = 0, **kw) -> list[Path]:
    return [
        write_tensor(Path(directory) / f"clip_{i:04d}{SUFFIX}", synthetic_clip(seed + i, **kw))
        for i in range(count)
    ]
