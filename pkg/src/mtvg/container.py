"""Little-endian binary containers.

Two formats share the same primitives:

``MGFB`` (feature bundle)::

    magic "MGFB" | u32 version=1 | str video_id | f64 duration_s | u32 n_tracks
    per track: str extractor_id | u32 T | u32 D | T*D f32 row-major

``MGPC`` (parameter / score-map container)::

    magic "MGPC" | u32 version=1 | str metadata (JSON) | u32 n_tensors
    per tensor: str name | u32 ndim | ndim * u32 shape | prod(shape) f64 row-major

where ``str`` is a u32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"MGFB"
PARAM_MAGIC = b"MGPC"
VERSION = 1


class ContainerError(ValueError):
    """Malformed container; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | os.PathLike | None = None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


class _Reader:
    def __init__(self, data: bytes, path=None):
        self.data = data
        self.pos = 0
        self.path = path

    def fail(self, message: str, offset: int | None = None):
        raise ContainerError(message, self.pos if offset is None else offset, self.path)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated while reading {what}: need {n} bytes, "
                      f"{len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def string(self, what: str) -> str:
        start = self.pos
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail(f"{what} is not valid UTF-8", start)

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        raw = self.take(count * size, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def magic(self, expected: bytes) -> None:
        got = self.take(4, "magic")
        if got != expected:
            self.fail(f"bad magic {got!r}, expected {expected!r}", 0)
        version = self.u32("version")
        if version != VERSION:
            self.fail(f"unsupported version {version}", 4)

    def finish(self) -> None:
        if self.pos != len(self.data):
            self.fail(f"{len(self.data) - self.pos} trailing bytes")


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- MGFB ---------------------------------------------------------------------

def encode_features(video_id: str, duration_s: float,
                    tracks: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<I", VERSION), _str(video_id),
             struct.pack("<d", duration_s), struct.pack("<I", len(tracks))]
    for extractor_id, data in tracks:
        arr = np.ascontiguousarray(data, dtype="<f4")
        if arr.ndim != 2:
            raise ValueError(f"track {extractor_id!r} must be 2-D, got shape {arr.shape}")
        parts += [_str(extractor_id), struct.pack("<II", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode_features(data: bytes, path=None) -> tuple[str, float, list[tuple[str, np.ndarray]]]:
    r = _Reader(data, path)
    r.magic(FEATURE_MAGIC)
    video_id = r.string("video_id")
    duration_s = r.f64("duration_s")
    n_tracks = r.u32("track count")
    tracks = []
    for k in range(n_tracks):
        extractor_id = r.string(f"track {k} extractor_id")
        shape_at = r.pos
        t, d = r.u32(f"track {k} T"), r.u32(f"track {k} D")
        if t == 0 or d == 0:
            r.fail(f"track {extractor_id!r} has zero dimension ({t}x{d})", shape_at)
        values_at = r.pos
        values = r.array(t * d, "<f4", f"track {extractor_id!r} values").reshape(t, d)
        if not np.all(np.isfinite(values)):
            r.fail(f"track {extractor_id!r} contains non-finite values", values_at)
        tracks.append((extractor_id, values))
    r.finish()
    return video_id, duration_s, tracks


# -- MGPC ---------------------------------------------------------------------

def encode_tensors(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True)
    parts = [PARAM_MAGIC, struct.pack("<I", VERSION), _str(meta),
             struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")  # keeps 0-d shapes
        parts += [_str(name), struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode_tensors(data: bytes, path=None) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data, path)
    r.magic(PARAM_MAGIC)
    meta_at = r.pos
    try:
        metadata = json.loads(r.string("metadata"))
    except json.JSONDecodeError as exc:
        r.fail(f"metadata is not JSON: {exc.msg}", meta_at)
    n = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for k in range(n):
        name = r.string(f"tensor {k} name")
        ndim = r.u32(f"tensor {name!r} ndim")
        shape = tuple(r.u32(f"tensor {name!r} dim {d}") for d in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = r.array(count, "<f8", f"tensor {name!r} values").reshape(shape)
    r.finish()
    return tensors, metadata


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    atomic_write(path, encode_tensors(tensors, metadata))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_tensors(Path(path).read_bytes(), path)
