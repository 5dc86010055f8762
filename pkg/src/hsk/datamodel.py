"""Core value types and the little-endian binary file formats.

Formats (all integers little-endian, fixed width):

    HSC1  cube       u32 rows, u32 cols, u32 bands, f32 values (BIP, row-major)
    HSL1  labels     u32 rows, u32 cols, u16 labels
    HSH1  level map  u32 rows, u32 cols, u32 region ids
    HSG1  gram       u32 n, f64 n*n entries, n NUL-terminated UTF-8 ids
    HSR1  gram       u32 rows, u32 cols, f64 entries, row ids, column ids
    HSQ1  sequences  u32 count, then per sequence:
                     u32 length, u32 dim, NUL-terminated id, u16 label,
                     f32 length*dim values
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CUBE_MAGIC = b"HSC1"
LABEL_MAGIC = b"HSL1"
LEVEL_MAGIC = b"HSH1"
GRAM_MAGIC = b"HSG1"
RECT_GRAM_MAGIC = b"HSR1"
SEQ_MAGIC = b"HSQ1"

# High bit of u16 is reserved so a negative value written by a signed
# writer is detected instead of read back as a huge class id.
MAX_LABEL = 0x7FFF


class FormatError(ValueError):
    """Raised when a file does not conform to its declared format."""


@dataclass(frozen=True, eq=False)
class HyperCube:
    """Hyperspectral image held as a ``(rows, cols, bands)`` float32 array."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"cube values must be 3-D (rows, cols, bands), got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError(f"cube dimensions must be >= 1, got {v.shape}")
        v = np.ascontiguousarray(v, dtype=np.float32)
        bad = np.flatnonzero(~np.isfinite(v.ravel()))
        if bad.size:
            raise ValueError(f"non-finite value at index {int(bad[0])}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other):
        if not isinstance(other, HyperCube):
            return NotImplemented
        return self.values.shape == other.values.shape and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class LabelRaster:
    """Per-pixel class ids; 0 marks unlabeled pixels."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or min(lab.shape) < 1:
            raise ValueError(f"label raster must be 2-D and non-empty, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(np.mod(lab, 1) == 0):
                raise ValueError("labels must be integers")
        lab = lab.astype(np.int64)
        if lab.min() < 0:
            raise ValueError(f"negative label {int(lab.min())}")
        if lab.max() > MAX_LABEL:
            raise ValueError(f"label {int(lab.max())} exceeds maximum {MAX_LABEL}")
        lab = np.ascontiguousarray(lab)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    def classes(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels) if c != 0]

    def __eq__(self, other):
        if not isinstance(other, LabelRaster):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """Fine-to-coarse list of feature vectors for one pixel.

    ``vectors[0]`` describes the pixel itself, ``vectors[-1]`` its coarsest
    retained ancestor region.
    """

    vectors: np.ndarray
    sample_id: str = ""
    label: int = 0

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"sequence must be (length >= 1, dim >= 1), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("sequence contains non-finite values")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        if "\x00" in self.sample_id:
            raise ValueError("sample id must not contain NUL")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def truncated(self, length: int) -> "FeatureSequence":
        return FeatureSequence(self.vectors[:length], self.sample_id, self.label)

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.label == other.label
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Kernel values between two sample sets.

    A square Gram over one sample set has ``col_ids == row_ids``; a
    rectangular one (e.g. test x train) carries both id lists.
    """

    entries: np.ndarray
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...] = field(default=None)

    def __post_init__(self):
        e = np.ascontiguousarray(np.asarray(self.entries, dtype=np.float64))
        if e.ndim != 2:
            raise ValueError(f"gram entries must be 2-D, got shape {e.shape}")
        rows = tuple(str(s) for s in self.row_ids)
        cols = rows if self.col_ids is None else tuple(str(s) for s in self.col_ids)
        if e.shape != (len(rows), len(cols)):
            raise ValueError(f"gram shape {e.shape} does not match ids ({len(rows)}, {len(cols)})")
        for s in rows + cols:
            if "\x00" in s:
                raise ValueError("sample id must not contain NUL")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "row_ids", rows)
        object.__setattr__(self, "col_ids", cols)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return self.row_ids

    @property
    def is_square(self) -> bool:
        return self.row_ids == self.col_ids

    def __eq__(self, other):
        if not isinstance(other, GramMatrix):
            return NotImplemented
        return (
            self.row_ids == other.row_ids
            and self.col_ids == other.col_ids
            and np.array_equal(self.entries, other.entries)
        )


# -- low-level helpers -------------------------------------------------------

_UMASK = os.umask(0)
os.umask(_UMASK)

def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).copy()

    def cstring(self) -> str:
        end = self.data.find(b"\x00", self.pos)
        if end < 0:
            raise FormatError(f"{self.path}: unterminated sample id")
        s = self.data[self.pos:end].decode("utf-8")
        self.pos = end + 1
        return s

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _check_magic(r: _Reader, *magics: bytes) -> bytes:
    if len(r.data) < 4 or r.data[:4] not in magics:
        expected = " or ".join(m.decode() for m in magics)
        raise FormatError(f"{r.path}: malformed header (expected magic {expected})")
    return r.take(4)


# -- cube ------------------------------------------------------------------------

def encode_cube(cube: HyperCube) -> bytes:
    header = CUBE_MAGIC + struct.pack("<3I", cube.rows, cube.cols, cube.bands)
    return header + cube.values.astype("<f4").tobytes(order="C")


def write_cube(cube: HyperCube, path) -> None:
    if not isinstance(cube, HyperCube):
        cube = HyperCube(cube)
    atomic_write(path, encode_cube(cube))


def read_cube(path) -> HyperCube:
    r = _Reader(_read_bytes(path), path)
    _check_magic(r, CUBE_MAGIC)
    try:
        rows, cols, bands = r.u32(3)
    except FormatError:
        raise FormatError(f"{path}: malformed header") from None
    if min(rows, cols, bands) < 1:
        raise FormatError(f"{path}: malformed header (zero dimension {rows}x{cols}x{bands})")
    expected = rows * cols * bands * 4
    if r.remaining() != expected:
        raise FormatError(
            f"{path}: payload size mismatch (header {rows}x{cols}x{bands} needs "
            f"{rows * cols * bands} floats, found {r.remaining() / 4:g})"
        )
    values = r.array("<f4", rows * cols * bands)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError(f"{path}: non-finite value at index {int(bad[0])}")
    return HyperCube(values.reshape(rows, cols, bands))


# -- labels and level maps ---------------------------------------------------------

def encode_labels(raster: LabelRaster) -> bytes:
    header = LABEL_MAGIC + struct.pack("<2I", raster.rows, raster.cols)
    return header + raster.labels.astype("<u2").tobytes(order="C")


def write_labels(raster: LabelRaster, path) -> None:
    if not isinstance(raster, LabelRaster):
        raster = LabelRaster(raster)
    atomic_write(path, encode_labels(raster))


def _read_map(path, magic: bytes, dtype: str) -> np.ndarray:
    r = _Reader(_read_bytes(path), path)
    _check_magic(r, magic)
    rows, cols = r.u32(2)
    if min(rows, cols) < 1:
        raise FormatError(f"{path}: malformed header (zero dimension {rows}x{cols})")
    size = np.dtype(dtype).itemsize
    if r.remaining() != rows * cols * size:
        raise FormatError(
            f"{path}: dimension mismatch (header {rows}x{cols} needs {rows * cols} values, "
            f"found {r.remaining() / size:g})"
        )
    return r.array(dtype, rows * cols).reshape(rows, cols)


def read_labels(path) -> LabelRaster:
    lab = _read_map(path, LABEL_MAGIC, "<u2")
    neg = np.flatnonzero(lab.ravel() > MAX_LABEL)
    if neg.size:
        i = int(neg[0])
        raise FormatError(
            f"{path}: negative label {int(lab.ravel()[i].astype(np.int16))} at index {i}"
        )
    return LabelRaster(lab.astype(np.int64))


def write_level_map(level: np.ndarray, path) -> None:
    level = np.asarray(level)
    if level.ndim != 2 or level.min() < 0 or level.max() > 0xFFFFFFFF:
        raise ValueError("level map must be 2-D with ids in u32 range")
    header = LEVEL_MAGIC + struct.pack("<2I", *level.shape)
    atomic_write(path, header + level.astype("<u4").tobytes(order="C"))


def read_level_map(path) -> np.ndarray:
    """Read a region-id map; accepts both HSH1 (u32) and HSL1 (u16) files."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == LABEL_MAGIC:
        return read_labels(path).labels.copy()
    return _read_map(path, LEVEL_MAGIC, "<u4").astype(np.int64)


# -- gram ---------------------------------------------------------------------------------

def _ids_bytes(ids: Sequence[str]) -> bytes:
    return b"".join(s.encode("utf-8") + b"\x00" for s in ids)


def encode_gram(gram: GramMatrix) -> bytes:
    if gram.is_square:
        head = GRAM_MAGIC + struct.pack("<I", gram.n)
        return head + gram.entries.astype("<f8").tobytes(order="C") + _ids_bytes(gram.row_ids)
    rows, cols = gram.entries.shape
    head = RECT_GRAM_MAGIC + struct.pack("<2I", rows, cols)
    body = gram.entries.astype("<f8").tobytes(order="C")
    return head + body + _ids_bytes(gram.row_ids) + _ids_bytes(gram.col_ids)


def write_gram(gram: GramMatrix, path) -> None:
    atomic_write(path, encode_gram(gram))


def read_gram(path) -> GramMatrix:
    r = _Reader(_read_bytes(path), path)
    magic = _check_magic(r, GRAM_MAGIC, RECT_GRAM_MAGIC)
    if magic == GRAM_MAGIC:
        rows = cols = r.u32()
    else:
        rows, cols = r.u32(2)
    entries = r.array("<f8", rows * cols).reshape(rows, cols)
    row_ids = [r.cstring() for _ in range(rows)]
    col_ids = row_ids if magic == GRAM_MAGIC else [r.cstring() for _ in range(cols)]
    if r.remaining():
        raise FormatError(f"{path}: {r.remaining()} trailing bytes")
    return GramMatrix(entries, tuple(row_ids), tuple(col_ids))


# -- sequences ---------------------------------------------------------------------

def encode_sequences(sequences: Sequence[FeatureSequence]) -> bytes:
    parts = [SEQ_MAGIC, struct.pack("<I", len(sequences))]
    for s in sequences:
        if not 0 <= s.label <= MAX_LABEL:
            raise ValueError(f"label {s.label} of {s.sample_id!r} out of range")
        parts.append(struct.pack("<2I", len(s), s.dim))
        parts.append(s.sample_id.encode("utf-8") + b"\x00")
        parts.append(struct.pack("<H", s.label))
        parts.append(s.vectors.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def write_sequences(sequences: Sequence[FeatureSequence], path) -> None:
    atomic_write(path, encode_sequences(sequences))


def read_sequences(path) -> list[FeatureSequence]:
    r = _Reader(_read_bytes(path), path)
    _check_magic(r, SEQ_MAGIC)
    count = r.u32()
    out = []
    for _ in range(count):
        length, dim = r.u32(2)
        sid = r.cstring()
        label = r.u16()
        if label > MAX_LABEL:
            raise FormatError(f"{path}: negative label for sample {sid!r}")
        values = r.array("<f4", length * dim)
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{path}: non-finite value in sample {sid!r}")
        out.append(FeatureSequence(values.reshape(length, dim).astype(np.float64), sid, label))
    if r.remaining():
        raise FormatError(f"{path}: {r.remaining()} trailing bytes")
    return out
