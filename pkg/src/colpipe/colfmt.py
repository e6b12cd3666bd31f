"""Columnar data model, binary file format, and synthetic data generator.

The on-disk layout is a fixed 24-byte header followed by the raw column
payloads, column-major: every dense column as contiguous little-endian
float32, then every sparse column as contiguous fixed-width ASCII hex
tokens (or uint32 values for processed outputs, see ``SPARSE_U32``).
Nothing else is stored; column names are positional labels and are not
persisted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Sequence, Union

import numpy as np

from .errors import FormatError, TruncatedFileError, WriteError

MAGIC = b"MPCOL\x00\x00\x01"
VERSION = 1
HEADER_STRUCT = struct.Struct("<8sHHHBBQ")
HEADER_SIZE = HEADER_STRUCT.size  # 24: 8 magic + 2 + 2 + 2 + 1 + 1 + 8

# Sparse payload kinds (stored in the header's tag byte).
SPARSE_HEX = 0  # fixed-width hex ASCII tokens, token_width in 1..16
SPARSE_U32 = 1  # little-endian uint32 values, token_width fixed at 4

_HEX_LOW = frozenset(b"0123456789abcdefABCDEF")


def _check_tokens(tokens: np.ndarray, width: int) -> None:
    if tokens.dtype != np.dtype(f"S{width}"):
        raise FormatError(
            f"token array dtype {tokens.dtype} does not match width {width}")
    if len(tokens) == 0:
        return
    flat = np.ascontiguousarray(tokens).view(np.uint8).reshape(-1, width)
    c = flat
    ok = ((c >= 48) & (c <= 57)) | ((c >= 97) & (c <= 102)) | ((c >= 65) & (c <= 70))
    if not ok.all():
        row, pos = np.argwhere(~ok)[0]
        raise FormatError(
            f"token at row {row} has non-hex character at position {pos}")


@dataclass(eq=False)
class DenseColumn:
    """A named column of 32-bit floats; NaN encodes a missing value."""

    name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise FormatError(f"dense column {self.name!r} must be 1-D")

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        # Bitwise comparison so NaN payloads round-trip exactly.
        return (isinstance(other, DenseColumn)
                and self.name == other.name
                and self.values.tobytes() == other.values.tobytes())


@dataclass(eq=False)
class SparseColumn:
    """A named column of fixed-width hexadecimal ASCII tokens."""

    name: str
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.dtype.kind != "S":
            self.tokens = self.tokens.astype(bytes)
        width = self.tokens.dtype.itemsize
        if not 1 <= width <= 16:
            raise FormatError(
                f"sparse column {self.name!r} token width {width} not in 1..16")
        _check_tokens(self.tokens, width)

    @property
    def width(self) -> int:
        return self.tokens.dtype.itemsize

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return (isinstance(other, SparseColumn)
                and self.name == other.name
                and self.tokens.dtype == other.tokens.dtype
                and self.tokens.tobytes() == other.tokens.tobytes())


@dataclass(eq=False)
class IndexColumn:
    """A named column of uint32 values (vocabulary indices or bounded ints)."""

    name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint32)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return (isinstance(other, IndexColumn)
                and self.name == other.name
                and self.values.tobytes() == other.values.tobytes())


SparseLike = Union[SparseColumn, IndexColumn]


@dataclass(eq=False)
class ColumnBatch:
    """An immutable batch of dense and sparse columns sharing a row count.

    The sparse side is homogeneous: either all hex-token columns
    (``sparse_kind == SPARSE_HEX``) or all uint32 columns
    (``sparse_kind == SPARSE_U32``).
    """

    row_count: int
    dense: Sequence[DenseColumn] = field(default_factory=tuple)
    sparse: Sequence[SparseLike] = field(default_factory=tuple)

    def __post_init__(self):
        self.dense = tuple(self.dense)
        self.sparse = tuple(self.sparse)
        if self.row_count < 0:
            raise FormatError("row_count must be non-negative")
        for col in (*self.dense, *self.sparse):
            if len(col) != self.row_count:
                raise FormatError(
                    f"column {col.name!r} has {len(col)} rows, batch has {self.row_count}")
        names = [c.name for c in (*self.dense, *self.sparse)]
        if len(set(names)) != len(names):
            raise FormatError("column names must be unique within a batch")
        kinds = {type(c) for c in self.sparse}
        if len(kinds) > 1:
            raise FormatError("sparse columns must all be the same kind")
        widths = {c.width for c in self.sparse if isinstance(c, SparseColumn)}
        if len(widths) > 1:
            raise FormatError("sparse token widths must agree within a batch")

    @property
    def sparse_kind(self) -> int:
        if self.sparse and isinstance(self.sparse[0], IndexColumn):
            return SPARSE_U32
        return SPARSE_HEX

    @property
    def token_width(self) -> int:
        if self.sparse_kind == SPARSE_U32:
            return 4
        if self.sparse:
            return self.sparse[0].width
        return 8  # default width recorded for batches with no sparse columns

    def __eq__(self, other) -> bool:
        return (isinstance(other, ColumnBatch)
                and self.row_count == other.row_count
                and tuple(self.dense) == tuple(other.dense)
                and tuple(self.sparse) == tuple(other.sparse))


@dataclass(frozen=True)
class ColumnFileHeader:
    """Decoded form of the fixed 24-byte file header."""

    dense_count: int
    sparse_count: int
    token_width: int
    row_count: int
    sparse_kind: int = SPARSE_HEX
    version: int = VERSION

    def encode(self) -> bytes:
        return HEADER_STRUCT.pack(MAGIC, self.version, self.dense_count,
                                  self.sparse_count, self.token_width,
                                  self.sparse_kind, self.row_count)

    @classmethod
    def decode(cls, raw: bytes) -> "ColumnFileHeader":
        if len(raw) < HEADER_SIZE:
            raise FormatError(f"header is {len(raw)} bytes, expected {HEADER_SIZE}")
        magic, version, dense, sparse, width, kind, rows = HEADER_STRUCT.unpack(
            raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if kind not in (SPARSE_HEX, SPARSE_U32):
            raise FormatError(f"unknown sparse kind tag {kind}")
        if kind == SPARSE_HEX and not 1 <= width <= 16:
            raise FormatError(f"token width {width} not in 1..16")
        if kind == SPARSE_U32 and width != 4:
            raise FormatError(f"uint32 sparse payload must have width 4, got {width}")
        return cls(dense_count=dense, sparse_count=sparse, token_width=width,
                   row_count=rows, sparse_kind=kind, version=version)

    @classmethod
    def for_batch(cls, batch: ColumnBatch) -> "ColumnFileHeader":
        return cls(dense_count=len(batch.dense), sparse_count=len(batch.sparse),
                   token_width=batch.token_width, row_count=batch.row_count,
                   sparse_kind=batch.sparse_kind)

    @property
    def column_count(self) -> int:
        return self.dense_count + self.sparse_count

    def column_byte_width(self, index: int) -> int:
        if index < self.dense_count:
            return 4
        return self.token_width

    def column_bytes(self, index: int) -> int:
        return self.column_byte_width(index) * self.row_count

    def payload_bytes(self) -> int:
        return (4 * self.row_count * self.dense_count
                + self.token_width * self.row_count * self.sparse_count)

    def file_bytes(self) -> int:
        return HEADER_SIZE + self.payload_bytes()


def file_size_for(rows: int, dense_count: int, sparse_count: int,
                  token_width: int = 8) -> int:
    """Closed-form file size for a batch of the given shape."""
    return HEADER_SIZE + 4 * rows * dense_count + token_width * rows * sparse_count


def write_column_file(batch: ColumnBatch, dest: BinaryIO) -> int:
    """Serialize a batch; returns the exact number of bytes written."""
    written = 0
    header = ColumnFileHeader.for_batch(batch)
    try:
        dest.write(header.encode())
        written += HEADER_SIZE
        for col in batch.dense:
            buf = np.ascontiguousarray(col.values).tobytes()
            dest.write(buf)
            written += len(buf)
        for col in batch.sparse:
            arr = col.tokens if isinstance(col, SparseColumn) else col.values
            buf = np.ascontiguousarray(arr).tobytes()
            dest.write(buf)
            written += len(buf)
    except OSError as exc:
        raise WriteError(f"write failed after {written} bytes: {exc}", written) from exc
    return written


def write_column_file_path(batch: ColumnBatch, path) -> int:
    with open(path, "wb") as fh:
        return write_column_file(batch, fh)


def read_header(source: BinaryIO) -> ColumnFileHeader:
    return ColumnFileHeader.decode(source.read(HEADER_SIZE))


def _read_exact(source: BinaryIO, n: int, column_index: int) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise TruncatedFileError(
            f"column {column_index} truncated: wanted {n} bytes, got {len(buf)}",
            column_index)
    return buf


def _columns_after_header(source: BinaryIO,
                          header: ColumnFileHeader) -> Iterator[Union[DenseColumn, SparseLike]]:
    for i in range(header.column_count):
        raw = _read_exact(source, header.column_bytes(i), i)
        if i < header.dense_count:
            yield DenseColumn(f"dense_{i}", np.frombuffer(raw, dtype=np.float32))
        else:
            j = i - header.dense_count
            if header.sparse_kind == SPARSE_U32:
                yield IndexColumn(f"sparse_{j}", np.frombuffer(raw, dtype=np.uint32))
            else:
                yield SparseColumn(
                    f"sparse_{j}",
                    np.frombuffer(raw, dtype=f"S{header.token_width}"))


def iter_columns(source: BinaryIO) -> Iterator[Union[DenseColumn, SparseLike]]:
    """Stream columns one at a time without buffering the whole file."""
    yield from _columns_after_header(source, read_header(source))


def read_column_file(source: BinaryIO) -> ColumnBatch:
    """Read a whole file back into a batch with positional column names."""
    header = read_header(source)
    columns = list(_columns_after_header(source, header))
    dense = columns[:header.dense_count]
    sparse = columns[header.dense_count:]
    return ColumnBatch(row_count=header.row_count, dense=dense, sparse=sparse)


def read_column_file_path(path) -> ColumnBatch:
    with open(path, "rb") as fh:
        return read_column_file(fh)


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters for the seeded synthetic dataset generator."""

    rows: int
    dense_features: int = 13
    sparse_features: int = 26
    seed: int = 0
    negative_fraction: float = 0.25
    nan_fraction: float = 0.05
    sparse_cardinality: int = 10_000
    token_width: int = 8

    def validate(self) -> None:
        if self.rows <= 0:
            raise ValueError("rows must be positive")
        if self.dense_features < 0 or self.sparse_features < 0:
            raise ValueError("feature counts must be non-negative")
        if not (0 <= self.negative_fraction <= 1 and 0 <= self.nan_fraction <= 1):
            raise ValueError("fractions must lie in [0, 1]")
        if self.negative_fraction + self.nan_fraction > 1:
            raise ValueError("negative and NaN fractions must sum to <= 1")
        if not 1 <= self.token_width <= 16:
            raise ValueError("token_width must be in 1..16")
        if self.sparse_cardinality < 1:
            raise ValueError("sparse_cardinality must be >= 1")
        if self.sparse_cardinality > 16 ** self.token_width:
            raise ValueError(
                f"cardinality {self.sparse_cardinality} exceeds token space "
                f"16^{self.token_width}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")


# Synthetic dense values follow an exponential with this mean so the
# log transform downstream has a long positive tail to compress.
DENSE_MEAN = 100.0


def _column_seeds(spec: DatasetSpec) -> list:
    root = np.random.SeedSequence(spec.seed)
    return root.spawn(spec.dense_features + spec.sparse_features)


def _dense_column(spec: DatasetSpec, seed_seq) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    u = rng.random(spec.rows)
    magnitude = rng.exponential(DENSE_MEAN, spec.rows)
    values = np.where(u < spec.negative_fraction, -magnitude, magnitude)
    values = np.where(u >= 1.0 - spec.nan_fraction, np.nan, values)
    return values.astype(np.float32)


def _sparse_pool(spec: DatasetSpec, rng) -> np.ndarray:
    """Distinct hex tokens for one column, drawn from the full token space."""
    space = 16 ** spec.token_width
    high = min(space, 2 ** 64)
    uniques = np.empty(0, dtype=np.uint64)
    while len(uniques) < spec.sparse_cardinality:
        chunk = rng.integers(0, high, size=2 * spec.sparse_cardinality,
                             dtype=np.uint64)
        uniques = np.unique(np.concatenate([uniques, chunk]))
    pool = uniques[:spec.sparse_cardinality]
    width = spec.token_width
    return np.array([b"%0*x" % (width, int(v)) for v in pool], dtype=f"S{width}")


def _sparse_column(spec: DatasetSpec, seed_seq) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    pool = _sparse_pool(spec, rng)
    picks = rng.integers(0, len(pool), size=spec.rows)
    return pool[picks]


def generate_synthetic(spec: DatasetSpec) -> ColumnBatch:
    """Deterministic synthetic batch; a pure function of the spec."""
    spec.validate()
    seeds = _column_seeds(spec)
    dense = [DenseColumn(f"dense_{i}", _dense_column(spec, seeds[i]))
             for i in range(spec.dense_features)]
    sparse = [SparseColumn(f"sparse_{j}",
                           _sparse_column(spec, seeds[spec.dense_features + j]))
              for j in range(spec.sparse_features)]
    return ColumnBatch(row_count=spec.rows, dense=dense, sparse=sparse)


def write_synthetic(spec: DatasetSpec, path) -> int:
    """Generate and write column by column; memory stays O(one column).

    Produces bytes identical to ``write_column_file(generate_synthetic(spec))``.
    """
    spec.validate()
    seeds = _column_seeds(spec)
    header = ColumnFileHeader(
        dense_count=spec.dense_features, sparse_count=spec.sparse_features,
        token_width=spec.token_width, row_count=spec.rows)
    written = 0
    with open(path, "wb") as fh:
        fh.write(header.encode())
        written += HEADER_SIZE
        for i in range(spec.dense_features):
            buf = _dense_column(spec, seeds[i]).tobytes()
            fh.write(buf)
            written += len(buf)
        for j in range(spec.sparse_features):
            buf = _sparse_column(spec, seeds[spec.dense_features + j]).tobytes()
            fh.write(buf)
            written += len(buf)
    return written
