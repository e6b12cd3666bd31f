"""The six transformation operators and the vocabulary table.

Each operator exists in two forms: a scalar function that is the
definitional contract (used by tests and documentation), and a block
kernel over numpy arrays that the streaming engine calls per frame.
The reference oracle deliberately uses neither.

Dense operators clip negatives to zero and apply log(x+1); sparse
operators parse fixed-width hex tokens, bound them with a modulus, and
(statefully) build and apply an insertion-ordered vocabulary.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator

import numpy as np

from .errors import (DomainError, HexParseError, ParameterError,
                     UnknownValueError, VocabRangeError)

DENSE_OPS = ("neg2zero", "logarithm")
SPARSE_OPS = ("hex2int", "modulus", "vocab_gen", "vocab_map")

# Vocabulary lookups use a dense M-slot array up to this bound, a dict above.
_DENSE_LOOKUP_LIMIT = 1 << 24


# ---------------------------------------------------------------------------
# scalar contracts

def neg2zero(x: float) -> float:
    """Clip negatives to zero; NaN (missing) also becomes zero."""
    if x != x or x < 0:
        return 0.0
    return x


def logarithm(x: float) -> float:
    """log(x+1), evaluated in 64-bit and rounded to a 32-bit float."""
    if x != x or x < 0:
        raise DomainError(f"logarithm input {x} outside [0, inf)", row=0)
    return float(np.float32(math.log1p(x)))


def hex2int(token) -> int:
    """Unsigned value of a hex token, most significant character first."""
    if isinstance(token, str):
        token = token.encode("ascii", errors="replace")
    for pos, ch in enumerate(token):
        if not (48 <= ch <= 57 or 97 <= ch <= 102 or 65 <= ch <= 70):
            raise HexParseError(
                f"non-hex character {chr(ch)!r} at position {pos}",
                row=0, position=pos)
    return int(token, 16)


def format_hex(value: int, width: int) -> str:
    """Inverse of hex2int for values below 16**width."""
    if not 0 <= value < 16 ** width:
        raise ParameterError(f"value {value} does not fit in {width} hex chars")
    return format(value, f"0{width}x")


def modulus(value: int, m: int) -> int:
    """value mod m, in [0, m).

    Inputs here are unsigned, so the plain remainder is already
    non-negative; for a future signed source the operator is defined as
    ((value % m) + m) % m, of which this is the special case.
    """
    if m < 1:
        raise ParameterError(f"modulus must be >= 1, got {m}")
    return value % m


def vocab_gen(values: Iterable[int], m: int) -> "VocabTable":
    """Single pass appending each first-seen value at the next index."""
    table = VocabTable(m)
    for row, v in enumerate(values):
        table.insert(v, row=row)
    table.freeze()
    return table


def vocab_map(values: Iterable[int], table: "VocabTable",
              oov: bool = False) -> Iterator[int]:
    """Elementwise index lookup preserving order and length."""
    for row, v in enumerate(values):
        yield table.index_of(v, row=row, oov=oov)


# ---------------------------------------------------------------------------
# block kernels (engine path)

def neg2zero_block(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(invalid="ignore"):  # NaN < 0 is a legal question here
        mask = np.isnan(x) | (x < 0)
    return np.where(mask, np.float32(0.0), x)


def logarithm_block(x: np.ndarray, row_offset: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(invalid="ignore"):
        bad = np.isnan(x) | (x < 0)
    if bad.any():
        row = int(np.argmax(bad))
        raise DomainError(
            f"logarithm input {x[row]} at row {row_offset + row} outside [0, inf)",
            row=row_offset + row)
    return np.log1p(x.astype(np.float64)).astype(np.float32)


# ASCII -> nibble value; 255 marks characters outside [0-9a-fA-F]
_NIBBLES = np.full(256, 255, dtype=np.uint8)
for _c in b"0123456789":
    _NIBBLES[_c] = _c - 48
for _c in b"abcdef":
    _NIBBLES[_c] = _c - 87
for _c in b"ABCDEF":
    _NIBBLES[_c] = _c - 55

# 16**(w-1), ..., 16, 1 per width; int64 is safe through width 15
_POWERS = {w: (16 ** np.arange(w - 1, -1, -1, dtype=np.int64))
           for w in range(1, 16)}


def _nibbles_checked(tokens: np.ndarray, row_offset: int) -> np.ndarray:
    width = tokens.dtype.itemsize
    chars = tokens.view(np.uint8).reshape(-1, width)
    nib = _NIBBLES[chars]
    if nib.max() == 255:
        row, pos = (int(v) for v in np.argwhere(nib == 255)[0])
        raise HexParseError(
            f"non-hex character {chr(chars[row, pos])!r} in row "
            f"{row_offset + row} at position {pos}",
            row=row_offset + row, position=pos)
    return nib


def hex2int_block(tokens: np.ndarray, row_offset: int = 0) -> np.ndarray:
    """Parse a column chunk of fixed-width hex tokens to uint64."""
    tokens = np.ascontiguousarray(tokens)
    width = tokens.dtype.itemsize
    if tokens.dtype.kind != "S" or not 1 <= width <= 16:
        raise ParameterError(f"expected S1..S16 token array, got {tokens.dtype}")
    if len(tokens) == 0:
        return np.empty(0, dtype=np.uint64)
    nib = _nibbles_checked(tokens, row_offset)
    if width == 16:  # the full-width sum would overflow int64
        high = nib[:, :8].astype(np.int64) @ _POWERS[8]
        low = nib[:, 8:].astype(np.int64) @ _POWERS[8]
        return (high.astype(np.uint64) << np.uint64(32)) | low.astype(np.uint64)
    values = nib.astype(np.int64) @ _POWERS[width]
    return values.astype(np.uint64)


def modulus_block(values: np.ndarray, m: int) -> np.ndarray:
    if m < 1:
        raise ParameterError(f"modulus must be >= 1, got {m}")
    return np.asarray(values, dtype=np.uint64) % np.uint64(m)


def _ordered_uniques(values: np.ndarray) -> np.ndarray:
    uniq, first = np.unique(values, return_index=True)
    return uniq[np.argsort(first, kind="stable")]


class VocabTable:
    """Insertion-ordered value-to-index mapping bounded by a modulus range.

    Indices are assigned 0, 1, 2, ... in first-appearance order. The
    table is mutable while being built (pass one) and frozen before any
    lookups (pass two).
    """

    def __init__(self, modulus_range: int):
        if modulus_range < 1:
            raise ParameterError(f"modulus range must be >= 1, got {modulus_range}")
        self.modulus_range = modulus_range
        self._entries: dict = {}
        self._frozen = False
        self._lookup = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def items(self):
        """(value, index) pairs in insertion order."""
        return self._entries.items()

    def values_in_order(self) -> list:
        return list(self._entries.keys())

    def _check_mutable(self):
        if self._frozen:
            raise ParameterError("vocabulary table is frozen")

    def insert(self, value: int, row: int = -1) -> int:
        value = int(value)
        self._check_mutable()
        if value >= self.modulus_range:
            raise VocabRangeError(
                f"value {value} >= modulus range {self.modulus_range} "
                "(upstream modulus missing)", value=value, row=row)
        idx = self._entries.get(value)
        if idx is None:
            idx = len(self._entries)
            self._entries[value] = idx
        return idx

    def absorb_block(self, values: np.ndarray, row_offset: int = 0) -> None:
        """Streaming pass-one kernel: extend with a chunk's new uniques."""
        self._check_mutable()
        values = np.asarray(values, dtype=np.uint64)
        if len(values) == 0:
            return
        if values.max() >= self.modulus_range:
            row = int(np.argmax(values >= np.uint64(self.modulus_range)))
            raise VocabRangeError(
                f"value {int(values[row])} >= modulus range {self.modulus_range} "
                "(upstream modulus missing)",
                value=int(values[row]), row=row_offset + row)
        entries = self._entries
        for v in _ordered_uniques(values):
            v = int(v)
            if v not in entries:
                entries[v] = len(entries)

    def freeze(self) -> "VocabTable":
        if not self._frozen:
            self._frozen = True
            if self.modulus_range <= _DENSE_LOOKUP_LIMIT:
                lookup = np.full(self.modulus_range, -1, dtype=np.int64)
                if self._entries:
                    keys = np.fromiter(self._entries.keys(), dtype=np.int64,
                                       count=len(self._entries))
                    lookup[keys] = np.arange(len(self._entries), dtype=np.int64)
                self._lookup = lookup
        return self

    def index_of(self, value: int, row: int = -1, oov: bool = False) -> int:
        value = int(value)
        idx = self._entries.get(value)
        if idx is None:
            if oov:
                return len(self._entries)
            raise UnknownValueError(
                f"value {value} not in vocabulary (row {row})", value=value, row=row)
        return idx

    def lookup_block(self, values: np.ndarray, row_offset: int = 0,
                     oov: bool = False) -> np.ndarray:
        """Pass-two kernel: map a chunk to uint32 indices."""
        if not self._frozen:
            raise ParameterError("vocabulary table must be frozen before lookups")
        values = np.asarray(values, dtype=np.uint64)
        if len(values) == 0:
            return np.empty(0, dtype=np.uint32)
        if self._lookup is not None:
            if values.max() >= self.modulus_range:
                row = int(np.argmax(values >= np.uint64(self.modulus_range)))
                raise UnknownValueError(
                    f"value {int(values[row])} not in vocabulary "
                    f"(row {row_offset + row})",
                    value=int(values[row]), row=row_offset + row)
            idx = self._lookup[values.astype(np.int64)]
        else:
            entries = self._entries
            idx = np.fromiter((entries.get(int(v), -1) for v in values),
                              dtype=np.int64, count=len(values))
        missing = idx < 0
        if missing.any():
            if oov:
                idx = np.where(missing, len(self._entries), idx)
            else:
                row = int(np.argmax(missing))
                raise UnknownValueError(
                    f"value {int(values[row])} not in vocabulary "
                    f"(row {row_offset + row})",
                    value=int(values[row]), row=row_offset + row)
        return idx.astype(np.uint32)
