"""Naive single-threaded reference implementation for differential tests.

Everything here is a straight-line Python loop over materialized lists.
It deliberately shares no code with the engine's block kernels (only the
column/table type definitions), so an engine bug cannot hide behind a
shared helper. Performance is explicitly not a goal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .colfmt import ColumnBatch, DenseColumn
from .errors import DomainError, HexParseError, UnknownValueError, VocabRangeError
from .ops import VocabTable


@dataclass
class OracleResult:
    dense_out: List[DenseColumn]
    sparse_out: List[np.ndarray]  # uint64 values (stateless) or uint32 indices
    tables: List[VocabTable]


def _dense_reference(values, chain):
    vals = [float(v) for v in values]
    for op in chain:
        if op == "neg2zero":
            vals = [0.0 if (v != v or v < 0.0) else v for v in vals]
        elif op == "logarithm":
            out = []
            for row, v in enumerate(vals):
                if v != v or v < 0.0:
                    raise DomainError(
                        f"logarithm input {v} at row {row} outside [0, inf)",
                        row=row)
                out.append(math.log1p(v))
            # f32 rounding is part of the operator's result type
            vals = [float(v) for v in np.asarray(out, dtype=np.float32)]
        else:
            raise ValueError(f"unknown dense operator {op!r}")
    return np.asarray(vals, dtype=np.float32)


def _parse_tokens(tokens):
    out = []
    for row, tok in enumerate(tokens):
        try:
            out.append(int(tok, 16))
        except ValueError:
            pos = next(i for i, ch in enumerate(tok)
                       if not (48 <= ch <= 57 or 97 <= ch <= 102 or 65 <= ch <= 70))
            raise HexParseError(
                f"non-hex character in row {row} at position {pos}",
                row=row, position=pos) from None
    return out


def _first_occurrence_table(values, m):
    seen = {}
    for row, v in enumerate(values):
        if v >= m:
            raise VocabRangeError(
                f"value {v} >= modulus range {m}", value=v, row=row)
        if v not in seen:
            seen[v] = len(seen)
    return seen


def oracle_run(batch: ColumnBatch, spec) -> OracleResult:
    """Run a pipeline spec over a batch with obviously-correct loops."""
    m = spec.params.modulus
    dense_out = [DenseColumn(col.name, _dense_reference(col.values, spec.dense_chain))
                 for col in batch.dense]

    sparse_out: List[np.ndarray] = []
    tables: List[VocabTable] = []
    for col in batch.sparse:
        vals = list(col.tokens.tolist()) if len(col) else []
        stage = "tokens"
        mapping = None
        for op in spec.sparse_chain:
            if op == "hex2int":
                vals = _parse_tokens(vals)
                stage = "values"
            elif op == "modulus":
                vals = [v % m for v in vals]
            elif op == "vocab_gen":
                mapping = _first_occurrence_table(vals, m)
            elif op == "vocab_map":
                if mapping is None:
                    raise ValueError("vocab_map before vocab_gen")
                out = []
                for row, v in enumerate(vals):
                    if v not in mapping:
                        raise UnknownValueError(
                            f"value {v} not in vocabulary (row {row})",
                            value=v, row=row)
                    out.append(mapping[v])
                vals = out
                stage = "indices"
            else:
                raise ValueError(f"unknown sparse operator {op!r}")
        if mapping is not None:
            table = VocabTable(m)
            for v in mapping:
                table.insert(v)
            tables.append(table.freeze())
        if stage == "indices":
            sparse_out.append(np.asarray(vals, dtype=np.uint32))
        elif stage == "values":
            sparse_out.append(np.asarray(vals, dtype=np.uint64))
        else:
            sparse_out.append(np.asarray(vals, dtype=f"S{col.width}"))
    return OracleResult(dense_out=dense_out, sparse_out=sparse_out, tables=tables)
