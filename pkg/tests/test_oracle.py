"""The reference implementation's own sanity checks."""

import math

import numpy as np

from colpipe.colfmt import ColumnBatch, DenseColumn, SparseColumn
from colpipe.oracle import oracle_run
from colpipe.pipeline import PRESETS


def _batch_from_values(values, m_width=8):
    tokens = np.array([b"%08x" % v for v in values], dtype="S8")
    dense = np.array([-1.5, 0.0, float("nan"), 3.0], dtype=np.float32)
    return ColumnBatch(row_count=4,
                       dense=[DenseColumn("d", dense)],
                       sparse=[SparseColumn("s", tokens)])


def test_toy_stateful_indices():
    batch = _batch_from_values([5, 3, 5, 7])
    spec = PRESETS["P-II"]
    result = oracle_run(batch, spec)
    assert result.sparse_out[0].tolist() == [0, 1, 0, 2]
    assert dict(result.tables[0].items()) == {5: 0, 3: 1, 7: 2}


def test_stateless_is_elementwise_application():
    batch = _batch_from_values([5, 3, 5, 7])
    result = oracle_run(batch, PRESETS["P-I"])
    expected_dense = [0.0, 0.0, 0.0, float(np.float32(math.log1p(3.0)))]
    assert result.dense_out[0].values.tolist() == expected_dense
    assert result.sparse_out[0].tolist() == [5, 3, 5, 7]
    assert result.tables == []


def test_dense_shapes_match_input():
    batch = _batch_from_values([1, 2, 3, 4])
    result = oracle_run(batch, PRESETS["P-III"])
    assert len(result.dense_out) == len(batch.dense)
    assert len(result.sparse_out) == len(batch.sparse)
    assert all(len(c.values) == batch.row_count for c in result.dense_out)
