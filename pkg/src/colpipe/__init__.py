"""Streaming columnar preprocessing engine for recommender features."""

from .colfmt import (ColumnBatch, ColumnFileHeader, DatasetSpec, DenseColumn,
                     IndexColumn, SparseColumn, generate_synthetic,
                     read_column_file, read_column_file_path, write_column_file,
                     write_column_file_path, write_synthetic)
from .errors import ColpipeError
from .ops import VocabTable
from .oracle import OracleResult, oracle_run
from .pipeline import (Engine, EngineConfig, MiniPipeSlot, OperatorParams,
                       PipelineSpec, PRESETS, compile_spec)
from .transport import (Arbiter, BatchSource, BytesSource, FileSource,
                        FrameHeader, FrameType, NetworkClientSource,
                        StreamFrame, arbitrate, collect_frames,
                        measure_source_throughput, open_source)

__version__ = "0.1.0"

__all__ = [
    "Arbiter", "BatchSource", "BytesSource", "ColpipeError", "ColumnBatch",
    "ColumnFileHeader", "DatasetSpec", "DenseColumn", "Engine", "EngineConfig",
    "FileSource", "FrameHeader", "FrameType", "IndexColumn", "MiniPipeSlot",
    "NetworkClientSource", "OperatorParams", "OracleResult", "PipelineSpec",
    "PRESETS", "SparseColumn", "StreamFrame", "VocabTable", "arbitrate",
    "collect_frames", "compile_spec", "generate_synthetic",
    "measure_source_throughput", "open_source", "oracle_run",
    "read_column_file", "read_column_file_path", "write_column_file",
    "write_column_file_path", "write_synthetic",
]
