"""Packed ternary export, kernels, memory accounting and benchmarking."""
from .bench import BENCH_FIELDS, BenchResult, bench, summarize
from .export import (
    DeployModel,
    MemoryReport,
    PackedLinear,
    packed_from_bitlinear,
    export_model,
    memory_report,
    storage_bits_per_weight,
)
from .packing import (
    ENCODINGS,
    PackedTernaryMatrix,
    PackError,
    pack,
    packed_matmul,
    packed_matvec,
    payload_width,
    reference_matvec,
    unpack,
)
