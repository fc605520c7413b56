"""Desk-scale inference engine for masked-diffusion language models.

Implements confidence-guided query prediction, sink-aware sparse attention,
and an approximate KV cache on top of a small bidirectional transformer, with
a dense-attention oracle and an analysis harness for verifying every piece.
All numerics are float32 with fixed accumulation order, so runs are bitwise
reproducible across repeats and thread counts.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .analysis import (
    AnalysisReport,
    analyze_run,
    confidence_correlation,
    divergence_vs_oracle,
    pcgi_recall,
    pearson,
    recall_for_rho,
    sink_layer_overlap,
    write_report_csvs,
)
from .decoder import (
    DecodeHooks,
    DecodeResult,
    DecodeSchedule,
    DecodeSettings,
    SequenceState,
    StepTrace,
    build_schedule,
    confidence_from_logits,
    decode,
    init_sequence,
    replay_trace,
    select_unmask,
    write_trace_csv,
)
from .errors import (
    BoundsError,
    CacheMissError,
    ConfigError,
    ContainerError,
    DegenerateAttentionError,
    EngineError,
    HeaderError,
    MagicError,
    PayloadError,
    ScheduleError,
    ShapeError,
    TruncationError,
    UsageError,
    VersionError,
)
from .focus_attention import (
    AttentionIndexSet,
    FocusConfig,
    FocusStepPlanner,
    assemble_index_set,
    block_relevance,
    expand_window,
    identify_sinks,
    select_blocks,
    select_focus,
    sink_scores,
    sparse_attend,
)
from .kv_cache import KVCache, block_partition
from .model import (
    LayerWeights,
    ModelConfig,
    ModelWeights,
    forward_layers,
    init_random,
    load_weights,
    read_container,
    save_weights,
    serialize_weights,
    weights_sha256,
    write_container,
)
from .tensor_core import (
    attend,
    configure_threads,
    gather_rows,
    matmul,
    rms_norm,
    rms_norm_rows,
    rope,
    row_softmax,
    scatter_rows,
    silu,
    softmax_sum_check,
)
