"""Deterministic toy multimodal decoder with vision-token withdrawal."""

from .analytics import (
    AttentionProfile,
    CostReport,
    aggregate_attention,
    flops_per_layer,
    layer_attention_table,
    measured_vs_analytical,
    output_attention_table,
    vtw_cost_report,
)
from .calibration import (
    CalibrationConfig,
    CalibrationReport,
    divergence_at,
    sample_subset,
    search_withdrawal_layer,
)
from .dataset import Record, load_records, parse_record, record_sequence
from .estimators import WithdrawalCalibrator, WithdrawalGenerator
from .model import (
    KVCache,
    ModelConfig,
    ModelWeights,
    causal_attention,
    decoder_forward,
    init_model,
    predict_next,
)
from .numerics import OpCounter, kl_divergence, matmul, rms_norm, softmax_row
from .sequence import (
    MultimodalSequence,
    SegmentType,
    VisionInput,
    append_output_token,
    build_sequence,
    make_noncontent_vision,
    make_seeded_vision,
)
from .validation import DatasetError, ShapeError, ValidationError
from .weights_io import load_weights, save_weights
from .withdrawal import (
    DecodeState,
    WithdrawalPolicy,
    generate,
    run_ablation,
    vtw_decode,
    vtw_prefill,
)

__version__ = "0.1.0"
