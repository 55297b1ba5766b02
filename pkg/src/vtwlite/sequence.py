"""Four-segment multimodal input: system, vision, instruction, output.

A sequence keeps one row of hidden-space embedding per token alongside its
segment tag and position id. Text tokens are embedded by table lookup; vision
rows arrive as encoder-space embeddings and pass through the cross-modal
projector. Segment blocks are contiguous and ordered system, vision,
instruction, output; position ids run 0..len-1 before any withdrawal.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .model import ModelWeights
from .numerics import matmul
from .validation import ShapeError, ValidationError, as_matrix, check_finite, check_token_ids

NONCONTENT_FILL = 1.0


class SegmentType(IntEnum):
    SYSTEM = 0
    VISION = 1
    INSTRUCTION = 2
    OUTPUT = 3


SEGMENT_NAMES = tuple(s.name.lower() for s in SegmentType)


@dataclass(frozen=True)
class VisionInput:
    """Encoder-space vision rows plus a provenance note for run manifests."""

    embeddings: np.ndarray  # (n_vis, vision_embed_dim) float32
    provenance: str

    @property
    def n_vis(self) -> int:
        return self.embeddings.shape[0]


def empty_vision(dim: int) -> VisionInput:
    return VisionInput(np.empty((0, dim), dtype=np.float32), "empty")


def make_noncontent_vision(n_vis: int, dim: int, fill: float = NONCONTENT_FILL) -> VisionInput:
    """Constant rows standing in for a contentless (blank) image."""
    if n_vis < 1 or dim < 1:
        raise ValidationError("n_vis and dim must be at least 1")
    rows = np.full((n_vis, dim), fill, dtype=np.float32)
    return VisionInput(rows, "noncontent")


def make_seeded_vision(seed: int, n_vis: int, dim: int) -> VisionInput:
    """Deterministic pseudo-image: seeded uniform rows in [-1, 1)."""
    if n_vis < 1 or dim < 1:
        raise ValidationError("n_vis and dim must be at least 1")
    rng = np.random.default_rng(seed)
    rows = rng.uniform(-1.0, 1.0, size=(n_vis, dim)).astype(np.float32)
    return VisionInput(rows, f"seeded:{seed}")


def inline_vision(rows) -> VisionInput:
    arr = np.asarray(rows, dtype=np.float32)
    if arr.ndim == 1 and arr.size == 0:  # empty list: no vision, width unknown
        arr = arr.reshape(0, 0)
    arr = as_matrix(arr, "vision rows")
    check_finite(arr, "vision rows")
    return VisionInput(arr, "inline")


@dataclass(frozen=True)
class MultimodalSequence:
    embeddings: np.ndarray  # (len, hidden_size) float32
    segments: np.ndarray  # (len,) int8 of SegmentType values
    position_ids: np.ndarray  # (len,) int64
    token_ids: tuple  # int per text token, None per vision row

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def segment_count(self, segment: SegmentType) -> int:
        return int(np.count_nonzero(self.segments == int(segment)))

    @property
    def n_sys(self) -> int:
        return self.segment_count(SegmentType.SYSTEM)

    @property
    def n_vis(self) -> int:
        return self.segment_count(SegmentType.VISION)

    @property
    def n_ins(self) -> int:
        return self.segment_count(SegmentType.INSTRUCTION)

    @property
    def n_out(self) -> int:
        return self.segment_count(SegmentType.OUTPUT)


def project_vision(vision: VisionInput, weights: ModelWeights) -> np.ndarray:
    """Map encoder-space rows into hidden space through the projector."""
    if vision.n_vis == 0:
        return np.empty((0, weights.config.hidden_size), dtype=np.float32)
    if vision.embeddings.shape[1] != weights.config.vision_embed_dim:
        raise ShapeError(
            f"vision rows are {vision.embeddings.shape[1]} wide, expected"
            f" {weights.config.vision_embed_dim}"
        )
    return matmul(vision.embeddings, weights.vision_projector)


def build_sequence(
    system_ids,
    vision: VisionInput,
    instruction_ids,
    weights: ModelWeights,
) -> MultimodalSequence:
    """Assemble [system, vision, instruction] with positions 0..len-1."""
    config = weights.config
    system_ids = check_token_ids(system_ids, config.vocab_size, "system_ids")
    instruction_ids = check_token_ids(instruction_ids, config.vocab_size, "instruction_ids")

    sys_rows = weights.token_embedding[system_ids] if system_ids else \
        np.empty((0, config.hidden_size), dtype=np.float32)
    vis_rows = project_vision(vision, weights)
    ins_rows = weights.token_embedding[instruction_ids] if instruction_ids else \
        np.empty((0, config.hidden_size), dtype=np.float32)

    embeddings = np.concatenate([sys_rows, vis_rows, ins_rows]).astype(np.float32)
    segments = np.concatenate([
        np.full(len(system_ids), int(SegmentType.SYSTEM), dtype=np.int8),
        np.full(vis_rows.shape[0], int(SegmentType.VISION), dtype=np.int8),
        np.full(len(instruction_ids), int(SegmentType.INSTRUCTION), dtype=np.int8),
    ])
    position_ids = np.arange(embeddings.shape[0], dtype=np.int64)
    token_ids = tuple(system_ids) + (None,) * vis_rows.shape[0] + tuple(instruction_ids)
    return MultimodalSequence(embeddings, segments, position_ids, token_ids)


def append_output_token(
    seq: MultimodalSequence, token_id: int, weights: ModelWeights
) -> MultimodalSequence:
    """Append one output-tagged token at position max(position_ids) + 1."""
    (token_id,) = check_token_ids([token_id], weights.config.vocab_size, "token_id")
    row = weights.token_embedding[token_id][None, :]
    next_pos = int(seq.position_ids.max()) + 1 if len(seq) else 0
    return replace(
        seq,
        embeddings=np.concatenate([seq.embeddings, row]),
        segments=np.concatenate(
            [seq.segments, np.array([int(SegmentType.OUTPUT)], dtype=np.int8)]
        ),
        position_ids=np.concatenate(
            [seq.position_ids, np.array([next_pos], dtype=np.int64)]
        ),
        token_ids=seq.token_ids + (token_id,),
    )
