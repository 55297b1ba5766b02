"""Vision-token withdrawal: shallow layers see everything, deep layers do not.

A prefill runs layers 1..k-1 over the full sequence, deletes every
vision-tagged row from the hidden states, then runs layers k..N over the
survivors. Deep-layer caches are therefore built text-only, while shallow
caches keep their vision rows so later tokens can still attend to them on
the way up. k = num_layers + 1 disables withdrawal and is the baseline.

Position ids after withdrawal follow the policy: "keep" leaves the
survivors' original ids untouched, "rearrange" renumbers them 0..m-1. New
tokens extend both numberings, which only differ under "rearrange".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytics import AttentionProfile, profile_step
from .dataset import Record, record_sequence
from .model import Activations, KVCache, ModelWeights, decoder_forward, predict_next
from .numerics import OpCounter
from .sequence import (
    MultimodalSequence,
    SegmentType,
    append_output_token,
    build_sequence,
    empty_vision,
    make_noncontent_vision,
)
from .validation import ValidationError

PE_POLICIES = ("keep", "rearrange")
ABLATION_MODES = ("no_image", "noncontent", "original")


@dataclass(frozen=True)
class WithdrawalPolicy:
    """Withdrawal layer plus the position-id treatment of survivors.

    `drop_shallow_vision_kv` additionally evicts vision rows from the
    pre-withdrawal caches once prefill ends, trading fidelity at layers
    below k for memory; it is off by default.
    """

    k: int
    pe_policy: str = "keep"
    drop_shallow_vision_kv: bool = False

    @classmethod
    def baseline(cls, num_layers: int) -> "WithdrawalPolicy":
        return cls(k=num_layers + 1)

    def validate(self, num_layers: int) -> None:
        if not 1 <= self.k <= num_layers + 1:
            raise ValidationError(
                f"withdrawal layer {self.k} outside [1, {num_layers + 1}]"
            )
        if self.pe_policy not in PE_POLICIES:
            raise ValidationError(f"pe_policy must be one of {PE_POLICIES}")

    def withdraws(self, num_layers: int) -> bool:
        return self.k <= num_layers


@dataclass
class DecodeState:
    """Everything one request carries between prefill and decode steps."""

    sequence: MultimodalSequence
    cache: KVCache
    policy: WithdrawalPolicy
    withdrawn: bool
    last_logits: np.ndarray
    next_pos_full: int
    next_pos_deep: int
    generated: list[int] = field(default_factory=list)
    capture: bool = False
    counter: OpCounter | None = None
    profile: AttentionProfile | None = None
    # per pass: (rows by layer, column tags by layer), kept only when capturing
    raw_captures: list[tuple[dict, dict]] = field(default_factory=list)


def _merge_captures(parts: list[Activations]):
    rows, cols = {}, {}
    for acts in parts:
        if acts.attn_last_rows:
            rows.update(acts.attn_last_rows)
            cols.update(acts.attn_col_segments)
    return rows, cols


def vtw_prefill(
    weights: ModelWeights,
    seq: MultimodalSequence,
    policy: WithdrawalPolicy | None = None,
    capture: bool = False,
    counter: OpCounter | None = None,
) -> DecodeState:
    """Run the prompt through the stack under the policy; returns the state
    holding the final-position logits, the populated caches, and bookkeeping
    for subsequent cached decoding."""
    config = weights.config
    n = config.num_layers
    if policy is None:
        policy = WithdrawalPolicy.baseline(n)
    policy.validate(n)
    if len(seq) == 0:
        raise ValidationError("cannot prefill an empty sequence")

    cache = KVCache(config)
    k = policy.k
    parts: list[Activations] = []

    hidden = seq.embeddings
    if k > 1:
        acts = decoder_forward(
            weights, hidden, seq.position_ids, cache, (1, min(k - 1, n)),
            seq.segments, capture, counter,
        )
        parts.append(acts)
        hidden = acts.hidden

    next_pos_full = len(seq)
    next_pos_deep = len(seq)
    if k <= n:
        survivors = seq.segments != int(SegmentType.VISION)
        hidden = hidden[survivors]
        if hidden.shape[0] == 0:
            raise ValidationError("withdrawal removed every token")
        if policy.pe_policy == "keep":
            deep_pos = seq.position_ids[survivors]
        else:
            deep_pos = np.arange(hidden.shape[0], dtype=np.int64)
            next_pos_deep = hidden.shape[0]
        acts = decoder_forward(
            weights, hidden, deep_pos, cache, (k, n),
            seq.segments[survivors], capture, counter,
        )
        parts.append(acts)
        hidden = acts.hidden
        if policy.drop_shallow_vision_kv:
            for li in range(1, k):
                cache.delete_segment(li, int(SegmentType.VISION))

    _, logits = predict_next(weights, hidden[-1], counter)
    profile = None
    raw_captures = []
    if capture:
        profile = AttentionProfile()
        rows, cols = _merge_captures(parts)
        profile_step(profile, rows, cols, step=0)
        raw_captures.append((rows, cols))

    return DecodeState(
        sequence=seq,
        cache=cache,
        policy=policy,
        withdrawn=policy.withdraws(n),
        last_logits=logits,
        next_pos_full=next_pos_full,
        next_pos_deep=next_pos_deep,
        capture=capture,
        counter=counter,
        profile=profile,
        raw_captures=raw_captures,
    )


def vtw_decode(
    weights: ModelWeights,
    state: DecodeState,
    max_new_tokens: int,
    stop_id: int | None = None,
) -> list[int]:
    """Greedy cached decoding after a prefill.

    Each new token traverses layers below k against the full-prefix caches
    and layers from k up against the text-only caches. Generation ends at
    `max_new_tokens`, or earlier when the greedy choice equals `stop_id`
    (the stop token itself is not emitted).
    """
    if max_new_tokens < 0:
        raise ValidationError("max_new_tokens must be nonnegative")
    config = weights.config
    n = config.num_layers
    k = state.policy.k
    out_segment = np.array([int(SegmentType.OUTPUT)], dtype=np.int8)

    emitted: list[int] = []
    for _ in range(max_new_tokens):
        token = int(np.argmax(state.last_logits))
        if stop_id is not None and token == stop_id:
            break
        emitted.append(token)
        state.generated.append(token)
        state.sequence = append_output_token(state.sequence, token, weights)

        hidden = weights.token_embedding[token][None, :]
        parts: list[Activations] = []
        if k > 1:
            acts = decoder_forward(
                weights, hidden,
                np.array([state.next_pos_full], dtype=np.int64),
                state.cache, (1, min(k - 1, n)), out_segment,
                state.capture, state.counter,
            )
            parts.append(acts)
            hidden = acts.hidden
        if k <= n:
            acts = decoder_forward(
                weights, hidden,
                np.array([state.next_pos_deep], dtype=np.int64),
                state.cache, (k, n), out_segment,
                state.capture, state.counter,
            )
            parts.append(acts)
            hidden = acts.hidden
        state.next_pos_full += 1
        state.next_pos_deep += 1

        _, state.last_logits = predict_next(weights, hidden[-1], state.counter)
        if state.capture:
            rows, cols = _merge_captures(parts)
            profile_step(state.profile, rows, cols, step=len(state.generated))
    return emitted


def generate(
    weights: ModelWeights,
    seq: MultimodalSequence,
    policy: WithdrawalPolicy | None = None,
    max_new_tokens: int = 8,
    stop_id: int | None = None,
    capture: bool = False,
    counter: OpCounter | None = None,
) -> tuple[list[int], DecodeState]:
    """Prefill followed by greedy decoding; returns (token ids, final state)."""
    state = vtw_prefill(weights, seq, policy, capture, counter)
    ids = vtw_decode(weights, state, max_new_tokens, stop_id)
    return ids, state


def run_ablation(weights: ModelWeights, record: Record, mode: str, k: int) -> np.ndarray:
    """Final prefill logits under one ablation setting.

    no_image drops the vision segment entirely; noncontent substitutes
    constant rows and withdraws at k; original withdraws at k on the
    record's own vision input.
    """
    if mode not in ABLATION_MODES:
        raise ValidationError(f"mode must be one of {ABLATION_MODES}")
    config = weights.config
    if mode == "no_image":
        seq = build_sequence(
            record.system_ids, empty_vision(config.vision_embed_dim),
            record.instruction_ids, weights,
        )
        state = vtw_prefill(weights, seq, WithdrawalPolicy.baseline(config.num_layers))
        return state.last_logits

    if mode == "noncontent":
        n_vis = record.vision.n_vis
        vision = (
            make_noncontent_vision(n_vis, config.vision_embed_dim)
            if n_vis else empty_vision(config.vision_embed_dim)
        )
        seq = build_sequence(record.system_ids, vision, record.instruction_ids, weights)
    else:
        seq = record_sequence(record, weights)
    state = vtw_prefill(weights, seq, WithdrawalPolicy(k=k))
    return state.last_logits
