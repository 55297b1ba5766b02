"""Decoder-only transformer used by the withdrawal runtime.

The block layout is the usual pre-norm residual stack: RMS norm, multi-head
causal self-attention with rotary positions, residual add, RMS norm, gated
feed-forward, residual add. Layer indices are 1-based throughout so partial
ranges read naturally as [from, to].

Attention keys and values are appended to a per-layer `KVCache` together with
the position id and segment tag of each row. Keys are stored already rotated;
rotation is a pure function of (row, position id), so a cached row never needs
re-encoding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

import numpy as np

from .numerics import OpCounter, matmul, rms_norm_rows, softmax_rows
from .validation import (
    ShapeError,
    ValidationError,
    as_matrix,
    check_finite,
    check_position_ids,
)

RMS_EPS = 1e-5
ROTARY_BASE = 10000.0

CONFIG_DEFAULTS = {"ffn_factor": 4, "max_position": 4096, "seed": 0}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. `hidden_size = num_heads * head_dim`."""

    num_layers: int
    hidden_size: int
    num_heads: int
    head_dim: int
    ffn_factor: int = 4
    vocab_size: int = 128
    vision_embed_dim: int = 32
    max_position: int = 4096
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValidationError(f"{f.name} must be an integer")
        if self.num_layers < 6:
            raise ValidationError("num_layers must be at least 6")
        for name in ("hidden_size", "num_heads", "head_dim", "ffn_factor",
                     "vision_embed_dim", "max_position"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be at least 2")
        if self.hidden_size != self.num_heads * self.head_dim:
            raise ValidationError(
                f"hidden_size {self.hidden_size} != num_heads {self.num_heads}"
                f" * head_dim {self.head_dim}"
            )
        if self.head_dim % 2:
            raise ValidationError("head_dim must be even for rotary encoding")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        """Build from a decoded config document; unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        required = known - set(CONFIG_DEFAULTS)
        missing = required - set(doc)
        if missing:
            raise ValidationError(f"missing config keys: {sorted(missing)}")
        return cls(**doc)

    def to_canonical_json(self) -> str:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass
class LayerWeights:
    attn_norm_gain: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm_gain: np.ndarray
    w_gate: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray


@dataclass
class ModelWeights:
    """All learned tensors; immutable by convention once created."""

    config: ModelConfig
    token_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray
    lm_head: np.ndarray
    vision_projector: np.ndarray

    def tensors(self):
        """Yield (name, array) pairs in the fixed container manifest order."""
        yield "token_embedding", self.token_embedding
        for i, layer in enumerate(self.layers):
            for f in fields(LayerWeights):
                yield f"layers.{i}.{f.name}", getattr(layer, f.name)
        yield "final_norm_gain", self.final_norm_gain
        yield "lm_head", self.lm_head
        yield "vision_projector", self.vision_projector


def tensor_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Manifest of tensor names and shapes implied by a config."""
    h, f = config.hidden_size, config.ffn_factor
    per_layer = [
        ("attn_norm_gain", (h,)),
        ("wq", (h, h)),
        ("wk", (h, h)),
        ("wv", (h, h)),
        ("wo", (h, h)),
        ("ffn_norm_gain", (h,)),
        ("w_gate", (h, f * h)),
        ("w_in", (h, f * h)),
        ("w_out", (f * h, h)),
    ]
    manifest = [("token_embedding", (config.vocab_size, h))]
    for i in range(config.num_layers):
        manifest.extend((f"layers.{i}.{name}", shape) for name, shape in per_layer)
    manifest.append(("final_norm_gain", (h,)))
    manifest.append(("lm_head", (h, config.vocab_size)))
    manifest.append(("vision_projector", (config.vision_embed_dim, h)))
    return manifest


def init_model(config: ModelConfig) -> ModelWeights:
    """Draw all weights from one seeded generator in manifest order.

    Projections and embeddings are uniform in +/- 1/sqrt(hidden_size); norm
    gains sit near 1 so the residual stream stays well conditioned. The same
    config (including seed) always reproduces bit-identical tensors.
    """
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / math.sqrt(config.hidden_size)

    def draw(shape):
        return rng.uniform(-scale, scale, size=shape).astype(np.float32)

    def draw_gain(shape):
        return (1.0 + rng.uniform(-scale, scale, size=shape)).astype(np.float32)

    arrays = {}
    for name, shape in tensor_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        arrays[name] = draw_gain(shape) if leaf.endswith("norm_gain") else draw(shape)

    layers = [
        LayerWeights(**{
            f.name: arrays[f"layers.{i}.{f.name}"] for f in fields(LayerWeights)
        })
        for i in range(config.num_layers)
    ]
    return ModelWeights(
        config=config,
        token_embedding=arrays["token_embedding"],
        layers=layers,
        final_norm_gain=arrays["final_norm_gain"],
        lm_head=arrays["lm_head"],
        vision_projector=arrays["vision_projector"],
    )


def apply_rotary(x: np.ndarray, position_ids: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Rotate each head's row of x by its position id (half-split convention)."""
    n, h = x.shape
    d = config.head_dim
    half = d // 2
    inv_freq = ROTARY_BASE ** (-np.arange(half, dtype=np.float64) / half)
    angles = position_ids.astype(np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :]  # (n, 1, half)
    sin = np.sin(angles)[:, None, :]
    xh = x.astype(np.float64).reshape(n, config.num_heads, d)
    x1, x2 = xh[..., :half], xh[..., half:]
    out = np.empty_like(xh)
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half:] = x2 * cos + x1 * sin
    return out.reshape(n, h).astype(np.float32)


class _LayerCache:
    __slots__ = ("keys", "values", "position_ids", "segments")

    def __init__(self, hidden_size: int):
        self.keys = np.empty((0, hidden_size), dtype=np.float32)
        self.values = np.empty((0, hidden_size), dtype=np.float32)
        self.position_ids = np.empty((0,), dtype=np.int64)
        self.segments = np.empty((0,), dtype=np.int8)


class KVCache:
    """Per-layer appended key/value rows plus their position ids and tags.

    Keys are stored post-rotation. Layer indices are 1-based.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self._layers = [_LayerCache(config.hidden_size) for _ in range(config.num_layers)]

    def layer(self, index: int) -> _LayerCache:
        if not 1 <= index <= self.config.num_layers:
            raise ValidationError(f"layer index {index} out of range")
        return self._layers[index - 1]

    def append(self, index: int, keys, values, position_ids, segments) -> None:
        lc = self.layer(index)
        lc.keys = np.concatenate([lc.keys, keys])
        lc.values = np.concatenate([lc.values, values])
        lc.position_ids = np.concatenate([lc.position_ids, position_ids])
        lc.segments = np.concatenate([lc.segments, segments.astype(np.int8)])

    def rows(self, index: int) -> int:
        return self.layer(index).keys.shape[0]

    def total_rows(self) -> int:
        return sum(lc.keys.shape[0] for lc in self._layers)

    def segment_rows(self, index: int, segment: int) -> int:
        return int(np.count_nonzero(self.layer(index).segments == segment))

    def delete_segment(self, index: int, segment: int) -> int:
        """Drop all rows with the given tag from one layer; returns count removed."""
        lc = self.layer(index)
        keep = lc.segments != segment
        removed = int(np.count_nonzero(~keep))
        if removed:
            lc.keys = lc.keys[keep]
            lc.values = lc.values[keep]
            lc.position_ids = lc.position_ids[keep]
            lc.segments = lc.segments[keep]
        return removed


@dataclass
class Activations:
    """Hidden states after a layer range, plus optional attention captures.

    `attn_last_rows[layer]` holds the final input row's attention weights per
    head, shape (num_heads, columns); `attn_col_segments[layer]` tags each
    attended column so shares can be aggregated by token type.
    """

    hidden: np.ndarray
    attn_last_rows: dict[int, np.ndarray] | None = None
    attn_col_segments: dict[int, np.ndarray] | None = None


def causal_attention(
    weights: ModelWeights,
    layer_index: int,
    hidden: np.ndarray,
    cache: KVCache,
    position_ids: np.ndarray,
    segments: np.ndarray,
    capture: bool = False,
    counter: OpCounter | None = None,
):
    """One layer's masked multi-head attention over cached plus new rows.

    New rows may attend to every cached row and to new rows at or before
    their own index; later positions are masked to -inf before the softmax.
    Appends the new K/V rows to the cache. Returns the attention output
    (before the residual add) and, when capturing, the last row of each
    head's attention map with the column segment tags.
    """
    config = weights.config
    layer = weights.layers[layer_index - 1]
    n = hidden.shape[0]
    if position_ids.shape[0] != n:
        raise ShapeError("one position id required per new row")
    check_position_ids(position_ids, config.max_position)

    q = matmul(hidden, layer.wq, counter, "q_proj")
    k = matmul(hidden, layer.wk, counter, "k_proj")
    v = matmul(hidden, layer.wv, counter, "v_proj")
    q = apply_rotary(q, position_ids, config)
    k = apply_rotary(k, position_ids, config)

    cached = cache.rows(layer_index)
    cache.append(layer_index, k, v, position_ids, segments)
    lc = cache.layer(layer_index)
    total = cached + n

    num_heads, d = config.num_heads, config.head_dim
    inv_sqrt_d = np.float32(1.0 / math.sqrt(d))
    # future-position mask, shared by every head
    cols = np.arange(total)[None, :]
    limit = (cached + np.arange(n))[:, None]
    neg_inf = np.where(cols > limit, -np.inf, 0.0)

    context = np.empty((n, config.hidden_size), dtype=np.float32)
    last_rows = np.empty((num_heads, total), dtype=np.float32) if capture else None
    for head in range(num_heads):
        sl = slice(head * d, (head + 1) * d)
        scores = matmul(q[:, sl], lc.keys[:, sl].T, counter, "qk") * inv_sqrt_d
        attn = softmax_rows(scores.astype(np.float64) + neg_inf).astype(np.float32)
        context[:, sl] = matmul(attn, lc.values[:, sl], counter, "av")
        if capture:
            last_rows[head] = attn[-1]

    out = matmul(context, layer.wo, counter, "o_proj")
    col_segments = lc.segments.copy() if capture else None
    return out, last_rows, col_segments


def _silu_gate(gate: np.ndarray, up: np.ndarray) -> np.ndarray:
    g = gate.astype(np.float64)
    with np.errstate(over="ignore"):
        act = g / (1.0 + np.exp(-g))
    return (act * up.astype(np.float64)).astype(np.float32)


def decoder_forward(
    weights: ModelWeights,
    embedded_inputs: np.ndarray,
    position_ids,
    cache: KVCache,
    layer_range: tuple[int, int] | None = None,
    segments=None,
    capture: bool = False,
    counter: OpCounter | None = None,
) -> Activations:
    """Run layers [from, to] over already-embedded rows, updating the cache.

    `layer_range` defaults to the full stack. Composing [1, m] then [m+1, N]
    on the returned hidden states is bitwise identical to one [1, N] call.
    """
    config = weights.config
    x = as_matrix(embedded_inputs, "embedded_inputs")
    if x.shape[1] != config.hidden_size:
        raise ShapeError(f"row width {x.shape[1]} != hidden size {config.hidden_size}")
    first, last = layer_range if layer_range is not None else (1, config.num_layers)
    if not 1 <= first <= last <= config.num_layers:
        raise ValidationError(f"invalid layer range [{first}, {last}]")
    position_ids = np.asarray(position_ids, dtype=np.int64)
    if segments is None:
        from .sequence import SegmentType

        segments = np.full(x.shape[0], int(SegmentType.OUTPUT), dtype=np.int8)
    segments = np.asarray(segments, dtype=np.int8)
    if not (position_ids.shape[0] == x.shape[0] == segments.shape[0]):
        raise ShapeError("embedded rows, position ids, and segments must align")

    attn_rows: dict[int, np.ndarray] = {}
    col_segs: dict[int, np.ndarray] = {}
    for li in range(first, last + 1):
        layer = weights.layers[li - 1]
        normed = rms_norm_rows(x, layer.attn_norm_gain, RMS_EPS)
        attn_out, rows, cols_tags = causal_attention(
            weights, li, normed, cache, position_ids, segments, capture, counter
        )
        x = x + attn_out
        normed = rms_norm_rows(x, layer.ffn_norm_gain, RMS_EPS)
        gate = matmul(normed, layer.w_gate, counter, "ffn_gate")
        up = matmul(normed, layer.w_in, counter, "ffn_in")
        x = x + matmul(_silu_gate(gate, up), layer.w_out, counter, "ffn_out")
        if capture:
            attn_rows[li] = rows
            col_segs[li] = cols_tags

    if capture:
        return Activations(x, attn_rows, col_segs)
    return Activations(x)


def predict_next(
    weights: ModelWeights, final_hidden: np.ndarray, counter: OpCounter | None = None
) -> tuple[int, np.ndarray]:
    """Greedy next token from one hidden row: final norm, lm head, argmax.

    Ties break toward the lowest index. The full logit row is returned for
    divergence measurements.
    """
    h = np.asarray(final_hidden, dtype=np.float32).reshape(1, -1)
    if h.shape[1] != weights.config.hidden_size:
        raise ShapeError("final hidden width != hidden size")
    normed = rms_norm_rows(h, weights.final_norm_gain, RMS_EPS)
    logits = matmul(normed, weights.lm_head, counter, "lm_head")[0]
    return int(np.argmax(logits)), logits


def sample_next(
    weights: ModelWeights,
    final_hidden: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
) -> int:
    """Temperature sampling. Unverified convenience; greedy is the tested path."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    _, logits = predict_next(weights, final_hidden)
    from .numerics import softmax_row

    probs = softmax_row(logits / np.float32(temperature)).astype(np.float64)
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


def validate_weights(weights: ModelWeights) -> None:
    """Check every tensor against the config manifest and for finiteness."""
    expected = dict(tensor_shapes(weights.config))
    seen = {}
    for name, arr in weights.tensors():
        if name not in expected:
            raise ValidationError(f"unexpected tensor {name}")
        if tuple(arr.shape) != expected[name]:
            raise ShapeError(
                f"{name} has shape {tuple(arr.shape)}, expected {expected[name]}"
            )
        if arr.dtype != np.float32:
            raise ValidationError(f"{name} must be float32")
        check_finite(arr, name)
        seen[name] = True
    if len(seen) != len(expected):
        raise ValidationError("weight tensors missing from manifest")
