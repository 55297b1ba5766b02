"""Attention-share profiling and the compute/memory cost model.

Two cost views coexist and are labeled everywhere:

* the headline per-layer formula `2*s^2*h + 12*s*h^2` (at feed-forward
  factor 4), the figure commonly quoted for decoder layers, whose unit
  works out to one multiply-accumulate per "FLOP"; and
* the per-term MAC model of this runtime's actual matmuls, which has a
  third feed-forward matmul because the block is gated.

The per-term table is the normative comparison against the instrumented
counter: integer equality, term by term. Ratios are identical under either
unit convention.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig
from .numerics import OpCounter
from .sequence import SEGMENT_NAMES, SegmentType
from .validation import ShapeError, ValidationError

MODELED_TERMS = (
    "q_proj", "k_proj", "v_proj", "o_proj", "qk", "av",
    "ffn_gate", "ffn_in", "ffn_out",
)


@dataclass
class AttentionProfile:
    """Per (layer, output step) attention shares by segment type.

    Each entry's shares are head-averaged and sum to 1. Entries from several
    records may share a (layer, step) key; tables average them uniformly.
    """

    entries: list[tuple[int, int, np.ndarray]] = field(default_factory=list)

    def add(self, layer: int, step: int, shares: np.ndarray) -> None:
        self.entries.append((layer, step, np.asarray(shares, dtype=np.float64)))

    def extend(self, other: "AttentionProfile") -> None:
        self.entries.extend(other.entries)

    def share(self, layer: int, step: int, segment: SegmentType) -> float:
        rows = [s for (l, t, s) in self.entries if l == layer and t == step]
        if not rows:
            raise ValidationError(f"no profile entry for layer {layer}, step {step}")
        return float(np.mean([r[int(segment)] for r in rows]))

    def layers(self) -> list[int]:
        return sorted({l for (l, _, _) in self.entries})

    def steps(self) -> list[int]:
        return sorted({t for (_, t, _) in self.entries})


def aggregate_attention(head_rows: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Head-averaged attention mass per segment type for one captured row.

    `head_rows` is (num_heads, columns) or a single row; `segments` tags each
    column. Returns four shares ordered as SegmentType.
    """
    rows = np.atleast_2d(np.asarray(head_rows, dtype=np.float64))
    segments = np.asarray(segments)
    if rows.shape[1] != segments.shape[0]:
        raise ShapeError(
            f"attention row covers {rows.shape[1]} columns but {segments.shape[0]}"
            " segment tags given"
        )
    mean_row = rows.mean(axis=0)
    shares = np.zeros(len(SegmentType), dtype=np.float64)
    for seg in SegmentType:
        shares[int(seg)] = float(mean_row[segments == int(seg)].sum())
    return shares


def profile_step(
    profile: AttentionProfile,
    attn_last_rows: dict[int, np.ndarray],
    attn_col_segments: dict[int, np.ndarray],
    step: int,
) -> None:
    """Fold one pass's captures into the profile."""
    for layer, rows in attn_last_rows.items():
        profile.add(layer, step, aggregate_attention(rows, attn_col_segments[layer]))


def _share_table(profile: AttentionProfile, axis: str) -> str:
    if not profile.entries:
        raise ValidationError("profile is empty")
    keys = profile.layers() if axis == "layer" else profile.steps()
    buf = io.StringIO()
    buf.write(f"{axis},{','.join(SEGMENT_NAMES)}\n")
    for key in keys:
        rows = [
            s for (l, t, s) in profile.entries
            if (l if axis == "layer" else t) == key
        ]
        mean = np.mean(rows, axis=0)
        buf.write(f"{key}," + ",".join(f"{v:.10g}" for v in mean) + "\n")
    return buf.getvalue()


def layer_attention_table(profile: AttentionProfile) -> str:
    """CSV of shares per layer, averaged over heads, steps, and records."""
    return _share_table(profile, "layer")


def output_attention_table(profile: AttentionProfile) -> str:
    """CSV of shares per output step, averaged over heads, layers, and records."""
    return _share_table(profile, "step")


def flops_per_layer(s: int, h: int, ffn_factor: int = 4) -> int:
    """Headline per-layer cost 2*s^2*h + 12*s*h^2 at factor 4.

    The feed-forward term scales linearly with the factor, i.e.
    2*s^2*h + 3*ffn_factor*s*h^2.
    """
    if s < 1 or h < 1 or ffn_factor < 1:
        raise ValidationError("s, h, and ffn_factor must be at least 1")
    return 2 * s * s * h + 3 * ffn_factor * s * h * h


def layer_term_macs(s: int, h: int, ffn_factor: int = 4) -> dict[str, int]:
    """Exact MACs of one runtime layer's matmuls over s tokens, by term."""
    if s < 0 or h < 1 or ffn_factor < 1:
        raise ValidationError("bad term-model arguments")
    proj = s * h * h
    attn = s * s * h
    ffn = ffn_factor * s * h * h
    return {
        "q_proj": proj, "k_proj": proj, "v_proj": proj, "o_proj": proj,
        "qk": attn, "av": attn,
        "ffn_gate": ffn, "ffn_in": ffn, "ffn_out": ffn,
    }


def stack_term_macs(num_layers: int, s: int, h: int, ffn_factor: int = 4) -> dict[str, int]:
    """Term MACs for `num_layers` identical layers; zero layers give zeros."""
    if num_layers < 0:
        raise ValidationError("num_layers must be nonnegative")
    if num_layers == 0:
        return {term: 0 for term in MODELED_TERMS}
    one = layer_term_macs(s, h, ffn_factor)
    return {term: num_layers * macs for term, macs in one.items()}


def vtw_term_macs(
    num_layers: int, s_full: int, n_vis: int, k: int, h: int, ffn_factor: int = 4
) -> dict[str, int]:
    """Term MACs for a withdrawn prefill: k-1 full layers, the rest text-only."""
    _check_counts(num_layers, s_full, n_vis, k)
    full = stack_term_macs(k - 1, s_full, h, ffn_factor)
    rest = stack_term_macs(num_layers - (k - 1), s_full - n_vis, h, ffn_factor)
    return {term: full[term] + rest[term] for term in MODELED_TERMS}


def _check_counts(num_layers: int, s_full: int, n_vis: int, k: int) -> None:
    if s_full < 1:
        raise ValidationError("s_full must be at least 1")
    if not 0 <= n_vis <= s_full:
        raise ValidationError("n_vis must lie in [0, s_full]")
    if n_vis == s_full:
        raise ValidationError("at least one non-vision token is required")
    if not 1 <= k <= num_layers + 1:
        raise ValidationError(f"k must lie in [1, {num_layers + 1}]")


@dataclass
class CostReport:
    """Analytical and (optionally) measured cost of one prompt shape."""

    analytical_flops_baseline: int
    analytical_flops_vtw: int
    ratio_vtw_over_baseline: float
    cache_rows_baseline: int
    cache_rows_vtw: int
    token_counts: dict
    measured_macs_baseline: int | None = None
    measured_macs_vtw: int | None = None

    def to_json(self) -> str:
        doc = {
            "analytical_flops_baseline": self.analytical_flops_baseline,
            "analytical_flops_vtw": self.analytical_flops_vtw,
            "ratio_vtw_over_baseline": self.ratio_vtw_over_baseline,
            "cache_rows_baseline": self.cache_rows_baseline,
            "cache_rows_vtw": self.cache_rows_vtw,
            "token_counts": self.token_counts,
            "measured_macs_baseline": self.measured_macs_baseline,
            "measured_macs_vtw": self.measured_macs_vtw,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def vtw_cost_report(
    config: ModelConfig,
    s_full: int,
    n_vis: int,
    k: int,
    measured: tuple[OpCounter, OpCounter] | None = None,
) -> CostReport:
    """Closed-form cost split: layers below k at full width, the rest reduced."""
    _check_counts(config.num_layers, s_full, n_vis, k)
    n, h, f = config.num_layers, config.hidden_size, config.ffn_factor
    s_text = s_full - n_vis
    baseline = n * flops_per_layer(s_full, h, f)
    vtw = (k - 1) * flops_per_layer(s_full, h, f)
    if k <= n:
        vtw += (n - k + 1) * flops_per_layer(s_text, h, f)
    report = CostReport(
        analytical_flops_baseline=baseline,
        analytical_flops_vtw=vtw,
        ratio_vtw_over_baseline=vtw / baseline,
        cache_rows_baseline=n * s_full,
        cache_rows_vtw=(k - 1) * s_full + (n - k + 1) * s_text if k <= n else n * s_full,
        token_counts={
            "s_full": s_full, "n_vis": n_vis, "k": k,
            "num_layers": n, "hidden_size": h, "ffn_factor": f,
        },
    )
    if measured is not None:
        base_counter, vtw_counter = measured
        report.measured_macs_baseline = base_counter.macs
        report.measured_macs_vtw = vtw_counter.macs
    return report


def measured_vs_analytical(
    counters: tuple[OpCounter, OpCounter], report: CostReport
) -> dict:
    """Compare instrumented MACs against the per-term model, term by term.

    Only the modeled matmuls (projections, score and context products, and
    the three feed-forward matmuls) participate; extra labels such as
    lm_head are listed but never judged. Status is PASS when every modeled
    term matches exactly on both the baseline and withdrawn runs.
    """
    tc = report.token_counts
    expected = {
        "baseline": stack_term_macs(
            tc["num_layers"], tc["s_full"], tc["hidden_size"], tc["ffn_factor"]
        ),
        "vtw": vtw_term_macs(
            tc["num_layers"], tc["s_full"], tc["n_vis"], tc["k"],
            tc["hidden_size"], tc["ffn_factor"],
        ),
    }
    summary = {"terms": {}, "unmodeled": {}, "status": "PASS"}
    for side, counter in zip(("baseline", "vtw"), counters):
        for term in MODELED_TERMS:
            measured = counter.by_label.get(term, 0)
            analytical = expected[side][term]
            entry = summary["terms"].setdefault(term, {})
            entry[side] = {
                "measured_macs": measured,
                "analytical_macs": analytical,
                "match": measured == analytical,
            }
            if measured != analytical:
                summary["status"] = "FAIL"
        summary["unmodeled"][side] = {
            label: macs for label, macs in counter.by_label.items()
            if label not in MODELED_TERMS
        }
    summary["headline_flops"] = {
        "baseline": report.analytical_flops_baseline,
        "vtw": report.analytical_flops_vtw,
    }
    return summary
