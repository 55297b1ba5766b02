"""Withdrawal-layer search: first k whose mean logit divergence clears eta.

A small seeded subset of the dataset is evaluated at each candidate layer,
ascending from `k_min`. For one record the divergence is the KL between the
softmaxed final-prefill logits of the unwithdrawn run (as the reference
distribution) and of the withdrawn run. The search stops at the first layer
whose subset mean falls below eta; every evaluated layer is reported so the
divergence curve can be plotted.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Record, record_sequence
from .model import ModelWeights
from .numerics import kl_divergence, softmax_row
from .validation import ValidationError
from .withdrawal import WithdrawalPolicy, vtw_prefill

K_MIN_FLOOR = 5


@dataclass(frozen=True)
class CalibrationConfig:
    subset_size: int = 20
    eta: float = 0.003
    k_min: int = K_MIN_FLOOR
    sampling_seed: int = 0

    def __post_init__(self):
        if self.subset_size < 1:
            raise ValidationError("subset_size must be at least 1")
        # eta = 0 is allowed but unsatisfiable (divergence >= 0, comparison
        # strict), so it always reports NotFound
        if self.eta < 0:
            raise ValidationError("eta must be nonnegative")
        if self.k_min < K_MIN_FLOOR:
            raise ValidationError(f"k_min must be at least {K_MIN_FLOOR}")
        if self.sampling_seed < 0:
            raise ValidationError("sampling_seed must be nonnegative")


@dataclass
class CalibrationReport:
    """Per-layer mean divergences and the chosen layer (None when no layer
    satisfies the threshold)."""

    per_k: dict[int, float]
    chosen_k: int | None
    eta: float
    subset_size: int
    sampling_seed: int
    k_min: int
    subset_ids: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "per_k": [{"k": k, "mean_kl": v} for k, v in sorted(self.per_k.items())],
            "chosen_k": self.chosen_k,
            "eta": self.eta,
            "subset_size": self.subset_size,
            "seed": self.sampling_seed,
            "k_min": self.k_min,
            "subset_ids": self.subset_ids,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def per_k_csv(self) -> str:
        buf = io.StringIO()
        buf.write("k,mean_kl\n")
        for k, v in sorted(self.per_k.items()):
            buf.write(f"{k},{v!r}\n")
        return buf.getvalue()


def subset_indices(n_records: int, subset_size: int, seed: int) -> list[int]:
    """First min(subset_size, n) indices of a seeded Fisher-Yates shuffle.

    The shuffle walks i from n-1 down to 1 swapping with j drawn uniformly
    from [0, i]; this exact procedure is part of the reproducibility
    contract, so an independent replay of it must match.
    """
    if n_records < 1:
        raise ValidationError("dataset must be nonempty")
    rng = np.random.default_rng(seed)
    order = list(range(n_records))
    for i in range(n_records - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order[: min(subset_size, n_records)]


def sample_subset(records: list[Record], config: CalibrationConfig) -> list[Record]:
    """Seeded sample without replacement; exhausts the dataset when small."""
    idx = subset_indices(len(records), config.subset_size, config.sampling_seed)
    return [records[i] for i in idx]


def _final_distribution(weights: ModelWeights, record: Record, k: int | None):
    seq = record_sequence(record, weights)
    policy = None if k is None else WithdrawalPolicy(k=k)
    state = vtw_prefill(weights, seq, policy)
    return softmax_row(state.last_logits)


def divergence_at(weights: ModelWeights, record: Record, k: int) -> float:
    """KL between unwithdrawn and withdrawn final-logit distributions."""
    if not 1 <= k <= weights.config.num_layers:
        raise ValidationError(
            f"k must lie in [1, {weights.config.num_layers}] for calibration"
        )
    p = _final_distribution(weights, record, None)
    q = _final_distribution(weights, record, k)
    return kl_divergence(p, q)


def search_withdrawal_layer(
    weights: ModelWeights,
    records: list[Record],
    config: CalibrationConfig | None = None,
) -> CalibrationReport:
    """Ascending scan over k in [k_min, N]; stops at the first passing layer."""
    if config is None:
        config = CalibrationConfig()
    n = weights.config.num_layers
    if config.k_min > n:
        raise ValidationError(f"k_min {config.k_min} exceeds num_layers {n}")
    idx = subset_indices(len(records), config.subset_size, config.sampling_seed)
    subset = [records[i] for i in idx]

    # the unwithdrawn distribution per record is shared by every candidate k
    references = [_final_distribution(weights, rec, None) for rec in subset]

    per_k: dict[int, float] = {}
    chosen: int | None = None
    for k in range(config.k_min, n + 1):
        total = 0.0
        for rec, p in zip(subset, references):
            q = softmax_row(vtw_prefill(weights, record_sequence(rec, weights),
                                        WithdrawalPolicy(k=k)).last_logits)
            total += kl_divergence(p, q)
        per_k[k] = total / len(subset)
        if per_k[k] < config.eta:
            chosen = k
            break

    return CalibrationReport(
        per_k=per_k,
        chosen_k=chosen,
        eta=config.eta,
        subset_size=config.subset_size,
        sampling_seed=config.sampling_seed,
        k_min=config.k_min,
        subset_ids=idx,
    )
