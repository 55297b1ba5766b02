"""Estimator-style wrappers so the runtime composes with sklearn tooling.

`WithdrawalCalibrator` is fit-shaped (learn the withdrawal layer from a
record list); `WithdrawalGenerator` is predict-shaped (records in, token
lists out). Both follow the usual conventions: constructor arguments are
stored untouched, learned state lands in trailing-underscore attributes,
and `get_params`/`set_params`/`clone` work.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .analytics import AttentionProfile
from .calibration import CalibrationConfig, search_withdrawal_layer
from .dataset import Record, record_sequence
from .model import ModelWeights
from .validation import ValidationError
from .withdrawal import WithdrawalPolicy, generate


def _check_records(X) -> list[Record]:
    records = list(X)
    if not records:
        raise ValidationError("at least one record is required")
    for r in records:
        if not isinstance(r, Record):
            raise ValidationError(f"expected Record instances, got {type(r).__name__}")
    return records


class WithdrawalCalibrator(BaseEstimator):
    """Learn the withdrawal layer from a dataset of records.

    After `fit`: `k_` is the chosen layer (None when no layer clears eta),
    `report_` the full per-layer divergence report, and `policy_` a ready
    policy when a layer was found.
    """

    def __init__(self, model: ModelWeights, eta: float = 0.003,
                 subset_size: int = 20, k_min: int = 5, seed: int = 0):
        self.model = model
        self.eta = eta
        self.subset_size = subset_size
        self.k_min = k_min
        self.seed = seed

    def fit(self, X, y=None):
        records = _check_records(X)
        config = CalibrationConfig(
            subset_size=self.subset_size, eta=self.eta,
            k_min=self.k_min, sampling_seed=self.seed,
        )
        self.report_ = search_withdrawal_layer(self.model, records, config)
        self.k_ = self.report_.chosen_k
        return self

    @property
    def policy_(self) -> WithdrawalPolicy:
        if not hasattr(self, "k_"):
            raise NotFittedError("call fit before reading policy_")
        if self.k_ is None:
            raise ValidationError(
                "no layer satisfied the divergence threshold; raise eta"
            )
        return WithdrawalPolicy(k=self.k_)


class WithdrawalGenerator(BaseEstimator):
    """Greedy generation over records, optionally with withdrawal.

    `k=None` decodes without withdrawal. `max_new_tokens=None` honors each
    record's own budget. With `capture=True`, `predict` also accumulates an
    attention profile in `profile_`.
    """

    def __init__(self, model: ModelWeights, k: int | None = None,
                 pe_policy: str = "keep", max_new_tokens: int | None = None,
                 stop_id: int | None = None, capture: bool = False):
        self.model = model
        self.k = k
        self.pe_policy = pe_policy
        self.max_new_tokens = max_new_tokens
        self.stop_id = stop_id
        self.capture = capture

    def fit(self, X=None, y=None):
        """Stateless; present for pipeline compatibility."""
        return self

    def _policy(self) -> WithdrawalPolicy:
        if self.k is None:
            return WithdrawalPolicy.baseline(self.model.config.num_layers)
        return WithdrawalPolicy(k=self.k, pe_policy=self.pe_policy)

    def predict(self, X) -> list[list[int]]:
        records = _check_records(X)
        policy = self._policy()
        policy.validate(self.model.config.num_layers)
        profile = AttentionProfile() if self.capture else None
        outputs = []
        for record in records:
            seq = record_sequence(record, self.model)
            budget = (
                record.max_new_tokens
                if self.max_new_tokens is None else self.max_new_tokens
            )
            ids, state = generate(
                self.model, seq, policy, budget, self.stop_id, capture=self.capture,
            )
            outputs.append(ids)
            if self.capture:
                profile.extend(state.profile)
        if self.capture:
            self.profile_ = profile
        return outputs
