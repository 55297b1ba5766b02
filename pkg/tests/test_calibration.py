import json

import numpy as np
import pytest

from vtwlite.calibration import (
    CalibrationConfig,
    CalibrationReport,
    divergence_at,
    sample_subset,
    search_withdrawal_layer,
    subset_indices,
)
from vtwlite.dataset import parse_record, record_sequence
from vtwlite.numerics import softmax_row
from vtwlite.validation import ValidationError
from vtwlite.withdrawal import WithdrawalPolicy, vtw_prefill

from oracles import ref_fisher_yates, ref_kl

N = 8


class TestSampleSubset:
    def test_exhaustion_returns_shuffled_whole_set(self, ref_records):
        config = CalibrationConfig(subset_size=100, sampling_seed=4)
        subset = sample_subset(ref_records, config)
        assert len(subset) == len(ref_records)
        assert sorted(map(id, subset)) == sorted(map(id, ref_records))
        assert subset != ref_records  # shuffled order

    def test_same_seed_same_subset(self, ref_records):
        config = CalibrationConfig(subset_size=5, sampling_seed=2)
        a = sample_subset(ref_records, config)
        b = sample_subset(ref_records, config)
        assert [id(r) for r in a] == [id(r) for r in b]

    def test_matches_reference_shuffle_oracle(self):
        got = subset_indices(100, 100, seed=9)
        assert got == ref_fisher_yates(100, 9)
        assert subset_indices(100, 7, seed=9) == ref_fisher_yates(100, 9)[:7]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValidationError):
            subset_indices(0, 5, seed=1)


class TestDivergenceAt:
    def test_no_vision_record_is_zero_for_every_k(self, ref_weights):
        rec = parse_record({
            "system_ids": [1, 2, 3], "instruction_ids": [4, 5],
            "vision": {"inline": []},
        })
        for k in range(1, N + 1):
            assert divergence_at(ref_weights, rec, k) == 0.0

    def test_matches_double_decode_oracle(self, ref_weights, ref_records):
        rec = next(r for r in ref_records if r.vision.kind == "seeded")
        k = 6
        seq = record_sequence(rec, ref_weights)
        p = softmax_row(vtw_prefill(ref_weights, seq, None).last_logits)
        q = softmax_row(
            vtw_prefill(ref_weights, seq, WithdrawalPolicy(k=k)).last_logits
        )
        want = ref_kl(p, q)
        assert divergence_at(ref_weights, rec, k) == pytest.approx(want, abs=1e-9)

    def test_k_out_of_range(self, ref_weights, ref_records):
        with pytest.raises(ValidationError):
            divergence_at(ref_weights, ref_records[0], 0)
        with pytest.raises(ValidationError):
            divergence_at(ref_weights, ref_records[0], N + 1)


class TestSearch:
    def test_huge_eta_chooses_k_min(self, ref_weights, ref_records):
        report = search_withdrawal_layer(
            ref_weights, ref_records, CalibrationConfig(eta=1e9)
        )
        assert report.chosen_k == 5
        assert list(report.per_k) == [5]

    def test_unsatisfiable_eta_reports_not_found(self, ref_weights, ref_records):
        report = search_withdrawal_layer(
            ref_weights, ref_records, CalibrationConfig(eta=0.0)
        )
        assert report.chosen_k is None
        assert list(report.per_k) == list(range(5, N + 1))

    def test_chosen_matches_brute_force_oracle(self, ref_weights, ref_records):
        # full curve first, then pick an eta between two measured values
        full = search_withdrawal_layer(
            ref_weights, ref_records, CalibrationConfig(eta=0.0)
        )
        values = sorted(full.per_k.values())
        eta = (values[1] + values[2]) / 2.0
        report = search_withdrawal_layer(
            ref_weights, ref_records, CalibrationConfig(eta=eta)
        )
        passing = [k for k, v in full.per_k.items() if v < eta]
        assert passing, "eta must admit at least one layer"
        assert report.chosen_k == min(passing)
        # first-hit semantics: every earlier candidate fails the threshold
        for k in range(5, report.chosen_k):
            assert full.per_k[k] >= eta

    def test_chosen_k_nonincreasing_in_eta(self, ref_weights, ref_records):
        curve = search_withdrawal_layer(
            ref_weights, ref_records, CalibrationConfig(eta=0.0)
        ).per_k
        low, high = min(curve.values()), max(curve.values())
        etas = np.geomspace(max(low / 2, 1e-12), high * 2, 6)
        chosen = []
        for eta in etas:
            rep = search_withdrawal_layer(
                ref_weights, ref_records, CalibrationConfig(eta=float(eta))
            )
            chosen.append(rep.chosen_k if rep.chosen_k is not None else N + 1)
        assert chosen == sorted(chosen, reverse=True)

    def test_reports_are_reproducible(self, ref_weights, ref_records):
        config = CalibrationConfig(eta=0.003, subset_size=6, sampling_seed=3)
        a = search_withdrawal_layer(ref_weights, ref_records, config)
        b = search_withdrawal_layer(ref_weights, ref_records, config)
        assert a.to_json() == b.to_json()

    def test_k_min_above_depth_rejected(self, ref_weights, ref_records):
        config = CalibrationConfig(k_min=9)
        with pytest.raises(ValidationError):
            search_withdrawal_layer(ref_weights, ref_records, config)

    def test_empty_dataset_rejected(self, ref_weights):
        with pytest.raises(ValidationError):
            search_withdrawal_layer(ref_weights, [], CalibrationConfig())


class TestConfigAndReport:
    def test_config_validation(self):
        with pytest.raises(ValidationError):
            CalibrationConfig(subset_size=0)
        with pytest.raises(ValidationError):
            CalibrationConfig(eta=-0.001)
        with pytest.raises(ValidationError):
            CalibrationConfig(k_min=4)
        CalibrationConfig(eta=0.0)  # allowed, always NotFound

    def test_json_and_csv_shapes(self):
        report = CalibrationReport(
            per_k={5: 0.5, 6: 0.001}, chosen_k=6, eta=0.003,
            subset_size=20, sampling_seed=1, k_min=5, subset_ids=[3, 1],
        )
        doc = json.loads(report.to_json())
        assert doc["chosen_k"] == 6
        assert doc["per_k"] == [{"k": 5, "mean_kl": 0.5}, {"k": 6, "mean_kl": 0.001}]
        assert doc["subset_ids"] == [3, 1]
        lines = report.per_k_csv().strip().splitlines()
        assert lines[0] == "k,mean_kl"
        assert lines[1].startswith("5,")
