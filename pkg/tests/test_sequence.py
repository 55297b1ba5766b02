import numpy as np
import pytest

from vtwlite.numerics import matmul
from vtwlite.sequence import (
    SegmentType,
    append_output_token,
    build_sequence,
    empty_vision,
    inline_vision,
    make_noncontent_vision,
    make_seeded_vision,
)
from vtwlite.validation import ShapeError, ValidationError
from vtwlite.withdrawal import WithdrawalPolicy, vtw_prefill

from oracles import ref_matmul


def test_layout_tags_and_positions(ref_weights):
    vision = make_seeded_vision(1, 3, ref_weights.config.vision_embed_dim)
    seq = build_sequence([5, 6], vision, [7, 8], ref_weights)
    assert list(seq.position_ids) == list(range(7))
    want = [SegmentType.SYSTEM] * 2 + [SegmentType.VISION] * 3 + [SegmentType.INSTRUCTION] * 2
    assert list(seq.segments) == [int(s) for s in want]
    assert (seq.n_sys, seq.n_vis, seq.n_ins, seq.n_out) == (2, 3, 2, 0)
    assert seq.token_ids == (5, 6, None, None, None, 7, 8)


def test_empty_vision_contiguous_positions(ref_weights):
    seq = build_sequence([1, 2], empty_vision(32), [3], ref_weights)
    assert seq.n_vis == 0
    assert list(seq.position_ids) == [0, 1, 2]


def test_position_ids_unique(ref_weights):
    vision = make_seeded_vision(2, 9, 32)
    seq = build_sequence([1] * 4, vision, [2] * 5, ref_weights)
    assert len(set(seq.position_ids.tolist())) == len(seq)


def test_out_of_range_id_rejected(ref_weights):
    with pytest.raises(ValidationError):
        build_sequence([128], empty_vision(32), [], ref_weights)
    with pytest.raises(ValidationError):
        build_sequence([], empty_vision(32), [-1], ref_weights)


def test_projection_matches_matmul_oracle(ref_weights):
    vision = make_seeded_vision(5, 4, ref_weights.config.vision_embed_dim)
    seq = build_sequence([], vision, [0], ref_weights)
    want = ref_matmul(vision.embeddings, ref_weights.vision_projector)
    np.testing.assert_allclose(seq.embeddings[:4], want, atol=1e-6)


def test_projection_is_linear(ref_weights):
    vision = make_seeded_vision(6, 3, 32)
    scaled = inline_vision(2.5 * vision.embeddings)
    base = matmul(vision.embeddings, ref_weights.vision_projector)
    got = matmul(scaled.embeddings, ref_weights.vision_projector)
    np.testing.assert_allclose(got, 2.5 * base, atol=1e-5)


def test_vision_width_mismatch_rejected(ref_weights):
    bad = inline_vision(np.ones((2, 16), dtype=np.float32))
    with pytest.raises(ShapeError):
        build_sequence([], bad, [0], ref_weights)


class TestNoncontent:
    def test_identical_rows(self):
        v = make_noncontent_vision(3, 8)
        assert v.n_vis == 3
        assert (v.embeddings == v.embeddings[0]).all()

    def test_deterministic(self):
        a = make_noncontent_vision(4, 8)
        b = make_noncontent_vision(4, 8)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()

    def test_zero_count_rejected(self):
        with pytest.raises(ValidationError):
            make_noncontent_vision(0, 8)

    def test_differs_from_seeded_under_withdrawal(self, ref_weights):
        k = 4
        sys_ids, ins_ids = [1, 2, 3], [4, 5, 6]
        dim = ref_weights.config.vision_embed_dim
        seq_nc = build_sequence(sys_ids, make_noncontent_vision(8, dim), ins_ids, ref_weights)
        seq_rnd = build_sequence(sys_ids, make_seeded_vision(3, 8, dim), ins_ids, ref_weights)
        logits_nc = vtw_prefill(ref_weights, seq_nc, WithdrawalPolicy(k=k)).last_logits
        logits_rnd = vtw_prefill(ref_weights, seq_rnd, WithdrawalPolicy(k=k)).last_logits
        assert not np.array_equal(logits_nc, logits_rnd)


class TestAppendOutput:
    def test_first_output_token(self, ref_weights):
        seq = build_sequence([1], empty_vision(32), [2], ref_weights)
        grown = append_output_token(seq, 9, ref_weights)
        assert grown.n_out == 1
        assert len(grown) == 3
        assert seq.n_out == 0  # original untouched

    def test_position_is_previous_max_plus_one(self, ref_weights):
        seq = build_sequence([1, 2], make_seeded_vision(1, 2, 32), [3], ref_weights)
        grown = append_output_token(seq, 4, ref_weights)
        assert int(grown.position_ids[-1]) == int(seq.position_ids.max()) + 1
        assert int(grown.segments[-1]) == int(SegmentType.OUTPUT)

    def test_preserves_other_segment_counts(self, ref_weights):
        seq = build_sequence([1, 2], make_seeded_vision(1, 3, 32), [3], ref_weights)
        grown = append_output_token(seq, 4, ref_weights)
        assert (grown.n_sys, grown.n_vis, grown.n_ins) == (seq.n_sys, seq.n_vis, seq.n_ins)

    def test_embedding_matches_table(self, ref_weights):
        seq = build_sequence([1], empty_vision(32), [2], ref_weights)
        grown = append_output_token(seq, 42, ref_weights)
        np.testing.assert_array_equal(grown.embeddings[-1], ref_weights.token_embedding[42])

    def test_out_of_range_rejected(self, ref_weights):
        seq = build_sequence([1], empty_vision(32), [2], ref_weights)
        with pytest.raises(ValidationError):
            append_output_token(seq, 128, ref_weights)
