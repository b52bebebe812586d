import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drs import spanmask
from drs.schema import FIELD_ORDER, StagedStep, StructuredAnnotation, Triplet, render_target
from drs.schema import STAGE_ORDER
from drs.spanmask import (
    BadPhase,
    CoverageMismatch,
    LengthMismatch,
    LogProbTrace,
    MaskArtifact,
    RenderedTarget,
    Tokenization,
    build_artifacts,
    chunk_tokenization,
    compute_mask,
    emit_artifacts,
    in_scope_prefix,
    load_artifacts,
    masked_nll,
    whitespace_tokenization,
)


def minimal_annotation():
    return StructuredAnnotation(
        ("towel",),
        (Triplet("towel", "on", "rack"),),
        tuple(StagedStep(s, t) for s, t in zip(STAGE_ORDER, ("see", "near", "thus", "A"))),
        "A",
    )


def field_label_mask_oracle(spans, offsets, phase):
    """Per-byte field labeling: token in scope iff any byte belongs to F1..F_phase."""
    def label(byte):
        for i, field in enumerate(FIELD_ORDER):
            start, end = spans.span(field)
            if start <= byte < end:
                return i + 1
        raise AssertionError(f"byte {byte} outside all spans")

    return tuple(
        1 if any(label(b) <= phase for b in range(start, end)) else 0 for start, end in offsets
    )


class TestTokenization:
    def test_gap_rejected(self):
        with pytest.raises(CoverageMismatch):
            Tokenization(((0, 2), (3, 5)))

    def test_overlap_rejected(self):
        with pytest.raises(CoverageMismatch):
            Tokenization(((0, 3), (2, 5)))

    def test_empty_token_rejected(self):
        with pytest.raises(CoverageMismatch):
            Tokenization(((0, 2), (2, 2)))

    def test_must_start_at_zero(self):
        with pytest.raises(CoverageMismatch):
            Tokenization(((1, 4),))

    @settings(max_examples=80, deadline=None)
    @given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=60), st.integers(1, 9))
    def test_reference_tokenizers_tile(self, text, chunk):
        n = len(text.encode("utf-8"))
        for tok in (chunk_tokenization(text, chunk), whitespace_tokenization(text)):
            assert tok.n_bytes == n

    def test_whitespace_tokens_split_on_runs(self):
        tok = whitespace_tokenization("a bb  ccc")
        assert tok.offsets == ((0, 2), (2, 6), (6, 9))


class TestComputeMask:
    def setup_method(self):
        self.text, self.spans = render_target(minimal_annotation())

    def test_phase4_all_ones(self):
        tok = chunk_tokenization(self.text, 3)
        assert all(compute_mask(self.spans, tok, 4))

    def test_monotone_in_phase(self):
        tok = chunk_tokenization(self.text, 5)
        masks = [compute_mask(self.spans, tok, k) for k in (1, 2, 3, 4)]
        for lower, higher in zip(masks, masks[1:]):
            assert all(a <= b for a, b in zip(lower, higher))

    def test_twelve_token_phase2_matches_byte_oracle(self):
        # 12 near-equal contiguous ranges over the 178-byte minimal target.
        n = len(self.text.encode("utf-8"))
        assert n == 178
        base, rem = divmod(n, 12)
        offsets, cursor = [], 0
        for i in range(12):
            size = base + (1 if i < rem else 0)
            offsets.append((cursor, cursor + size))
            cursor += size
        tok = Tokenization(tuple(offsets))
        mask = compute_mask(self.spans, tok, 2)
        assert mask == field_label_mask_oracle(self.spans, tok.offsets, 2)
        assert mask == (1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0)  # frozen from the oracle

    def test_bad_phase(self):
        tok = chunk_tokenization(self.text, 4)
        for phase in (0, 5, -1):
            with pytest.raises(BadPhase):
                compute_mask(self.spans, tok, phase)

    def test_coverage_mismatch(self):
        short = Tokenization(((0, 10),))
        with pytest.raises(CoverageMismatch):
            compute_mask(self.spans, short, 1)

    def test_prefix_is_field_end(self):
        for k, field in enumerate(FIELD_ORDER, start=1):
            assert in_scope_prefix(self.spans, k) == self.spans.end_of(field)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 11), st.integers(1, 4))
    def test_mask_matches_byte_oracle_for_chunkings(self, chunk, phase):
        tok = chunk_tokenization(self.text, chunk)
        assert compute_mask(self.spans, tok, phase) == field_label_mask_oracle(
            self.spans, tok.offsets, phase
        )


class TestMaskedNll:
    def test_hand_fixture(self):
        assert masked_nll([-0.5, -1.0, -2.0], [1, 0, 1]) == pytest.approx(2.5, abs=1e-12)

    def test_all_zero_mask(self):
        assert masked_nll([-0.5, -1.0], [0, 0]) == 0.0

    def test_all_ones_equals_unmasked(self):
        values = [-0.3, -0.7, -1.1, -0.2]
        assert masked_nll(values, [1] * 4) == -sum(values)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            masked_nll([-1.0], [1, 0])

    def test_trace_validation(self):
        with pytest.raises(ValueError):
            LogProbTrace((0.1,))
        with pytest.raises(ValueError):
            LogProbTrace((float("nan"),))
        assert len(LogProbTrace((0.0, -1.5))) == 2

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.floats(min_value=-5, max_value=0), min_size=1, max_size=20), st.randoms())
    def test_invariant_under_permuting_unmasked(self, values, rng):
        mask = [rng.randint(0, 1) for _ in values]
        baseline = masked_nll(values, mask)
        outside = [i for i, bit in enumerate(mask) if not bit]
        shuffled = list(values)
        order = outside[:]
        rng.shuffle(order)
        for i, j in zip(outside, order):
            shuffled[i] = values[j]
        assert masked_nll(shuffled, mask) == baseline

    def test_field_increment_additivity(self):
        text, spans = render_target(minimal_annotation())
        tok = chunk_tokenization(text, 3)
        rng = random.Random(7)
        values = [-rng.random() * 3 for _ in range(tok.n_tokens)]
        m3 = compute_mask(spans, tok, 3)
        m4 = compute_mask(spans, tok, 4)
        answer_only = [b4 - b3 for b3, b4 in zip(m3, m4)]
        delta = masked_nll(values, m4) - masked_nll(values, m3)
        assert math.isclose(delta, masked_nll(values, answer_only), abs_tol=1e-9)


def targets_for(n):
    targets = []
    for i in range(n):
        ann = StructuredAnnotation(
            (f"thing{i}",),
            (Triplet(f"thing{i}", "near", "wall"),),
            tuple(StagedStep(s, f"step {i}") for s in STAGE_ORDER),
            "A" if i % 2 else "B",
        )
        targets.append(RenderedTarget.from_annotation(f"s{i:03d}", ann))
    return targets


class TestEmitArtifacts:
    def test_two_samples_four_phases(self, tmp_path):
        targets = targets_for(2)
        toks = {t.sample_id: chunk_tokenization(t.text, 4) for t in targets}
        out = tmp_path / "masks.jsonl"
        written, failures = emit_artifacts(targets, toks, (1, 2, 3, 4), out)
        assert written == 8 and not failures
        artifacts = load_artifacts(out)
        keys = [(a.sample_id, a.phase) for a in artifacts]
        assert keys == sorted(keys)

    def test_rerun_is_byte_identical(self, tmp_path):
        targets = targets_for(3)
        toks = {t.sample_id: chunk_tokenization(t.text, 5) for t in targets}
        out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        emit_artifacts(targets, toks, (1, 2, 3, 4), out1)
        emit_artifacts(targets, toks, (1, 2, 3, 4), out2)
        assert out1.read_bytes() == out2.read_bytes()

    def test_injected_malformed_tokenization_fails_only_its_sample(self, tmp_path):
        targets = targets_for(5)
        toks = {t.sample_id: chunk_tokenization(t.text, 4).offsets for t in targets}
        toks["s002"] = ((0, 4), (6, 9))  # gap: does not tile the text
        out = tmp_path / "masks.jsonl"
        written, failures = emit_artifacts(targets, toks, (1, 2, 3, 4), out)
        assert written == 5 * 4 - 4
        assert [f.sample_id for f in failures] == ["s002"]

    def test_missing_tokenization_reported(self, tmp_path):
        targets = targets_for(2)
        toks = {"s000": chunk_tokenization(targets[0].text, 4)}
        written, failures = emit_artifacts(targets, toks, (1, 4), tmp_path / "m.jsonl")
        assert written == 2
        assert failures[0].sample_id == "s001"

    def test_record_wire_format(self, tmp_path):
        targets = targets_for(1)
        toks = {targets[0].sample_id: chunk_tokenization(targets[0].text, 4)}
        out = tmp_path / "m.jsonl"
        emit_artifacts(targets, toks, (2,), out)
        obj = json.loads(out.read_text().splitlines()[0])
        assert list(obj) == ["sample_id", "phase", "target_text", "token_offsets", "mask", "field_spans"]
        assert list(obj["field_spans"]) == list(FIELD_ORDER)
        assert all(bit in (0, 1) for bit in obj["mask"])
        restored = MaskArtifact.from_json_dict(obj)
        assert restored.json_line() == out.read_text().splitlines()[0]

    def test_mask_length_checked(self):
        targets = targets_for(1)
        tok = chunk_tokenization(targets[0].text, 4)
        with pytest.raises(LengthMismatch):
            MaskArtifact("x", 1, targets[0].text, tok, (1, 0), targets[0].spans)
