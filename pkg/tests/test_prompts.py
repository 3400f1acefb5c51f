"""Prompt rendering and tokenization tests."""

import hashlib

import numpy as np
import pytest

from mrcontrast.errors import TokenIdOutOfRange
from mrcontrast.prompts import (
    NEVER_DROPPED,
    VOCAB_SIZE,
    Piece,
    PromptBank,
    PromptConfig,
    assemble,
    format_number,
    prompt_pieces,
    render_prompt,
    tokenize,
    validate_token_ids,
)
from mrcontrast.records import make_record


def full_record(**kw):
    base = dict(
        manufacturer="GE", scanner_model="SIGNA",
        series_description="T1 FLAIR", sequence_type="IR",
        sequence_variant="SK", field_strength_tesla=1.5,
        te_ms=20.0, tr_ms=3000.0, ti_ms=150.0, flip_angle_deg=90.0,
        voxel_spacing_mm=(1.0, 1.0, 5.0),
    )
    base.update(kw)
    return make_record("r", **base)


def reference_token(word: str) -> int:
    digest = hashlib.blake2b(word.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % VOCAB_SIZE


class TestFormatNumber:
    def test_integers_drop_trailing_zero(self):
        assert format_number(90.0) == "90"
        assert format_number(3000.0) == "3000"

    def test_fractions_keep_digits(self):
        assert format_number(1.5) == "1.5"
        assert format_number(93.7) == "93.7"


class TestRenderPrompt:
    def test_full_sentence_layout(self):
        text = render_prompt(full_record(), PromptConfig(dropout=0.0)).text
        assert text == (
            "MRI scan acquired on a GE SIGNA at 1.5 tesla, axial plane, "
            "sequence IR variant SK, flip angle 90 degrees, echo time 20 ms, "
            "repetition time 3000 ms, inversion time 150 ms."
        )

    def test_no_inversion_clause(self):
        record = full_record(ti_ms=None, sequence_type="SE")
        text = render_prompt(record, PromptConfig(dropout=0.0)).text
        assert "no inversion pulse" in text
        assert "inversion time" not in text

    def test_series_description_opt_in(self):
        config = PromptConfig(dropout=0.0, include_series_description=True)
        text = render_prompt(full_record(), config).text
        assert text.endswith("series description: T1 FLAIR.")
        assert "series description" not in render_prompt(
            full_record(), PromptConfig(dropout=0.0)
        ).text

    def test_numerical_only_keeps_timing_clauses(self):
        config = PromptConfig(dropout=0.0, numerical_only=True)
        text = render_prompt(full_record(), config).text
        assert "echo time 20 ms" in text
        assert "repetition time 3000 ms" in text
        assert "flip angle 90 degrees" in text
        assert "GE" not in text
        assert "tesla" not in text
        assert "plane" not in text

    def test_plane_words(self):
        sag = full_record(voxel_spacing_mm=(6.0, 1.0, 1.0))
        assert "sagittal plane" in render_prompt(sag, PromptConfig(dropout=0.0)).text

    def test_dropout_zero_is_deterministic(self):
        config = PromptConfig(dropout=0.0, seed=3)
        texts = {render_prompt(full_record(), config).text for _ in range(5)}
        assert len(texts) == 1

    def test_dropout_never_removes_protected_clauses(self):
        assert NEVER_DROPPED == {"te", "tr", "flip_angle"}
        for seed in range(50):
            config = PromptConfig(dropout=0.9, seed=seed)
            text = render_prompt(full_record(), config).text
            assert "echo time 20 ms" in text
            assert "repetition time 3000 ms" in text
            assert "flip angle 90 degrees" in text

    def test_dropout_eventually_removes_droppable_clauses(self):
        texts = [
            render_prompt(full_record(), PromptConfig(dropout=0.9, seed=s)).text
            for s in range(30)
        ]
        assert any("tesla" not in t for t in texts)
        assert any("plane" not in t for t in texts)

    def test_same_seed_same_mask(self):
        config = PromptConfig(dropout=0.5, seed=11)
        texts = {render_prompt(full_record(), config).text for _ in range(5)}
        assert len(texts) == 1

    def test_restrict_clauses(self):
        config = PromptConfig(
            dropout=0.0, restrict_clauses=frozenset({"te", "tr"})
        )
        text = render_prompt(full_record(), config).text
        assert text == "MRI scan, echo time 20 ms, repetition time 3000 ms."


class TestAssemble:
    def test_head_clauses_join_with_spaces(self):
        pieces = prompt_pieces(full_record(), PromptConfig(dropout=0.0))
        text = assemble(pieces)
        assert text.startswith("MRI scan acquired on a GE SIGNA at 1.5 tesla,")

    def test_assemble_without_head_clauses(self):
        pieces = [Piece("te", "echo time 5 ms")]
        assert assemble(pieces) == "MRI scan, echo time 5 ms."


class TestTokenize:
    def test_matches_reference_hash(self):
        for word in ("mri", "scan", "90", "1.5", "tesla", "sagittal"):
            assert tokenize(word) == [reference_token(word)]

    def test_splits_words_and_numbers(self):
        ids = tokenize("echo time 20 ms")
        assert ids == [reference_token(w) for w in ("echo", "time", "20", "ms")]

    def test_case_insensitive(self):
        assert tokenize("SIEMENS Avanto") == tokenize("siemens avanto")

    def test_decimal_is_one_token(self):
        assert len(tokenize("1.5")) == 1
        assert tokenize("1.5") != tokenize("15")

    def test_punctuation_is_invisible(self):
        assert tokenize("plane, sequence.") == tokenize("plane sequence")

    def test_ids_in_range(self):
        text = render_prompt(full_record(), PromptConfig(dropout=0.0)).text
        ids = tokenize(text)
        assert all(0 <= t < VOCAB_SIZE for t in ids)
        validate_token_ids(ids)

    def test_validate_rejects_out_of_range(self):
        with pytest.raises(TokenIdOutOfRange):
            validate_token_ids([0, VOCAB_SIZE])
        with pytest.raises(TokenIdOutOfRange):
            validate_token_ids([-1])

    def test_distinct_numerals_get_distinct_token_streams(self):
        seen = {}
        for te in range(0, 200, 5):
            ids = tuple(tokenize(f"echo time {te} ms"))
            assert ids not in seen, f"collision {te} vs {seen.get(ids)}"
            seen[ids] = te


class TestPromptBank:
    def records(self):
        return [
            full_record(),
            full_record(te_ms=90.0, ti_ms=None, sequence_type="SE"),
            full_record(manufacturer="SIEMENS", scanner_model="AVANTO"),
        ]

    def test_tokens_full_matches_rendered_sentence(self):
        config = PromptConfig(dropout=0.5, seed=7)
        bank = PromptBank(self.records(), config)
        rendered = PromptConfig(
            dropout=0.0,
            numerical_only=config.numerical_only,
            include_series_description=config.include_series_description,
        )
        for i, record in enumerate(self.records()):
            want = tuple(tokenize(render_prompt(record, rendered).text))
            assert bank.tokens_full(i) == want

    def test_dropout_uniforms_control_clauses(self):
        config = PromptConfig(dropout=0.5, seed=0)
        bank = PromptBank(self.records(), config)
        n = bank.n_droppable(0)
        assert n > 0
        keep_all = bank.tokens_with_dropout(0, np.ones(n))
        assert keep_all == bank.tokens_full(0)
        drop_all = bank.tokens_with_dropout(0, np.zeros(n))
        assert len(drop_all) < len(keep_all)

    def test_dropped_tokens_are_a_subsequence(self):
        config = PromptConfig(dropout=0.5, seed=0)
        bank = PromptBank(self.records(), config)
        rng = np.random.default_rng(0)
        full = bank.tokens_full(0)
        for _ in range(20):
            sub = bank.tokens_with_dropout(0, rng.uniform(size=bank.n_droppable(0)))
            it = iter(full)
            assert all(tok in it for tok in sub)

    def test_protected_clause_tokens_survive_full_dropout(self):
        config = PromptConfig(dropout=0.5, seed=0)
        bank = PromptBank(self.records(), config)
        drop_all = bank.tokens_with_dropout(1, np.zeros(bank.n_droppable(1)))
        for word in ("echo", "repetition", "flip"):
            assert reference_token(word) in drop_all
