import io

import pytest

from lyric_transfer.lib.errors import InvalidIdError, UnknownSymbolError
from lyric_transfer.lib.process import run_normalize
from lyric_transfer.lib.text_utils import (
    DropReason,
    TokenInventory,
    classify_line,
    decode,
    encode,
    normalize_line,
    normalize_lines,
    number_to_words,
    ordinal_to_words,
    strip_control,
)


class TestInventory:
    def test_default_has_31_unique_symbols(self, inventory):
        assert inventory.size == 31
        assert len(set(inventory.symbols)) == 31
        for ch in "ABCDEFGHIJKLMNOPQRSTUVWXYZ'|":
            assert ch in inventory.symbols

    def test_maps_are_mutual_inverses(self, inventory):
        for i, symbol in enumerate(inventory.symbols):
            assert inventory.id_of(symbol) == i
            assert inventory.symbol_of(i) == symbol

    def test_control_ids_are_not_labels(self, inventory):
        assert set(inventory.control_ids).isdisjoint(inventory.label_ids)
        assert inventory.eos_id in inventory.emittable_ids
        assert inventory.bos_id not in inventory.emittable_ids
        assert inventory.blank_id not in inventory.emittable_ids

    def test_unknown_symbol_and_bad_id(self, inventory):
        with pytest.raises(UnknownSymbolError):
            inventory.id_of("é")
        with pytest.raises(InvalidIdError):
            inventory.symbol_of(31)
        with pytest.raises(InvalidIdError):
            inventory.symbol_of(-1)

    def test_save_load_keeps_fingerprint(self, inventory, tmp_path):
        path = tmp_path / "inventory.txt"
        inventory.save(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[inventory.eos_id] == inventory.eos
        assert TokenInventory.load(path).fingerprint() == inventory.fingerprint()

    def test_duplicate_symbols_rejected(self):
        with pytest.raises(ValueError):
            TokenInventory(symbols=["<blank>", "<bos>", "<eos>", "A", "A"], word_boundary=None, quote=None)


class TestNormalization:
    @pytest.mark.parametrize(
        "raw, expected",
        [
            ("hello   world", "HELLO WORLD"),
            ("I've got 2 hearts", "I'VE GOT TWO HEARTS"),
            ("Café", "CAFE"),
            ("the 21st century", "THE TWENTY FIRST CENTURY"),
            ("Don’t", "DON'T"),
            ("007", "ZERO ZERO SEVEN"),
        ],
    )
    def test_rules(self, raw, expected):
        assert normalize_line(raw) == expected

    def test_guitar_solo_is_dropped(self):
        assert normalize_line("**guitar solo**") is None
        assert classify_line("**guitar solo**") == (None, DropReason.MEANINGLESS_PATTERN)

    def test_section_tag_and_punctuation_only(self):
        assert classify_line("[Chorus]")[1] is DropReason.MEANINGLESS_PATTERN
        assert classify_line("?!...")[1] is DropReason.NO_CONTENT
        assert classify_line("")[1] is DropReason.NO_CONTENT

    def test_unknown_characters_are_discarded(self):
        assert normalize_line("L@VE") == "LVE"
        assert normalize_line("rock-n-roll") == "ROCKNROLL"
        assert normalize_line("a | b") == "A B"

    def test_apostrophe_alone_is_content(self):
        assert classify_line("'") == ("'", DropReason.KEPT)

    def test_idempotent(self):
        once = normalize_line("  We'll rock 4 U, 1999!  ")
        assert normalize_line(once) == once

    def test_output_alphabet(self, inventory):
        text = normalize_line("Ünïcödé — 3 wörds & sÿmbols ♪ 42")
        allowed = set(inventory.text_characters) | {" "}
        assert set(text) <= allowed
        assert "  " not in text

    def test_number_grammar(self):
        assert number_to_words("0") == "ZERO"
        assert number_to_words("15") == "FIFTEEN"
        assert number_to_words("1999") == "ONE THOUSAND NINE HUNDRED NINETY NINE"
        assert number_to_words("10000") == "ONE ZERO ZERO ZERO ZERO"
        assert ordinal_to_words("12") == "TWELFTH"
        assert ordinal_to_words("30") == "THIRTIETH"
        assert ordinal_to_words("104") == "ONE HUNDRED FOURTH"

    def test_normalize_lines_reports_every_line(self):
        results = list(normalize_lines(["la la\n", "**solo**\n", "\n"]))
        assert [r[0] for r in results] == [1, 2, 3]
        assert [r[2] for r in results] == [DropReason.KEPT, DropReason.MEANINGLESS_PATTERN, DropReason.NO_CONTENT]


def test_normalize_golden_file(fixtures_dir):
    sink, diagnostics = io.StringIO(), io.StringIO()
    with open(fixtures_dir / "normalize_input.txt", "r", encoding="utf-8") as source:
        counts = run_normalize(source, sink, diagnostics, mark_dropped=True)
    expected = (fixtures_dir / "normalize_expected.txt").read_text(encoding="utf-8")
    assert sink.getvalue() == expected
    assert sum(counts.values()) == 50
    assert diagnostics.getvalue().splitlines()[0] == "1\tmeaningless_pattern"


class TestEncoding:
    def test_space_becomes_word_boundary(self, inventory):
        ids = encode("LA LA", inventory)
        assert len(ids) == 5
        assert ids[2] == inventory.word_boundary_id
        assert decode(ids, inventory) == "LA LA"

    def test_no_control_ids_emitted(self, inventory):
        ids = encode("DON'T STOP", inventory)
        assert set(ids).isdisjoint(inventory.control_ids)

    def test_unknown_character(self, inventory):
        with pytest.raises(UnknownSymbolError):
            encode("hello", inventory)

    def test_decode_rejects_control_and_out_of_range(self, inventory):
        with pytest.raises(InvalidIdError):
            decode([inventory.blank_id], inventory)
        with pytest.raises(InvalidIdError):
            decode([99], inventory)

    def test_strip_control(self, inventory):
        a = inventory.id_of("A")
        ids = [inventory.bos_id, a, inventory.blank_id, a, inventory.eos_id]
        assert strip_control(ids, inventory) == [a, a]

    def test_random_normalized_lines_round_trip(self, inventory, rng):
        letters = inventory.text_characters
        for _ in range(1000):
            words = ["".join(rng.choice(list(letters), size=int(rng.integers(1, 9))))
                     for _ in range(int(rng.integers(1, 7)))]
            line = " ".join(words)
            assert normalize_line(line, inventory) == line
            assert decode(encode(line, inventory), inventory) == line

    def test_random_label_sequences_round_trip(self, inventory, rng):
        labels = inventory.label_ids
        for _ in range(1000):
            ids = [int(i) for i in rng.choice(labels, size=int(rng.integers(0, 30)))]
            assert encode(decode(ids, inventory), inventory) == ids
