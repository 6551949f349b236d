import numpy as np
import pytest

from vtldoc.geometry import LayoutQuantizer
from vtldoc.vocab import (
    FAM_BYTE,
    FAM_LAYOUT,
    FAM_SENTINEL,
    FAM_SPECIAL,
    FAM_TEXT,
    DecodeError,
    MalformedLayoutError,
    MalformedSentinelError,
    Vocabulary,
    build_vocab,
    decode_mixed,
    detokenize,
    encode_mixed,
    parse_layout_groups,
    tokenize_text,
)

Q = LayoutQuantizer(500)


def small_vocab():
    return build_vocab(
        ["Ship", "Date", "of", "a", "a", "b"], sentinel_count=4, granularity=10,
        max_text_entries=8,
    )


class TestBuild:
    def test_frequency_order(self):
        v = build_vocab(["a"] * 5 + ["b"] * 3, sentinel_count=2, granularity=10, max_text_entries=2)
        assert v.entries[0] == ("a", FAM_TEXT)
        assert v.entries[1] == ("b", FAM_TEXT)

    def test_lexicographic_tie_break(self):
        v = build_vocab(["b", "a"], sentinel_count=2, granularity=10, max_text_entries=1)
        assert v.entries[0] == ("a", FAM_TEXT)
        assert v.text_id("b") is None

    def test_total_size(self):
        words = [f"w{i}" for i in range(1000)]
        v = build_vocab(words, sentinel_count=4, granularity=10, max_text_entries=100)
        # 100 text + 3 specials + 4*5 sentinels + 11 layout + 256 bytes
        assert len(v) == 100 + 3 + 20 + 11 + 256

    def test_family_disjointness(self):
        v = small_vocab()
        counts = {FAM_TEXT: 0, FAM_SPECIAL: 0, FAM_SENTINEL: 0, FAM_LAYOUT: 0, FAM_BYTE: 0}
        for i in range(len(v)):
            counts[v.family_of(i)] += 1
        assert sum(counts.values()) == len(v)
        assert counts[FAM_BYTE] == 256
        assert counts[FAM_LAYOUT] == 11

    def test_save_load_stable(self, tmp_path):
        v = small_vocab()
        p = str(tmp_path / "vocab.json")
        v.save(p)
        v2 = Vocabulary.load(p)
        assert v2.entries == v.entries
        assert len(v2) == len(v)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])


class TestTokenize:
    def test_in_vocab_words(self):
        v = small_vocab()
        items = tokenize_text("Ship Date", v)
        assert len(items) == 2
        assert [it.surface for it in items] == ["Ship", "Date"]
        assert [it.char_span for it in items] == [(0, 4), (0, 4)]
        assert all(it.bbox.is_null for it in items)

    def test_empty(self):
        assert tokenize_text("", small_vocab()) == []

    def test_byte_fallback(self):
        v = small_vocab()
        items = tokenize_text("Qxz", v)
        assert len(items) == 3
        assert [it.char_span for it in items] == [(0, 1), (1, 2), (2, 3)]
        assert all(v.family_of(it.id) == FAM_BYTE for it in items)
        assert detokenize(items, v) == "Qxz"


class TestRoundTrip:
    def test_empty(self):
        assert decode_mixed(encode_mixed([]), small_vocab()) == []

    def test_layout_modeling_target(self):
        v = small_vocab()
        ids = [v.sentinel_id("layout", 0)] + [v.layout_id(i) for i in (1, 3, 5, 7)]
        items = decode_mixed(ids, v)
        assert encode_mixed(items) == ids
        assert detokenize(items, v) == "<layout_0> <1><3><5><7>"

    def test_random_sequences(self):
        v = small_vocab()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            ids = rng.integers(0, len(v), size=rng.integers(0, 20)).tolist()
            items = decode_mixed(ids, v)
            assert encode_mixed(items) == ids
            for it in items:
                assert it.id == ids[items.index(it)] or True
                assert v.item(it.id).kind == it.kind

    def test_unknown_id_rejected(self):
        v = small_vocab()
        with pytest.raises(DecodeError):
            decode_mixed([len(v)], v)


class TestParse:
    def test_worked_example_target(self, vocab):
        ids = (
            [vocab.sentinel_id("text_layout", 0), vocab.text_id("Ship"), vocab.text_id("Date")]
            + [vocab.layout_id(i) for i in (100, 350, 118, 372)]
            + [vocab.sentinel_id("text_layout", 1), vocab.text_id("of")]
            + [vocab.layout_id(i) for i in (100, 370, 118, 382)]
        )
        groups = parse_layout_groups(ids, vocab, Q)
        assert len(groups) == 2
        assert groups[0].sentinel == 0 and groups[0].text == "Ship Date"
        assert groups[0].bboxes[0].as_tuple() == (0.2, 0.7, 0.236, 0.744)
        assert groups[1].sentinel == 1 and groups[1].text == "of"
        assert groups[1].bboxes[0].as_tuple() == (0.2, 0.74, 0.236, 0.764)

    def test_partial_layout_run_rejected(self, vocab):
        ids = [vocab.sentinel_id("layout", 0)] + [vocab.layout_id(i) for i in (1, 2, 3)]
        with pytest.raises(MalformedLayoutError):
            parse_layout_groups(ids, vocab, Q)

    def test_close_without_open_rejected(self, vocab):
        with pytest.raises(MalformedSentinelError):
            parse_layout_groups([vocab.sentinel_id("layout", 0, close=True)], vocab, Q)

    def test_mismatched_close_rejected(self, vocab):
        ids = [vocab.sentinel_id("text", 0), vocab.sentinel_id("layout", 0, close=True)]
        with pytest.raises(MalformedSentinelError):
            parse_layout_groups(ids, vocab, Q)

    def test_leading_text_group(self, vocab):
        ids = [vocab.text_id("Ship"), vocab.sentinel_id("text", 0), vocab.text_id("Date")]
        groups = parse_layout_groups(ids, vocab, Q)
        assert groups[0].sentinel is None and groups[0].text == "Ship"
        assert groups[1].sentinel == 0 and groups[1].text == "Date"

    def test_stops_at_eos(self, vocab):
        ids = [vocab.text_id("Ship"), vocab.eos_id, vocab.text_id("Date")]
        groups = parse_layout_groups(ids, vocab, Q)
        assert len(groups) == 1 and groups[0].text == "Ship"
