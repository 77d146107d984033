"""BPE training order, round trips, and the vocabulary file format."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fatspeech import subword
from fatspeech.errors import DataError
from fatspeech.subword import BOUNDARY, RESERVED, Vocabulary, load_vocabulary, train_bpe


class TestTraining:
    def test_first_merge_is_most_frequent_pair(self):
        # "aaab" + "aab" contain pair (a,a) three times, more than any other
        vocab = train_bpe(["aaab aab"], vocab_size=9)
        assert vocab.merges[0] == ("a", "a")

    def test_budget_equal_to_floor_means_zero_merges(self):
        texts = ["ab ba"]
        floor = len(RESERVED) + 3  # ▁, a, b
        vocab = train_bpe(texts, vocab_size=floor)
        assert vocab.merges == []
        assert vocab.size == floor

    def test_below_floor_rejected(self):
        with pytest.raises(DataError):
            train_bpe(["abc"], vocab_size=6)

    def test_retraining_is_byte_identical(self):
        texts = ["the cat sat on the mat", "a cat and a hat"]
        a = train_bpe(texts, vocab_size=40).serialize()
        b = train_bpe(texts, vocab_size=40).serialize()
        assert a == b

    def test_tie_breaks_lexicographic(self):
        # every pair occurs exactly once; merged pieces: "▁x" and "▁y" and "xy"...
        # smallest merged string wins
        vocab = train_bpe(["xy"], vocab_size=9)
        first = vocab.merges[0]
        candidates = {(BOUNDARY, "x"): BOUNDARY + "x", ("x", "y"): "xy"}
        assert first == min(candidates, key=lambda k: candidates[k])

    def test_reserved_ids_are_stable(self):
        vocab = train_bpe(["abc"], vocab_size=20)
        assert vocab.pieces[:5] == list(RESERVED)
        assert vocab.piece_to_id["<pad>"] == 0
        assert vocab.piece_to_id["<unk>"] == 1


class TestEncodeDecode:
    def test_round_trip_simple(self):
        vocab = train_bpe(["hello world", "hello there"], vocab_size=40)
        assert vocab.decode(vocab.encode("hello world")) == "hello world"

    def test_unknown_character_maps_to_unk(self):
        vocab = train_bpe(["abc"], vocab_size=20)
        ids = vocab.encode("aZc")
        assert subword.UNK in ids

    def test_decode_out_of_range_raises(self):
        vocab = train_bpe(["ab"], vocab_size=10)
        with pytest.raises(DataError):
            vocab.decode([vocab.size])

    def test_specials_skipped_in_decode(self):
        vocab = train_bpe(["ab"], vocab_size=10)
        ids = [subword.BOS] + vocab.encode("ab") + [subword.EOS]
        assert vocab.decode(ids) == "ab"

    def test_length_bound_chars_plus_words(self):
        texts = ["some words to build a vocabulary from", "more words here"]
        vocab = train_bpe(texts, vocab_size=60)
        for text in texts:
            ids = vocab.encode(text)
            bound = sum(len(w) for w in text.split()) + len(text.split())
            assert len(ids) <= bound

    def test_prefix_stability_across_words(self):
        vocab = train_bpe(["abc abd bcd", "abc bce"], vocab_size=30)
        left, right = "abc bcd", "abd bce abc"
        combined = vocab.encode(left + " " + right)
        assert combined == vocab.encode(left) + vocab.encode(right)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.text(alphabet="abcd", min_size=1, max_size=6),
                    min_size=1, max_size=6))
    def test_round_trip_property(self, words):
        vocab = train_bpe(["abcd dcba abca"], vocab_size=30)
        text = " ".join(words)
        assert vocab.decode(vocab.encode(text)) == text


class TestVocabFile:
    def test_save_load_save_byte_identical(self, tmp_path):
        vocab = train_bpe(["the quick brown fox", "the lazy dog"], vocab_size=45)
        p = tmp_path / "vocab.txt"
        vocab.save(p)
        reloaded = load_vocabulary(p)
        assert reloaded.serialize() == vocab.serialize()
        assert reloaded.content_hash == vocab.content_hash

    def test_loaded_vocab_encodes_identically(self, tmp_path):
        vocab = train_bpe(["shared subword units"], vocab_size=35)
        p = tmp_path / "vocab.txt"
        vocab.save(p)
        reloaded = load_vocabulary(p)
        for text in ["shared units", "sub word"]:
            assert reloaded.encode(text) == vocab.encode(text)

    def test_corrupt_header_rejected(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("#version 1\nnot a real file\n")
        with pytest.raises(DataError):
            load_vocabulary(p)

    def test_unsupported_version_rejected(self, tmp_path):
        vocab = train_bpe(["ab"], vocab_size=10)
        p = tmp_path / "vocab.txt"
        data = vocab.serialize().replace(b"#version 1", b"#version 9")
        p.write_bytes(data)
        with pytest.raises(DataError):
            load_vocabulary(p)

    def test_merge_replay_regenerates_table(self, tmp_path):
        vocab = train_bpe(["banana bandana"], vocab_size=25)
        p = tmp_path / "vocab.txt"
        vocab.save(p)
        reloaded = load_vocabulary(p)
        assert reloaded.pieces == vocab.pieces
