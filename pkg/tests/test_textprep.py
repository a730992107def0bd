import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peftner.corpus import LabeledSequence
from peftner.textprep import (
    CLS,
    CoverageGap,
    CorpusEmpty,
    IGNORE,
    InvalidWindow,
    LengthMismatch,
    MASK,
    NO_WORD,
    PAD,
    SEP,
    UNK,
    UNK_ID,
    Vocabulary,
    align_labels,
    build_vocab,
    chunk_sequence,
    stitch_predictions,
    tokenize_word,
    tokenize_words,
    window_starts,
)
from oracles import reference_windows


def vocab_from(pieces):
    return Vocabulary([PAD, UNK, MASK, CLS, SEP] + pieces)


class TestBuildVocab:
    def test_hand_derived_example(self):
        # corpus {"aa"}: single chars {a}, multi-char substrings {aa}
        vocab = build_vocab([LabeledSequence(["aa"], ["O"])], target_size=8)
        assert set(vocab.pieces) == {PAD, UNK, MASK, CLS, SEP, "a", "aa"}
        assert len(vocab) == 7

    def test_target_below_minimum(self):
        with pytest.raises(ValueError):
            build_vocab([LabeledSequence(["ab"], ["O"])], target_size=6)

    def test_empty_corpus(self):
        with pytest.raises(CorpusEmpty):
            build_vocab([], target_size=10)

    def test_deterministic(self):
        corpus = [["abc", "bcd", "abc"], ["cde"]]
        v1 = build_vocab(corpus, 20)
        v2 = build_vocab(corpus, 20)
        assert v1.pieces == v2.pieces

    def test_frequency_ranking(self):
        # "ab" occurs 3x, "cd" once: with room for one multi-char piece the
        # more frequent substring wins
        vocab = build_vocab([["ab", "ab", "ab", "cd"]], target_size=10)
        assert "ab" in vocab.piece_to_id
        assert len(vocab) == 10

    def test_accepts_word_lists(self):
        vocab = build_vocab([["xy"]], target_size=9)
        assert "xy" in vocab.piece_to_id

    def test_reserved_ids_dense_and_first(self):
        vocab = build_vocab([["ab"]], target_size=9)
        assert vocab.pieces[:5] == [PAD, UNK, MASK, CLS, SEP]
        assert [vocab.piece_to_id[p] for p in vocab.pieces] == list(range(len(vocab)))

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_vocab([["abc", "abd"]], target_size=16)
        vocab.save(tmp_path / "v.txt")
        assert Vocabulary.load(tmp_path / "v.txt").pieces == vocab.pieces


class TestTokenizeWord:
    def test_longest_match_first(self):
        vocab = vocab_from(["a", "aa"])
        assert tokenize_word("aa", vocab) == [vocab.piece_to_id["aa"]]

    def test_unknown_char_maps_to_unk(self):
        vocab = vocab_from(["a"])
        assert tokenize_word("ab", vocab) == [vocab.piece_to_id["a"], UNK_ID]

    def test_empty_word(self):
        assert tokenize_word("", vocab_from(["a"])) == []

    def test_greedy_is_not_optimal(self):
        # greedy takes "ab" then falls back per char; it never backtracks
        vocab = vocab_from(["ab", "a", "bc", "c"])
        ids = tokenize_word("abc", vocab)
        assert ids == [vocab.piece_to_id["ab"], vocab.piece_to_id["c"]]

    def test_tokenize_words_alignment(self):
        vocab = vocab_from(["a", "b", "ab"])
        pieces, word_index, ppw = tokenize_words(["ab", "ba"], vocab)
        assert ppw == [1, 2]
        assert list(word_index) == [0, 1, NO_WORD]


class TestAlignLabels:
    def test_multi_piece_word(self):
        assert align_labels(["B-Disease"], [3]) == ["B-Disease", IGNORE, IGNORE]

    def test_identity_when_single_piece(self):
        assert align_labels(["O", "B-X"], [1, 1]) == ["O", "B-X"]

    def test_mixed(self):
        assert align_labels(["O", "B-X"], [1, 2]) == ["O", "B-X", IGNORE]

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            align_labels(["O"], [1, 1])

    def test_zero_pieces_rejected(self):
        with pytest.raises(LengthMismatch):
            align_labels(["O"], [0])

    @settings(max_examples=100)
    @given(st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=30))
    def test_conservation(self, ppw):
        labels = [f"B-T{i}" for i in range(len(ppw))]
        aligned = align_labels(labels, ppw)
        assert len(aligned) == sum(ppw)
        assert sum(1 for l in aligned if l != IGNORE) == len(ppw)


class TestChunkSequence:
    def test_length_300(self):
        chunks = chunk_sequence(np.arange(300), max_len=256, overlap=50)
        assert [(c.window_start, c.window_start + len(c)) for c in chunks] == [(0, 256), (44, 300)]

    def test_single_window(self):
        chunks = chunk_sequence(np.arange(256), max_len=256, overlap=50)
        assert [(c.window_start, len(c)) for c in chunks] == [(0, 256)]

    def test_length_500(self):
        chunks = chunk_sequence(np.arange(500), max_len=256, overlap=50)
        assert [(c.window_start, c.window_start + len(c)) for c in chunks] == [
            (0, 256), (206, 462), (244, 500)]

    def test_invalid_window(self):
        with pytest.raises(InvalidWindow):
            window_starts(10, max_len=4, overlap=4)
        with pytest.raises(InvalidWindow):
            window_starts(10, max_len=4, overlap=7)

    def test_chunk_contents_are_slices(self):
        ids = np.arange(300)
        widx = np.arange(300) * 10
        chunks = chunk_sequence(ids, 256, 50, word_index=widx)
        for c in chunks:
            np.testing.assert_array_equal(c.piece_ids, ids[c.window_start:c.window_start + len(c)])
            np.testing.assert_array_equal(
                c.word_index_of_piece, widx[c.window_start:c.window_start + len(c)])

    def test_matches_reference_enumerator_all_lengths(self):
        for n in range(1, 1001):
            got = [(s, s + len_) for s, len_ in
                   ((c.window_start, len(c)) for c in chunk_sequence(np.zeros(n, dtype=int)))]
            assert got == reference_windows(n, 256, 50), n

    @settings(max_examples=150)
    @given(st.integers(min_value=1, max_value=2000),
           st.integers(min_value=2, max_value=64),
           st.integers(min_value=0, max_value=63))
    def test_coverage_property(self, n, max_len, overlap):
        if overlap >= max_len:
            overlap = max_len - 1
        covered = np.zeros(n, dtype=bool)
        prev_start = None
        for start in window_starts(n, max_len, overlap):
            stop = min(start + max_len, n)
            covered[start:stop] = True
            if prev_start is not None:
                assert start > prev_start
            prev_start = start
        assert covered.all()


class TestStitch:
    def test_single_window_identity(self):
        assert stitch_predictions([(0, [5, 6, 7])]) == [5, 6, 7]

    def test_agreeing_windows(self):
        out = stitch_predictions([(0, ["a", "b", "c"]), (1, ["b", "c", "d"])])
        assert out == ["a", "b", "c", "d"]

    def test_center_priority_rule(self):
        # windows [0,256) and [44,300): piece 60 sits 60 from window 1's edge
        # but only 16 from window 2's, so window 1 wins there
        w1 = ["one"] * 256
        w2 = ["two"] * 256
        out = stitch_predictions([(0, w1), (44, w2)])
        assert out[60] == "one"
        # deep inside window 2's exclusive zone, window 2 is the only cover
        assert out[299] == "two"
        # crossover: window 1 distance from right edge vs window 2 from left
        # at pos p: w1 dist = 255 - p, w2 dist = p - 44; equal at p = 149.5,
        # so 149 -> w1, 150 -> w2
        assert out[149] == "one"
        assert out[150] == "two"

    def test_tie_goes_to_earlier_window(self):
        # both windows cover [1, 3); distances tie at every shared position
        out = stitch_predictions([(0, ["a", "a", "a"]), (1, ["b", "b", "b"])])
        assert out[1] == "a"
        assert out[2] == "b"  # dist 1 in w2 beats dist 0 in w1

    def test_coverage_gap(self):
        with pytest.raises(CoverageGap):
            stitch_predictions([(0, [1, 2]), (3, [4, 5])])

    def test_unsorted_input(self):
        out = stitch_predictions([(2, ["c", "d"]), (0, ["a", "b"])])
        assert out == ["a", "b", "c", "d"]
