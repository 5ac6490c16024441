import numpy as np
import pytest

from ssmqa.tokenizer import (
    EOS_ID,
    PAD_ID,
    SOS_ID,
    SPECIAL_PIECES,
    UNK_GLYPH,
    UNK_ID,
    Vocab,
    decode,
    encode,
    encode_with_offsets,
    segment_graphemes,
    train_vocab,
)

HINDI_SAMPLE = "नमस्ते दुनिया यह एक परीक्षण है"


class TestSegmentGraphemes:
    def test_single_base(self):
        assert segment_graphemes("क") == ["क"]

    def test_base_plus_dependent_vowel_is_one_cluster(self):
        assert segment_graphemes("कि") == ["कि"]

    def test_ascii(self):
        assert segment_graphemes("ab") == ["a", "b"]

    def test_concatenation_reproduces_input(self):
        for text in ["नमस्ते", "क्षत्रिय", "हिन्दी", "a कि b\nक", HINDI_SAMPLE]:
            assert "".join(segment_graphemes(text)) == text

    def test_virama_conjunct_stays_whole(self):
        # स + virama + त + े is one user-perceived unit
        assert segment_graphemes("नमस्ते") == ["न", "म", "स्ते"]

    def test_crlf_single_cluster(self):
        assert segment_graphemes("a\r\nb") == ["a", "\r\n", "b"]

    def test_lone_surrogate_rejected(self):
        with pytest.raises(ValueError):
            segment_graphemes("a" + "\ud800")

    def test_empty(self):
        assert segment_graphemes("") == []


class TestTrainVocab:
    def test_hand_frequency_example(self):
        vocab = train_vocab("अब अब क", target_size=7)
        assert len(vocab) == 7
        assert vocab.pieces[:4] == list(SPECIAL_PIECES)
        # अब (count 2) sorts before the space marker (count 2) and क (count 1)
        assert vocab.pieces[4] == "अब"
        assert vocab.pieces[6] == "क"

    def test_single_repeated_piece(self):
        vocab = train_vocab("क क क", target_size=16)
        non_special = [p for p in vocab.pieces[4:]]
        assert "क" in non_special
        assert set(non_special) <= {"क", "␣"}

    def test_deterministic_file_bytes(self, tmp_path):
        a, b = tmp_path / "a.vocab", tmp_path / "b.vocab"
        train_vocab(HINDI_SAMPLE, 32).save(a)
        train_vocab(HINDI_SAMPLE, 32).save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train_vocab("   ", 10)

    def test_target_size_too_small_rejected(self):
        with pytest.raises(ValueError):
            train_vocab("क", 4)

    def test_reserved_ids_never_reassigned(self):
        vocab = train_vocab("<unk> <pad> क", target_size=10)
        assert vocab.pieces[:4] == list(SPECIAL_PIECES)
        assert vocab.pieces.count("<unk>") == 1


class TestEncodeDecode:
    def test_round_trip_on_trained_corpus(self):
        vocab = train_vocab(HINDI_SAMPLE, 64)
        assert decode(encode(HINDI_SAMPLE, vocab), vocab) == HINDI_SAMPLE

    def test_round_trip_word(self):
        vocab = train_vocab("नमस्ते " + HINDI_SAMPLE, 64)
        assert decode(encode("नमस्ते", vocab), vocab) == "नमस्ते"

    def test_oov_cluster_becomes_unk(self):
        vocab = train_vocab("अब अब", target_size=8)
        ids = encode("ह", vocab)
        assert ids == [UNK_ID]
        assert decode(ids, vocab) == UNK_GLYPH

    def test_empty_with_bounds(self):
        vocab = train_vocab("क", 8)
        assert encode("", vocab, add_bounds=True) == [SOS_ID, EOS_ID]

    def test_decode_strips_pads(self):
        vocab = train_vocab("क", 8)
        assert decode([PAD_ID, PAD_ID], vocab) == ""

    def test_decode_keeps_specials_when_asked(self):
        vocab = train_vocab("क", 8)
        out = decode([SOS_ID, vocab.id_of("क"), EOS_ID], vocab, strip_specials=False)
        assert out == "<sos>क<eos>"

    def test_decode_out_of_range_rejected(self):
        vocab = train_vocab("क", 8)
        with pytest.raises(ValueError):
            decode([99], vocab)

    def test_greedy_longest_match_inside_oov_word(self):
        # "अबक" is not a piece, but "अब" and "क" are
        vocab = train_vocab("अब अब क", target_size=8)
        ids = encode("अबक", vocab)
        assert [vocab.piece_of(i) for i in ids] == ["अब", "क"]

    def test_no_piece_splits_grapheme_cluster(self):
        vocab = train_vocab(HINDI_SAMPLE, 64)
        for text in HINDI_SAMPLE.split():
            for tid in encode(text, vocab):
                piece = vocab.piece_of(tid)
                if tid > EOS_ID and piece not in ("␣",):
                    # piece must be a concatenation of whole clusters of itself
                    assert "".join(segment_graphemes(piece)) == piece

    def test_length_bound(self):
        vocab = train_vocab(HINDI_SAMPLE, 64)
        for text in [HINDI_SAMPLE, "नमस्ते", "xyz क"]:
            n_clusters = len(segment_graphemes(text))
            assert len(encode(text, vocab, add_bounds=True)) <= n_clusters + 2

    def test_offsets_cover_text(self):
        vocab = train_vocab(HINDI_SAMPLE, 64)
        ids, spans = encode_with_offsets(HINDI_SAMPLE, vocab)
        rebuilt = "".join(HINDI_SAMPLE[s:e] for s, e in spans)
        assert rebuilt == HINDI_SAMPLE

    def test_encode_deterministic(self):
        vocab = train_vocab(HINDI_SAMPLE, 64)
        assert encode(HINDI_SAMPLE, vocab) == encode(HINDI_SAMPLE, vocab)


class TestVocabFile:
    def test_save_load_round_trip(self, tmp_path):
        vocab = train_vocab(HINDI_SAMPLE + " अब", 32)
        path = tmp_path / "v.vocab"
        vocab.save(path)
        loaded = Vocab.load(path)
        assert loaded.pieces == vocab.pieces
        assert loaded.counts == vocab.counts

    def test_file_format_specials_first(self, tmp_path):
        vocab = train_vocab("क ख", 16)
        path = tmp_path / "v.vocab"
        vocab.save(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        for i, expected in enumerate(SPECIAL_PIECES):
            idx, piece, count = lines[i].split("\t")
            assert (int(idx), piece, int(count)) == (i, expected, 0)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "v.vocab"
        path.write_text("0\t<pad>\t0\n5\t<unk>\t0\n", encoding="utf-8")
        with pytest.raises(ValueError):
            Vocab.load(path)
