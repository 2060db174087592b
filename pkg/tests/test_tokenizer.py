import numpy as np
import pytest

from motor.tokenizer import SPECIALS, Tokenizer, normalize_words

WORDS = ["no", "finding", "lung", "effusion", "heart", "is", "clear"]


@pytest.fixture()
def tok():
    return Tokenizer(WORDS, max_text_len=10)


def test_special_ids_distinct(tok):
    ids = [tok.pad_id, tok.cls_id, tok.encode_id, tok.bos_id, tok.eos_id,
           tok.unk_id, tok.sep_id]
    assert len(set(ids)) == len(ids)
    assert tok.vocab[:len(SPECIALS)] == list(SPECIALS)


def test_encode_cls_prepends_cls(tok):
    ids = tok.encode("no finding", "encode_cls")
    assert ids[0] == tok.cls_id
    assert ids[1:3] == tok.word_ids(["no", "finding"])
    assert ids[3:] == [tok.pad_id] * 7
    assert len(ids) == 10


def test_encode_match_differs_only_at_position_zero(tok):
    a = tok.encode("no finding", "encode_cls")
    b = tok.encode("no finding", "encode_match")
    assert b[0] == tok.encode_id
    assert a[1:] == b[1:]


def test_decode_mode_roundtrip_strips_specials(tok):
    rng = np.random.default_rng(0)
    for _ in range(25):
        words = [WORDS[i] for i in rng.integers(0, len(WORDS), size=rng.integers(1, 8))]
        text = " ".join(words)
        ids = tok.encode(text, "decode")
        assert ids[0] == tok.bos_id
        assert tok.eos_id in ids
        assert tok.decode(ids) == text


def test_decode_mode_keeps_eos_when_truncating(tok):
    ids = tok.encode(" ".join(["lung"] * 30), "decode")
    assert len(ids) == 10
    assert ids[0] == tok.bos_id and ids[-1] == tok.eos_id


def test_unknown_words_become_unk(tok):
    ids = tok.encode("zzz finding", "encode_cls")
    assert ids[1] == tok.unk_id


def test_truncation_and_padding_fixed_length(tok):
    assert len(tok.encode("", "encode_cls")) == 10
    assert len(tok.encode(" ".join(["no"] * 40), "encode_cls")) == 10


def test_bad_mode_rejected(tok):
    with pytest.raises(ValueError):
        tok.encode("no", "bogus")


def test_normalize_strips_punctuation_and_case():
    assert normalize_words("Effusion.  Effusion,") == ["effusion", "effusion"]


def test_build_is_deterministic():
    texts = ["b a", "c a"]
    t1 = Tokenizer.build(texts, max_text_len=8)
    t2 = Tokenizer.build(reversed(texts), max_text_len=8)
    assert t1.vocab == t2.vocab
