import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddvqa.tokenizer import (BOS, CLS, PAD, SEP, SPECIALS, UNK, Vocabulary, build_vocab, decode,
                             encode, normalize, tokenize)

WORDS = ["the", "skin", "looks", "fake"]


@pytest.fixture
def fixed_vocab():
    # ids 5..8 as in the worked example
    return Vocabulary(list(SPECIALS) + WORDS)


def test_special_ids():
    assert (PAD, CLS, SEP, UNK, BOS) == (0, 1, 2, 3, 4)


def test_tokenize_splits_punctuation():
    assert tokenize("The skin looks FAKE.") == ["the", "skin", "looks", "fake", "."]
    assert tokenize("person's eyes, blurry") == ["person's", "eyes", ",", "blurry"]


def test_build_vocab_contains_words():
    v = build_vocab(["the skin looks fake."])
    assert {"the", "skin", "looks", "fake", "."} <= set(v.id_to_token)
    assert v.id_to_token[:5] == list(SPECIALS)


def test_duplicate_documents_do_not_change_vocab():
    assert build_vocab(["a b b c"]).id_to_token == build_vocab(["a b b c", "a b b c"]).id_to_token


def test_min_count_threshold():
    v = build_vocab(["common rare", "common"], min_count=2)
    assert "rare" not in v
    assert encode("rare", "answer", v) == [CLS, UNK, SEP]


def test_order_frequency_then_lexicographic():
    v = build_vocab(["b a", "a c", "c a"])
    assert v.id_to_token[5:] == ["a", "c", "b"]


def test_empty_corpus_raises():
    with pytest.raises(ValueError):
        build_vocab([])


def test_encode_examples(fixed_vocab):
    assert encode("the skin looks fake", "answer", fixed_vocab) == [1, 5, 6, 7, 8, 2]
    assert encode("", "question", fixed_vocab) == [1, 2]
    assert encode("the zzz", "question", fixed_vocab) == [1, 5, 3, 2]


def test_encode_truncation_keeps_sep(fixed_vocab):
    ids = encode("the skin looks fake the skin", "answer", fixed_vocab, max_len=4)
    assert ids == [CLS, 5, 6, SEP]


def test_encode_unknown_kind(fixed_vocab):
    with pytest.raises(ValueError):
        encode("x", "caption", fixed_vocab)


def test_decode_examples(fixed_vocab):
    assert decode([1, 5, 6, 2], fixed_vocab) == "the skin"
    assert decode([], fixed_vocab) == ""


def test_decode_out_of_range(fixed_vocab):
    with pytest.raises(IndexError):
        decode([9], fixed_vocab)


def test_vocabulary_requires_specials():
    with pytest.raises(ValueError):
        Vocabulary(["the", "skin"])


def test_vocab_save_load_roundtrip(tmp_path, fixed_vocab):
    fixed_vocab.save(tmp_path / "vocab.txt")
    loaded = Vocabulary.load(tmp_path / "vocab.txt")
    assert loaded.id_to_token == fixed_vocab.id_to_token
    assert loaded.digest() == fixed_vocab.digest()
    assert Vocabulary(list(SPECIALS) + ["x"]).digest() != fixed_vocab.digest()


POOL = ["the", "skin", "eyes", "look", "looks", "fake", "real", "because", "blurry", ".", ",",
        "person's", "nose"]


@settings(max_examples=100)
@given(st.lists(st.sampled_from(POOL), max_size=20))
def test_roundtrip_in_vocab(words):
    vocab = build_vocab([" ".join(POOL)])
    text = " ".join(words)
    ids = encode(text, "answer", vocab, max_len=64)
    assert PAD not in ids
    assert decode(ids, vocab) == normalize(text)


@given(st.text(max_size=40))
def test_vocab_build_deterministic(text):
    corpus = [text or "x", "the skin"]
    assert build_vocab(corpus).id_to_token == build_vocab(list(corpus)).id_to_token
