import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddvqa.dataset.mining import (TripletIndex, answer_text, mine_image_triplet,
                                  mine_text_triplet)
from ddvqa.dataset.records import canonical_phrase, parse_answer

from helpers import make_record

PHRASES = ["overlapped", "blurry", "Inconsistent  color", "broken", "natural"]
COMPS = ["eyebrows", "skin", "mouth"]


def exhaustive_text(records, i):
    r = records[i]
    pos = [(i, j) for j in range(len(r.answers))]
    neg = [(k, j) for k, s in enumerate(records) for j in range(len(s.answers))
           if s.component == r.component and s.verdict != r.verdict]
    return pos, neg


def exhaustive_image(records, i):
    r = records[i]
    mine = {canonical_phrase(p) for a in r.answers for p in parse_answer(a)[2]}
    pos, neg = set(), set()
    for s in records:
        if s.image_id == r.image_id or s.component != r.component:
            continue
        theirs = {canonical_phrase(p) for a in s.answers for p in parse_answer(a)[2]}
        if mine & theirs:
            pos.add(s.image_id)
        if s.verdict != r.verdict:
            neg.add(s.image_id)
    return sorted(pos), sorted(neg)


@st.composite
def corpora(draw):
    n = draw(st.integers(1, 50))
    out = []
    for k in range(n):
        comp = draw(st.sampled_from(COMPS))
        verdict = draw(st.sampled_from(["real", "fake"]))
        reasons = draw(st.lists(st.sampled_from(PHRASES), min_size=verdict == "fake", max_size=2))
        image = f"im{draw(st.integers(0, 12))}"
        out.append(make_record(image, comp, verdict, reasons,
                               n_answers=draw(st.integers(1, 3))))
    # one record per (image, component), as the dataset builder guarantees
    seen, uniq = set(), []
    for r in out:
        if r.key not in seen:
            seen.add(r.key)
            uniq.append(r)
    return uniq


@settings(max_examples=150, deadline=None)
@given(corpora(), st.integers(0, 2 ** 32 - 1))
def test_indexed_candidates_match_exhaustive_scan(records, seed):
    index = TripletIndex(records)
    rng = np.random.default_rng(seed)
    for i in range(len(records)):
        pos, neg = index.text_candidates(i)
        epos, eneg = exhaustive_text(records, i)
        assert pos == epos
        assert sorted(neg) == sorted(eneg)
        ipos, ineg = index.image_candidates(i)
        assert (ipos, ineg) == exhaustive_image(records, i)

        t = mine_text_triplet(i, index, rng)
        if eneg:
            assert t.positive_ref in epos and t.negative_ref in eneg
            assert records[t.negative_ref[0]].verdict != records[i].verdict
        else:
            assert t is None
        t = mine_image_triplet(i, index, rng)
        if ipos and ineg:
            assert t.positive_ref[0] in ipos and t.negative_ref[0] in ineg
        else:
            assert t is None


def test_text_triplet_example():
    anchor = make_record("a", "eyebrows", "fake", ["overlapped"], n_answers=3)
    other = make_record("b", "eyebrows", "real", ["natural"])
    index = TripletIndex([anchor, other])
    t = mine_text_triplet(0, index, np.random.default_rng(0))
    assert t.modality == "text"
    assert t.positive_ref in [(0, 0), (0, 1), (0, 2)]
    assert t.negative_ref == (1, 0)
    assert "real" in answer_text(index, t.negative_ref)


def test_single_answer_positive_is_anchor():
    index = TripletIndex([make_record("a", "nose", "fake", ["curved"]),
                          make_record("b", "nose", "real", [])])
    t = mine_text_triplet(0, index, np.random.default_rng(0))
    assert t.positive_ref == t.anchor_ref == (0, 0)


def test_no_negative_gives_none():
    index = TripletIndex([make_record("a", "nose", "fake", ["curved"]),
                          make_record("b", "nose", "fake", ["curved"]),
                          make_record("c", "mouth", "real", [])])
    assert mine_text_triplet(0, index, np.random.default_rng(0)) is None


def test_image_triplet_example():
    recs = [make_record("a", "eyebrows", "fake", ["overlapped"]),
            make_record("b", "eyebrows", "fake", ["overlapped", "broken"]),
            make_record("c", "eyebrows", "real", ["natural"])]
    t = mine_image_triplet(0, TripletIndex(recs), np.random.default_rng(0))
    assert t.positive_ref == ("b", "eyebrows")
    assert t.negative_ref == ("c", "eyebrows")


def test_unique_phrase_has_no_positive():
    recs = [make_record("a", "eyebrows", "fake", ["overlapped"]),
            make_record("b", "eyebrows", "fake", ["broken"]),
            make_record("c", "eyebrows", "real", ["natural"])]
    assert mine_image_triplet(0, TripletIndex(recs), np.random.default_rng(0)) is None


def test_phrase_matching_is_canonical():
    recs = [make_record("a", "skin", "fake", ["Inconsistent color"]),
            make_record("b", "skin", "fake", ["inconsistent   color"]),
            make_record("c", "skin", "real", ["smooth"])]
    assert TripletIndex(recs).image_candidates(0)[0] == ["b"]


def test_mining_is_seeded():
    recs = [make_record(f"i{k}", "mouth", v, ["blurry"] if v == "fake" else [])
            for k, v in enumerate(["fake", "real", "real", "real", "fake"])]
    index = TripletIndex(recs)
    a = [mine_text_triplet(0, index, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


@pytest.mark.parametrize("n", [1, 20])
def test_small_corpora_have_consistent_index(n):
    recs = [make_record(f"i{k}", COMPS[k % 3], "fake" if k % 2 else "real",
                        [PHRASES[k % 4]] if k % 2 else []) for k in range(n)]
    index = TripletIndex(recs)
    assert len(index) == n
    for i in range(n):
        assert index.image_candidates(i) == exhaustive_image(recs, i)
