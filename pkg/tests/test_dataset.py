import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddvqa.dataset.annotations import (DROP_CONFLICTING, DROP_GT_MISMATCH, DROP_NO_ANSWERS,
                                       DROP_NO_MAJORITY, RawAnnotation, aggregate_majority,
                                       augment_general_answer, build_records, quality_filter,
                                       read_annotations, write_annotations)
from ddvqa.dataset.records import (ANSWER_RE, COMPONENTS, GENERAL_QUESTION, NOUN, QARecord,
                                   corpus_stats, make_questions, parse_answer, read_image,
                                   read_records, render_answer, split_for, write_image,
                                   write_records)
from ddvqa.dataset.synthetic import (GENERAL_FAKE_PHRASE, SyntheticConfig, generate_raw,
                                     generate_synthetic_corpus)


def anno(verdict, annotator="a0", component="eyebrows", gt="fake", reasons=("overlapped",),
         rating=None, image_id="img"):
    if rating is None and verdict != "skip":
        rating = 4 if verdict == "fake" else 0
    manipulation = "real" if gt == "real" else "Deepfakes"
    return RawAnnotation(image_id, component, annotator, verdict, rating,
                         tuple(reasons) if verdict != "skip" else (), gt, manipulation)


# -- majority vote ------------------------------------------------------------------
def _oracle_majority(verdicts):
    for v in ("fake", "real"):
        if sum(x == v for x in verdicts) >= 2:
            return v
    return None


@pytest.mark.parametrize("combo", list(itertools.product(("real", "fake", "skip"), repeat=3)))
def test_majority_truth_table(combo):
    annos = [anno(v, annotator=f"a{i}", reasons=(f"r{i}",)) for i, v in enumerate(combo)]
    got = aggregate_majority(annos)
    want = _oracle_majority(combo)
    if want is None:
        assert got is None
    else:
        assert got.verdict == want
        agreeing = [i for i, v in enumerate(combo) if v == want]
        assert got.annotators == [f"a{i}" for i in agreeing]
        assert got.explanations == [(f"r{i}",) for i in agreeing]


def test_majority_keeps_reasons_of_agreeing_annotators():
    annos = [anno("fake", "a0", reasons=("overlapped",)), anno("fake", "a1", reasons=("broken",)),
             anno("real", "a2", reasons=("natural",))]
    m = aggregate_majority(annos)
    assert m.verdict == "fake"
    assert m.explanations == [("overlapped",), ("broken",)]


def test_majority_needs_annotations():
    with pytest.raises(ValueError):
        aggregate_majority([])


# -- quality filters ----------------------------------------------------------------
def test_filter_keeps_compliant():
    assert quality_filter([anno("fake", "a0"), anno("fake", "a1")]).keep


def test_filter_drops_unanswered_image():
    annos = [anno("skip", "a0"), anno("skip", "a1")]
    d = quality_filter(annos)
    assert (d.keep, d.reason) == (False, DROP_NO_ANSWERS)


def test_filter_no_answers_is_image_level():
    question = [anno("skip", "a0"), anno("skip", "a1")]
    other = [anno("fake", "a0", component="skin"), anno("fake", "a1", component="skin")]
    # the image has answers elsewhere, so this question falls to the majority rule instead
    assert quality_filter(question, question + other).reason == DROP_NO_MAJORITY


def test_filter_drops_annotator_choosing_both():
    annos = [anno("fake", "a0"), anno("real", "a0"), anno("fake", "a1"), anno("fake", "a2")]
    assert quality_filter(annos).reason == DROP_CONFLICTING


def test_filter_drops_rating_contradicting_verdict():
    annos = [anno("fake", "a0", rating=0), anno("fake", "a1"), anno("fake", "a2")]
    assert quality_filter(annos).reason == DROP_CONFLICTING


def test_filter_drops_gt_mismatch():
    annos = [anno("real", "a0", reasons=()), anno("real", "a1", reasons=())]
    assert quality_filter(annos).reason == DROP_GT_MISMATCH


def test_filter_drops_no_majority():
    assert quality_filter([anno("fake", "a0"), anno("real", "a1")]).reason == DROP_NO_MAJORITY


def test_raw_annotation_invariants():
    with pytest.raises(ValueError):
        RawAnnotation("x", "eyes", "a0", "fake", 4, (), "real", "Deepfakes")
    with pytest.raises(ValueError):
        RawAnnotation("x", "ears", "a0", "fake", 4, (), "fake", "Deepfakes")
    with pytest.raises(ValueError):
        RawAnnotation("x", "eyes", "a0", "fake", 6, (), "fake", "Deepfakes")
    assert not anno("real", rating=3).rating_consistent
    assert anno("fake", rating=2).rating_consistent


def test_build_records_drop_log():
    annos = [anno("fake", f"a{i}", image_id="good") for i in range(3)]
    annos += [anno("real", f"a{i}", image_id="bad", reasons=()) for i in range(3)]
    annos += [anno("skip", f"a{i}", image_id="empty") for i in range(3)]
    records, drops = build_records(annos, np.random.default_rng(0))
    assert [r.image_id for r in records] == ["good"]
    assert records[0].answers == ["The eyebrows look fake because eyebrows look overlapped."] * 3
    assert {(d.image_id, d.reason) for d in drops} == {("bad", DROP_GT_MISMATCH),
                                                       ("empty", DROP_NO_ANSWERS)}


def test_build_records_general_answer_borrows_fine_reasons():
    annos = []
    for i in range(2):
        annos.append(anno("fake", f"a{i}", component="whole_face",
                          reasons=(GENERAL_FAKE_PHRASE,), image_id="x"))
        annos.append(anno("fake", f"a{i}", component="mouth", reasons=("blurry",), image_id="x"))
    records, _ = build_records(annos, np.random.default_rng(0))
    general = records[0]
    assert general.component == "whole_face"
    assert general.question == GENERAL_QUESTION
    assert general.answers[0] == ("The image looks fake because image looks "
                                  "obvious manipulated region, blurry mouth.")


# -- templates ----------------------------------------------------------------------
def test_render_answer_examples():
    assert (render_answer("eyebrows", "fake", ["overlapped"])
            == "The eyebrows look fake because eyebrows look overlapped.")
    assert render_answer("skin", "real", ["smooth"]) == "The skin looks real because skin looks smooth."
    assert (render_answer("skin", "fake", ["blurry", "inconsistent color"])
            == "The skin looks fake because skin looks blurry, inconsistent color.")
    assert render_answer("whole_face", "real", []) == "The image looks real."


def test_render_answer_fake_needs_reason():
    with pytest.raises(ValueError):
        render_answer("nose", "fake", [])
    with pytest.raises(ValueError):
        render_answer("nose", "fake", ["  ", ","])


def test_render_answer_strength_is_optional():
    assert render_answer("skin", "fake", ["blurry"], strength="very").startswith("The skin looks very fake")


@given(st.sampled_from(COMPONENTS), st.sampled_from(["real", "fake"]),
       st.lists(st.text(alphabet="abcdefg ", min_size=1, max_size=12), min_size=1, max_size=3))
def test_rendered_answers_follow_grammar(component, verdict, reasons):
    if not any(r.strip() for r in reasons):
        return
    ans = render_answer(component, verdict, reasons)
    assert ANSWER_RE.match(ans)
    noun, v, parsed = parse_answer(ans)
    assert (noun, v) == (NOUN[component], verdict)
    assert parsed == [" ".join(r.split()) for r in reasons if r.strip()]


def test_make_questions_counts():
    assert len(make_questions("x", {"eyebrows"})) == 2
    assert len(make_questions("x", set(COMPONENTS[1:]))) == 6
    assert make_questions("x", set()) == [(GENERAL_QUESTION, "whole_face")]
    with pytest.raises(ValueError):
        make_questions("x", {"ears"})


def test_augment_appends_both_fine_reasons():
    out = augment_general_answer("fake", ["obvious manipulated region"],
                                 ["overlapped eyebrows", "blurry mouth"], np.random.default_rng(0))
    assert out == ("The image looks fake because image looks obvious manipulated region, "
                   "blurry mouth, overlapped eyebrows.")


def test_augment_without_fine_reasons_is_unchanged():
    out = augment_general_answer("fake", ["obvious manipulated region"], [], np.random.default_rng(0))
    assert out == render_answer("whole_face", "fake", ["obvious manipulated region"])


def test_augment_picks_two_reproducibly():
    fine = ["a eyes", "b nose", "c mouth"]
    a = augment_general_answer("fake", ["x"], fine, np.random.default_rng(4))
    b = augment_general_answer("fake", ["x"], fine, np.random.default_rng(4))
    assert a == b
    assert len(parse_answer(a)[2]) == 3


# -- records and I/O ----------------------------------------------------------------
def test_record_roundtrip(tmp_path):
    recs = [QARecord("a", GENERAL_QUESTION, "whole_face", ["The image looks real."], "real", "train")]
    write_records(tmp_path / "qa.jsonl", recs)
    assert read_records(tmp_path / "qa.jsonl") == recs


def test_record_rejects_extra_fields(tmp_path):
    p = tmp_path / "qa.jsonl"
    p.write_text('{"image_id": "a"}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_records(p)


def test_record_invariants():
    with pytest.raises(ValueError):
        QARecord("a", GENERAL_QUESTION, "whole_face", [], "real", "train")
    with pytest.raises(ValueError):
        QARecord("a", GENERAL_QUESTION, "whole_face", ["x"], "maybe", "train")


def test_image_roundtrip(tmp_path):
    px = np.random.default_rng(0).random((4, 5, 3)).astype(np.float32).astype(np.float64)
    write_image(tmp_path / "x.img", px)
    raw = (tmp_path / "x.img").read_bytes()
    assert raw[:12] == (4).to_bytes(4, "little") + (5).to_bytes(4, "little") + (3).to_bytes(4, "little")
    np.testing.assert_array_equal(read_image(tmp_path / "x.img"), px)


def test_image_size_mismatch(tmp_path):
    write_image(tmp_path / "x.img", np.zeros((2, 2, 3)))
    p = tmp_path / "x.img"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_image(p)


def test_annotation_roundtrip(tmp_path):
    annos = [anno("fake", "a0"), anno("skip", "a1")]
    write_annotations(tmp_path / "raw.jsonl", annos)
    assert read_annotations(tmp_path / "raw.jsonl") == annos


def test_split_is_deterministic_and_by_image():
    ids = [f"img{i}" for i in range(2000)]
    splits = [split_for(i) for i in ids]
    assert splits == [split_for(i) for i in ids]
    frac = splits.count("test") / len(ids)
    assert 0.07 < frac < 0.13


# -- synthetic corpus ---------------------------------------------------------------
@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic_corpus(SyntheticConfig(n_images=60), seed=7)


def test_synthetic_deterministic(synthetic):
    recs, imgs = generate_synthetic_corpus(SyntheticConfig(n_images=60), seed=7)
    assert recs == synthetic[0]
    for a, b in zip(imgs, synthetic[1]):
        assert a.image_id == b.image_id
        np.testing.assert_array_equal(a.pixels, b.pixels)


def test_synthetic_pixels_in_range(synthetic):
    for im in synthetic[1]:
        assert im.pixels.shape == (64, 64, 3)
        assert im.pixels.min() >= 0.0 and im.pixels.max() <= 1.0


def test_synthetic_answers_follow_grammar(synthetic):
    for r in synthetic[0]:
        for a in r.answers:
            assert ANSWER_RE.match(a), a
            assert parse_answer(a)[1] == r.verdict


def test_synthetic_reasons_are_planted(synthetic):
    planted = {im.image_id: im.planted_artifacts for im in synthetic[1]}
    for r in synthetic[0]:
        if r.verdict != "fake":
            continue
        pairs = planted[r.image_id]
        if r.component == "whole_face":
            allowed = {GENERAL_FAKE_PHRASE} | {f"{p} {NOUN[c]}" for c, p in pairs if c != "whole_face"}
        else:
            allowed = {p for c, p in pairs if c == r.component}
        assert set(r.reasons()) <= allowed


def test_synthetic_no_verdict_contradicts_ground_truth(synthetic):
    for r in synthetic[0]:
        assert r.verdict == ("real" if r.manipulation == "real" else "fake")


def test_synthetic_fake_fraction_binomial():
    images, _, _ = generate_raw(SyntheticConfig(n_images=100, p_fake=0.5), seed=3)
    n_fake = sum(bool(im.planted_artifacts) for im in images)
    # two-sided 99% bounds of Binomial(100, 0.5)
    cdf, lo = 0.0, None
    for k in range(101):
        cdf += math.comb(100, k) / 2 ** 100
        if lo is None and cdf > 0.005:
            lo = k
    hi = 100 - lo
    assert lo <= n_fake <= hi


def test_corpus_stats_sum_to_total(synthetic):
    recs = synthetic[0]
    stats = corpus_stats(recs)
    assert stats["n_pairs"] == len(recs)
    for key in ("by_manipulation", "by_component", "by_split", "by_verdict"):
        assert sum(stats[key].values()) == len(recs)
