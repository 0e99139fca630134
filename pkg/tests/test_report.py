import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slotground.numkit import constant, make_rng
from slotground.report import (FIELDS, HEADS, LocationSpec, Report, ReportPolicy, Violation, actions_from_report,
                               decode_report, init_text_embedding, lcs_length, parse_location, parse_report,
                               render_actions, render_report, rouge_l, text_feature, text_vocab, validate_report)
from slotground.vocab import CONF_BINS, N_CELLS, QUALIFIERS, TYPE_VOCAB

VALID = {"DefectType": "scratch", "DefectLocation": "upper-left edge",
         "Reasoning": "deep linear groove visible", "Confidence": 0.92}


def test_parse_valid_document():
    res = parse_report(json.dumps(VALID))
    assert res.ok
    assert res.report.location == LocationSpec("upper", "left", "edge")
    assert res.report.confidence == 0.92


@pytest.mark.parametrize("doc,expected", [
    ({k: v for k, v in VALID.items() if k != "Confidence"}, Violation("missing", "Confidence")),
    (dict(VALID, DefectLocation="somewhere on it"), Violation("grammar", "DefectLocation")),
    (dict(VALID, Confidence="high"), Violation("type", "Confidence")),
    (dict(VALID, Confidence=True), Violation("type", "Confidence")),
    (dict(VALID, DefectType=3), Violation("type", "DefectType")),
    (dict(VALID, Confidence=1.5), Violation("range", "Confidence")),
])
def test_parse_violations(doc, expected):
    res = parse_report(json.dumps(doc))
    assert not res.ok and expected in res.violations


@pytest.mark.parametrize("text", ["{not json", "[1, 2]", "", None, "null", "3"])
def test_parse_never_raises(text):
    res = parse_report(text)
    assert not res.ok and res.violations


def test_validate_examples():
    r = parse_report(VALID).report
    assert validate_report(r) == (1, [])
    assert validate_report(Report("scratch", "upper-left edge", "x", 1.5)) == (0, [Violation("range", "Confidence")])
    assert validate_report(Report("scratch", "upper-left edge", "", 0.5)) == (0, [Violation("empty", "Reasoning")])
    assert validate_report(Report("scratch", "center", "x", float("nan")))[0] == 0


@pytest.mark.parametrize("text,want", [
    ("center surface", LocationSpec("center", "center", "surface")),
    ("Upper-Left Edge", LocationSpec("upper", "left", "edge")),
    ("lower-right", LocationSpec("lower", "right", None)),
    ("center", LocationSpec("center", "center", None)),
])
def test_location_grammar(text, want):
    assert parse_location(text) == want


@pytest.mark.parametrize("text", ["left-upper", "upper-left rim", "upper left", "", "center surface extra", 7])
def test_location_grammar_rejects(text):
    assert parse_location(text) is None


def test_every_cell_round_trips():
    for cell, q in itertools.product(range(N_CELLS), QUALIFIERS + (None,)):
        loc = LocationSpec.from_cell(cell, q)
        assert parse_location(str(loc)) == loc and loc.cell == cell


valid_reports = st.builds(
    lambda t, cell, q, reason, conf: {"DefectType": t, "DefectLocation": str(LocationSpec.from_cell(cell, q)),
                                      "Reasoning": reason, "Confidence": conf},
    st.sampled_from(TYPE_VOCAB), st.integers(0, N_CELLS - 1), st.sampled_from(QUALIFIERS + (None,)),
    st.text(min_size=1).filter(str.strip), st.floats(0.0, 1.0))


@given(valid_reports)
def test_render_parse_idempotent(doc):
    once = render_report(parse_report(json.dumps(doc)).report)
    twice = render_report(parse_report(once).report)
    assert once == twice and parse_report(once).ok


def test_deleting_any_field_invalidates_500_reports():
    rng = np.random.default_rng(0)
    for _ in range(500):
        doc = {"DefectType": str(rng.choice(TYPE_VOCAB)),
               "DefectLocation": str(LocationSpec.from_cell(int(rng.integers(N_CELLS)), "auto")),
               "Reasoning": "token " * int(rng.integers(1, 5)), "Confidence": float(rng.random())}
        assert parse_report(doc).ok
        for f in FIELDS:
            res = parse_report(json.dumps({k: v for k, v in doc.items() if k != f}))
            assert not res.ok and Violation("missing", f) in res.violations


# ---------------------------------------------------------------- policy

def _peaked_policy(targets, strength=60.0):
    pol = ReportPolicy(feat_width=3)
    p = {}
    for h, v in pol.vocab.items():
        W = np.zeros((v, 4))
        W[targets[h], -1] = strength
        p[f"policy.{h}.W"] = constant(W)
    return pol, p


def test_one_hot_logits_give_fixed_report():
    targets = {"type": TYPE_VOCAB.index("scratch"), "location": 0,
               "confidence": CONF_BINS.index(0.9), "reasoning": TYPE_VOCAB.index("scratch")}
    pol, p = _peaked_policy(targets)
    r, lp = decode_report(pol, p, np.zeros(3), "argmax")
    assert (r.defect_type, r.location.row, r.location.col, r.confidence) == ("scratch", "upper", "left", 0.9)
    assert all(abs(v) < 1e-20 for v in lp.values())
    for seed in range(5):
        assert decode_report(pol, p, np.zeros(3), "sample", seed=seed)[0] == r


def test_uniform_logits_type_log_prob():
    pol = ReportPolicy(feat_width=3)
    p = {f"policy.{h}.W": constant(np.zeros((v, 4))) for h, v in pol.vocab.items()}
    _, lp = decode_report(pol, p, np.ones(3))
    assert lp["type"] == pytest.approx(-np.log(len(TYPE_VOCAB)), abs=1e-15)
    assert lp["confidence"] == pytest.approx(-np.log(len(CONF_BINS)), abs=1e-15)


def test_sampling_is_seeded(rng):
    pol = ReportPolicy(feat_width=4)
    p = pol.init_params(make_rng(3))
    f = rng.normal(size=4)
    assert decode_report(pol, p, f, "sample", seed=11) == decode_report(pol, p, f, "sample", seed=11)
    with pytest.raises(ValueError):
        pol.decode(p, f, "sample")
    with pytest.raises(ValueError):
        pol.decode(p, f, "beam")


def test_width_mismatch():
    pol = ReportPolicy(feat_width=4)
    with pytest.raises(ValueError):
        decode_report(pol, pol.init_params(make_rng(0)), np.zeros(5))


@given(st.integers(0, 10_000))
def test_head_log_probs_match_softmax(seed):
    r = np.random.default_rng(seed)
    pol = ReportPolicy(feat_width=5)
    p = {f"policy.{h}.W": constant(r.normal(0, 3, (v, 6))) for h, v in pol.vocab.items()}
    feats = r.normal(size=(3, 5))
    _, actions, lp = pol.decode(p, feats, "sample", rng=r)
    x = np.concatenate([feats, np.ones((3, 1))], axis=1)
    for i, h in enumerate(HEADS):
        logits = x @ p[f"policy.{h}.W"].data.T
        probs = np.exp(logits - logits.max(1, keepdims=True))
        probs /= probs.sum(1, keepdims=True)
        np.testing.assert_allclose(np.exp(lp[h]), probs[np.arange(3), actions[:, i]], atol=1e-9)


def test_rendered_actions_round_trip():
    for a in itertools.product(range(len(TYPE_VOCAB)), range(N_CELLS), range(len(CONF_BINS)), range(len(TYPE_VOCAB))):
        r = render_actions(a)
        assert parse_report(render_report(r)).report == r
        assert tuple(actions_from_report(r)) == a
        if CONF_BINS[a[2]] <= 1.0:
            assert validate_report(r)[0] == 1


# ---------------------------------------------------------------- text feature

def test_text_feature_single_token():
    emb = init_text_embedding(make_rng(0), 4)
    vocab = text_vocab()
    r = Report("scratch", "", "", 0.5)
    np.testing.assert_array_equal(text_feature(r, emb).data, emb["text.embed"].data[vocab.index("scratch")])


def test_text_feature_oov_and_determinism():
    emb = init_text_embedding(make_rng(0), 4)
    r = Report("zzzqqq", "", "", 0.5)
    np.testing.assert_array_equal(text_feature(r, emb).data, emb["text.embed"].data[-1])
    a = Report("scratch", "center", "groove", 0.5)
    assert np.array_equal(text_feature(a, emb).data, text_feature(a, emb).data)


def test_text_feature_mean_oracle():
    emb = init_text_embedding(make_rng(1), 3)
    vocab = text_vocab()
    E = emb["text.embed"].data
    for t in ("scratch", "dent"):
        r = Report(t, "center surface", "thin groove", 0.5)
        toks = [t, "center", "surface", "thin", "groove"]
        want = np.mean([E[vocab.index(w)] for w in toks], axis=0)
        np.testing.assert_allclose(text_feature(r, emb).data, want, atol=1e-12)
    a = text_feature(Report("scratch", "center", "x", 0.5), emb).data
    b = text_feature(Report("dent", "center", "x", 0.5), emb).data
    assert not np.allclose(a, b)


def test_text_feature_empty_raises():
    with pytest.raises(ValueError):
        text_feature(Report("", "", "", 0.5), init_text_embedding(make_rng(0), 2))


# ---------------------------------------------------------------- rouge

def test_rouge_examples():
    assert rouge_l("crack on surface", "crack on surface") == 1.0
    assert lcs_length("crack on surface".split(), "crack on upper surface".split()) == 3
    assert rouge_l("crack on surface", "crack on upper surface") == pytest.approx(6 / 7, abs=1e-15)
    assert rouge_l("a b c", "d e f") == 0.0
    assert rouge_l("", "a") == 0.0


@given(st.lists(st.sampled_from("abc"), max_size=8), st.lists(st.sampled_from("abc"), max_size=8))
def test_rouge_symmetric_and_bounded(a, b):
    x, y = " ".join(a), " ".join(b)
    assert rouge_l(x, y) == pytest.approx(rouge_l(y, x))
    assert 0.0 <= rouge_l(x, y) <= 1.0
