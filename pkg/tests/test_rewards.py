import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slotground.grounding import MaskPair
from slotground.numkit import REGISTRY, check_grad, constant, param, value_and_grad
from slotground.report import HEADS, Report, ReportPolicy, lora_apply
from slotground.rewards import (HttpEntailmentScorer, RewardBreakdown, RolloutGroup, RuleScorer, ScorerUnavailable,
                                categorical_kl, clipped_surrogate, grpo_loss, group_normalize, policy_kl,
                                reward_consistency, reward_format, reward_grounding, score_report, total_reward)

VALID = Report("scratch", "upper-left edge", "deep linear groove visible", 0.92)


def test_reward_format():
    assert reward_format(VALID) == 1
    assert reward_format(Report("scratch", "upper-left edge", "x", 1.2)) == 0
    assert reward_format(None) == 0


def test_reward_grounding_examples(rng):
    m = rng.random((6, 6))
    b = (m > 0.5).astype(float)
    assert reward_grounding(b, b) == 1.0
    # a soft map only reaches 1 against itself once it is binary
    assert reward_grounding(m, m) < 1.0
    a = np.zeros((32, 32))
    c = np.zeros((32, 32))
    a[:16] = 1.0
    c[16:] = 1.0
    assert reward_grounding(a, c) == pytest.approx(1.0 / (a.sum() + c.sum() + 1.0), abs=1e-15)
    want = (2 * np.sum(m * 0.5 * m) + 1.0) / (m.sum() + 0.5 * m.sum() + 1.0)
    assert reward_grounding(m, 0.5 * m) == pytest.approx(want, abs=1e-12)


def test_reward_grounding_upsamples_and_checks_shape():
    assert reward_grounding(np.ones((4, 4)), np.ones((8, 8))) == 1.0
    with pytest.raises(ValueError):
        reward_grounding(np.ones((2, 4, 4)), np.ones((2, 8, 8)))


@pytest.mark.parametrize("reasoning,dtype,want", [
    ("deep linear groove and scratch marks", "scratch", 1.0),
    ("clear scratch visible along the edge", "None", 0.0),
    ("a scratch next to a dent", "dent", 0.5),
    ("uniform texture", "None", 1.0),
    ("uniform texture", "dent", 0.0),
])
def test_rule_scorer(reasoning, dtype, want):
    assert reward_consistency(Report(dtype, "center", reasoning, 0.5), RuleScorer()) == want


def test_total_reward_examples():
    assert total_reward(RewardBreakdown(1, 1.0, 1.0)) == pytest.approx(1.0, abs=1e-15)
    assert RewardBreakdown(1, 0.5, 1.0, (0.4, 0.3, 0.3)).total == pytest.approx(0.85, abs=1e-15)
    assert RewardBreakdown(0, 0.0, 0.0).total == 0.0
    with pytest.raises(ValueError):
        RewardBreakdown(1, 1.0, 1.0, (0.5, -0.1, 0.6))


@given(st.integers(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
       st.tuples(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5)))
def test_total_reward_monotone(rf, rg, rc, bump, w):
    base = RewardBreakdown(rf, rg, rc, w).total
    assert RewardBreakdown(1, rg, rc, w).total >= base
    assert RewardBreakdown(rf, min(rg + bump, 1.0), rc, w).total >= base
    assert RewardBreakdown(rf, rg, min(rc + bump, 1.0), w).total >= base


def test_score_report_uses_gt_mask():
    pair = MaskPair(np.zeros((4, 4)), np.ones((4, 4)))
    assert score_report(VALID, pair, gt_mask=np.ones((4, 4))).r_g == 1.0
    assert score_report(VALID, pair).r_g < 0.1


# ---------------------------------------------------------------- advantages

def test_group_normalize_examples():
    assert np.all(group_normalize([0.7] * 4) == 0.0)
    np.testing.assert_allclose(group_normalize([1, 2, 3, 4], 0.0), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)
    with pytest.raises(ValueError):
        group_normalize([1.0])


@given(st.sampled_from([2, 4, 8]).flatmap(lambda g: st.lists(st.integers(-64, 64), min_size=g, max_size=g)),
       st.integers(-100, 100))
def test_shift_invariance_exact(ints, c):
    # exact when the shift and the group mean add without rounding
    r = np.asarray(ints, float) / 8.0
    assert np.array_equal(group_normalize(r + c), group_normalize(r))


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.integers(-6, 6))
def test_scale_invariance_without_eps(r, k):
    r = np.asarray(r)
    if r.std() == 0.0:
        return
    lam = 2.0 ** k
    assert np.array_equal(group_normalize(r * lam, 0.0), group_normalize(r, 0.0))


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.floats(0.1, 10))
def test_scale_invariance_with_eps(r, lam):
    r = np.asarray(r)
    sigma = r.std()
    if sigma < 1e-3:
        return
    eps = 1e-3
    a, b = group_normalize(r * lam, eps), group_normalize(r, eps)
    bound = np.abs(group_normalize(r, 0.0)) * eps / min(sigma, lam * sigma)
    assert np.all(np.abs(a - b) <= bound + 1e-12)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16))
def test_advantages_zero_mean(r):
    if np.std(r) < 1e-6:
        return
    assert abs(group_normalize(r, 0.0).mean()) < 1e-9


# ---------------------------------------------------------------- objective

def test_kl_of_identical_distributions_is_zero(rng):
    lp = rng.normal(size=(3, 5))
    lp -= np.log(np.exp(lp).sum(1, keepdims=True))
    assert categorical_kl(constant(lp), lp).item() == 0.0
    d = {h: constant(lp) for h in HEADS}
    assert policy_kl(d, {h: lp for h in HEADS}).item() == 0.0


def test_kl_matches_direct_sum():
    p, q = np.array([0.7, 0.2, 0.1]), np.array([0.2, 0.5, 0.3])
    want = float(np.sum(p * np.log(p / q)))
    assert categorical_kl(constant(np.log(p)), np.log(q)).item() == pytest.approx(want, abs=1e-15)


def test_clip_arithmetic():
    s = clipped_surrogate(constant(np.array([np.log(2.0)])), np.array([0.0]), np.array([1.0]))
    assert s.item() == pytest.approx(1.2, abs=1e-15)
    s = clipped_surrogate(constant(np.array([np.log(0.5)])), np.array([0.0]), np.array([-1.0]))
    assert s.item() == pytest.approx(-0.8, abs=1e-15)
    with pytest.raises(FloatingPointError):
        clipped_surrogate(constant(np.array([800.0])), np.array([0.0]), np.array([1.0]))


def _group(rng, G=4, adv=None):
    pol = ReportPolicy(feat_width=3)
    p = pol.init_params(rng)
    lp = pol.log_probs(p, rng.normal(size=3))
    arrays = {h: v.data for h, v in lp.items()}
    actions = np.stack([rng.integers(0, pol.vocab[h], G) for h in HEADS], axis=-1)
    return RolloutGroup([], actions, lp, arrays, arrays, advantages=adv)


def test_grpo_identity_policies(rng):
    assert grpo_loss(_group(rng, adv=np.zeros(4))).item() == 0.0
    adv = group_normalize(rng.random(4))
    assert abs(grpo_loss(_group(rng, adv=adv)).item()) < 1e-12
    with pytest.raises(ValueError):
        grpo_loss(_group(rng))


def test_lora_apply_examples():
    base = constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = lora_apply(base, np.array([[1.0], [0.0]]), np.array([[0.0, 2.0]]), 1.0)
    np.testing.assert_array_equal(out.data - base.data, [[0.0, 2.0], [0.0, 0.0]])
    assert np.array_equal(lora_apply(base, np.zeros((2, 1)), np.ones((1, 2)), 1.0).data, base.data)
    with pytest.raises(ValueError):
        lora_apply(base, np.zeros((3, 1)), np.ones((1, 2)), 1.0)


def test_lora_gradient_leaves_base_frozen(rng):
    base, A, B = param(rng.normal(size=(3, 4))), param(rng.normal(size=(3, 2))), param(rng.normal(size=(2, 4)))
    x = rng.normal(size=4)

    def f(q):
        W = lora_apply(q["base"], q["A"], q["B"], 0.5)
        return (W * W).sum() + (W * constant(np.tile(x, (3, 1)))).sum()
    p = {"base": base, "A": A, "B": B}
    assert check_grad(f, p, ["A", "B"]).ok
    frozen = {"base": constant(base.data), "A": A, "B": B}
    _, g = value_and_grad(f, frozen)
    assert "base" not in g or not np.any(g["base"])


def test_grpo_gradient():
    f, p, names = REGISTRY["grpo_surrogate"]()
    assert check_grad(f, p, names).ok


# ---------------------------------------------------------------- HTTP scorer

class _Handler(BaseHTTPRequestHandler):
    reply = {"entail": 0.8}
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append(body)
        out = json.dumps(type(self).reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def service():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    _Handler.seen.clear()
    _Handler.reply = {"entail": 0.8}
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


def test_http_scorer_round_trip(service):
    s = HttpEntailmentScorer(service)
    assert s.score("groove along the edge", "scratch") == 0.8
    assert _Handler.seen[-1] == {"premise": "groove along the edge", "hypothesis": "the defect is a scratch"}
    assert s.fallback_count == 0


def test_http_scorer_bad_payload_falls_back(service):
    _Handler.reply = {"entail": 3.0}
    s = HttpEntailmentScorer(service, retries=1, backoff=0.0, fallback=RuleScorer())
    assert s.score("clear scratch visible", "None") == 0.0
    assert s.fallback_count == 1 and len(_Handler.seen) == 2


def test_http_scorer_unreachable():
    s = HttpEntailmentScorer("http://127.0.0.1:9", timeout=0.2, retries=0, backoff=0.0)
    with pytest.raises(ScorerUnavailable):
        s.score("x", "dent")
    s = HttpEntailmentScorer("http://127.0.0.1:9", timeout=0.2, retries=0, backoff=0.0, fallback=RuleScorer())
    assert s.score("a dent", "dent") == 1.0 and s.fallback_count == 1
