import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from selfplay_lora import ratings as R
from selfplay_lora.ratings import RatingConfig, RatingState


def reference_update(mu_w, s_w, mu_l, s_l, beta, tau):
    """Closed-form two-player win update, written against scipy's normal."""
    vw, vl = s_w**2 + tau**2, s_l**2 + tau**2
    c = math.sqrt(2 * beta**2 + vw + vl)
    t = (mu_w - mu_l) / c
    v = norm.pdf(t) / norm.cdf(t)
    w = v * (v + t)
    return (mu_w + vw / c * v, mu_l - vl / c * v,
            math.sqrt(vw * (1 - vw / c**2 * w)), math.sqrt(vl * (1 - vl / c**2 * w)))


def test_equal_prior_win_without_dynamics():
    cfg = RatingConfig(tau_dyn=0.0)
    w, l = R.update_ratings(RatingState(), RatingState(), cfg)
    c = math.sqrt(2 * cfg.beta**2 + 2 * cfg.sigma0**2)
    assert c == pytest.approx(13.18, abs=0.01)
    assert norm.pdf(0) / norm.cdf(0) == pytest.approx(0.7979, abs=1e-4)
    assert w.mu - 25 == pytest.approx(4.2, abs=0.05)
    assert w.mu - 25 == pytest.approx(25 - l.mu, abs=1e-12)


def test_matches_reference_with_defaults():
    cfg = R.DEFAULT_RATING
    w, l = R.update_ratings(RatingState(), RatingState(), cfg)
    ref = reference_update(25, cfg.sigma0, 25, cfg.sigma0, cfg.beta, cfg.tau_dyn)
    assert (w.mu, l.mu, w.sigma, l.sigma) == pytest.approx(ref, abs=1e-9)
    assert w.mu - 25 == pytest.approx(4.2055, abs=1e-3)
    assert w.games == l.games == 1


def test_heavy_favourite_small_update():
    w, _ = R.update_ratings(RatingState(45.0, 3.0), RatingState(25.0, 3.0))
    assert 0 < w.mu - 45.0 < 0.5


def test_huge_upset_stays_finite():
    w, l = R.update_ratings(RatingState(0.0, 1.0), RatingState(500.0, 1.0))
    assert math.isfinite(w.mu) and w.mu > 0 and l.mu < 500


@settings(max_examples=300, deadline=None)
@given(mu_w=st.floats(-50, 100), mu_l=st.floats(-50, 100), s_w=st.floats(0.05, 20), s_l=st.floats(0.05, 20))
def test_monotonicity(mu_w, mu_l, s_w, s_l):
    cfg = RatingConfig(tau_dyn=0.0)
    w, l = R.update_ratings(RatingState(mu_w, s_w), RatingState(mu_l, s_l), cfg)
    ref = reference_update(mu_w, s_w, mu_l, s_l, cfg.beta, 0.0)
    assert w.mu >= mu_w and l.mu <= mu_l
    assert 0 < w.sigma <= s_w and 0 < l.sigma <= s_l
    # strict once the update is larger than float resolution at this magnitude
    tiny = 1e-12 * max(1.0, abs(mu_w), abs(mu_l))
    if ref[0] - mu_w > tiny:
        assert w.mu > mu_w and l.mu < mu_l and w.sigma < s_w and l.sigma < s_l
    assert (w.mu, l.mu) == pytest.approx(ref[:2], rel=1e-9, abs=1e-9)


def test_sigma_stays_positive_over_long_sequence():
    g = np.random.default_rng(0)
    pool = [RatingState() for _ in range(8)]
    for _ in range(20_000):
        i, j = g.choice(8, 2, replace=False)
        pool[i], pool[j] = R.update_ratings(pool[i], pool[j])
    assert all(r.sigma > 0 for r in pool)


@pytest.mark.parametrize("rhos,winner", [
    ([0.25], "teacher"), ([0.5], "none"), ([0.75, 0.5], "student"), ([], "student"),
    ([0.0, 0.0, 1.0], "teacher"),
])
def test_decide_outcome(rhos, winner):
    out = R.decide_outcome(rhos)
    assert out.winner_role == winner
    assert out.aggregate_rho == (None if not rhos else pytest.approx(np.mean(rhos)))


def test_predicted_win_prob():
    a, b = RatingState(30, 4), RatingState(22, 6)
    assert R.predicted_win_prob(a, a) == 0.5
    assert R.predicted_win_prob(RatingState(125, 1), RatingState(25, 1)) > 0.999
    assert R.predicted_win_prob(a, b) + R.predicted_win_prob(b, a) == pytest.approx(1, abs=1e-9)
    cfg = R.DEFAULT_RATING
    ref = norm.cdf(8 / math.sqrt(2 * cfg.beta**2 + 16 + 36))
    assert R.predicted_win_prob(a, b) == pytest.approx(ref, abs=1e-12)


def test_pfsp_weights_example():
    # opponents tuned so that p = 0.5 and p = 0.99
    cfg = R.DEFAULT_RATING
    me = RatingState(25, 1)
    denom = math.sqrt(2 * cfg.beta**2 + 2)
    strong = RatingState(25 - norm.ppf(0.99) * denom, 1)
    w = R.pfsp_weights(me, [RatingState(25, 1), strong])
    assert w == pytest.approx([0.25, 0.0099], abs=1e-6)
    assert (w / w.sum())[0] == pytest.approx(0.962, abs=1e-3)


def test_pfsp_sampling():
    g = np.random.default_rng(1)
    assert R.pfsp_sample(RatingState(), [RatingState(90, 1)], g) == 0
    counts = np.bincount([R.pfsp_sample(RatingState(), [RatingState()] * 4, g) for _ in range(10_000)], minlength=4)
    assert np.all(np.abs(counts / 10_000 - 0.25) < 0.03)
    # every weight underflows -> uniform fallback
    far = [RatingState(1e6, 0.1), RatingState(1e6, 0.1)]
    assert R.pfsp_sample(RatingState(0, 0.1), far, g) in (0, 1)
    with pytest.raises(ValueError):
        R.pfsp_sample(RatingState(), [], g)


@settings(max_examples=200, deadline=None)
@given(gap=st.floats(-60, 60).filter(lambda x: abs(x) > 1e-6))
def test_pfsp_weight_peaks_at_even_odds(gap):
    me = RatingState(25, 3)
    w = R.pfsp_weights(me, [RatingState(25, 3), RatingState(25 + gap, 3)])
    assert w[0] == pytest.approx(0.25) and w[1] < w[0]


def test_lcb_rank():
    pool = [RatingState(30, 8), RatingState(25, 1)]
    assert [round(r.lcb(3)) for r in pool] == [6, 22]
    assert R.lcb_rank(pool) == [0, 1]
    assert R.lcb_rank([RatingState()] * 3) == [0, 1, 2]
    assert R.lcb_rank(pool, RatingConfig(lcb_mult=0.0)) == [1, 0]
