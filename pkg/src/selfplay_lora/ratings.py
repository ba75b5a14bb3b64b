"""Two-player TrueSkill ratings, match outcomes, PFSP sampling and LCB ranking."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MU0 = 25.0
SIGMA0 = MU0 / 3.0


@dataclass(frozen=True)
class RatingConfig:
    mu0: float = MU0
    sigma0: float = SIGMA0
    beta: float = SIGMA0 / 2.0
    tau_dyn: float = SIGMA0 / 100.0
    lcb_mult: float = 3.0

    def __post_init__(self):
        if min(self.mu0, self.sigma0, self.beta) <= 0 or self.tau_dyn < 0 or self.lcb_mult < 0:
            raise ValueError("rating constants must be positive")


DEFAULT_RATING = RatingConfig()


@dataclass(frozen=True)
class RatingState:
    mu: float = MU0
    sigma: float = SIGMA0
    games: int = 0

    @classmethod
    def prior(cls, cfg: RatingConfig = DEFAULT_RATING) -> "RatingState":
        return cls(cfg.mu0, cfg.sigma0, 0)

    def lcb(self, k: float) -> float:
        return self.mu - k * self.sigma


@dataclass(frozen=True)
class MatchOutcome:
    winner_role: str  # "teacher" | "student" | "none"
    aggregate_rho: float | None


def _pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _v_w(t: float) -> tuple[float, float]:
    denom = _cdf(t)
    # Far in the tail the ratio pdf/cdf tends to -t.
    v = _pdf(t) / denom if denom > 1e-300 else -t
    return v, v * (v + t)


def decide_outcome(rhos) -> MatchOutcome:
    """Win for the teacher if the matched student solved under half on average.

    ``rhos`` holds per-problem solve rates of the valid problems only (or is
    a matchup result exposing ``valid_rhos``).  A matchup with no valid
    problem counts as a student win.
    """
    rhos = list(getattr(rhos, "valid_rhos", rhos))
    if not rhos:
        return MatchOutcome("student", None)
    rho = float(np.mean(rhos))
    if rho < 0.5:
        return MatchOutcome("teacher", rho)
    if rho > 0.5:
        return MatchOutcome("student", rho)
    return MatchOutcome("none", rho)


def update_ratings(winner: RatingState, loser: RatingState,
                   cfg: RatingConfig = DEFAULT_RATING) -> tuple[RatingState, RatingState]:
    tau2 = cfg.tau_dyn ** 2
    var_w = winner.sigma ** 2 + tau2
    var_l = loser.sigma ** 2 + tau2
    c2 = 2.0 * cfg.beta ** 2 + var_w + var_l
    c = math.sqrt(c2)
    t = (winner.mu - loser.mu) / c
    v, w = _v_w(t)
    mu_w = winner.mu + var_w / c * v
    mu_l = loser.mu - var_l / c * v
    s_w = var_w * (1.0 - var_w / c2 * w)
    s_l = var_l * (1.0 - var_l / c2 * w)
    vals = (mu_w, mu_l, s_w, s_l)
    if not all(math.isfinite(x) for x in vals) or s_w <= 0 or s_l <= 0:
        raise FloatingPointError(f"rating update produced invalid values {vals}")
    return (RatingState(mu_w, math.sqrt(s_w), winner.games + 1),
            RatingState(mu_l, math.sqrt(s_l), loser.games + 1))


def predicted_win_prob(a: RatingState, b: RatingState, cfg: RatingConfig = DEFAULT_RATING) -> float:
    denom = math.sqrt(2.0 * cfg.beta ** 2 + a.sigma ** 2 + b.sigma ** 2)
    return _cdf((a.mu - b.mu) / denom)


def pfsp_weights(me: RatingState, pool, cfg: RatingConfig = DEFAULT_RATING) -> np.ndarray:
    p = np.array([predicted_win_prob(me, o, cfg) for o in pool])
    return p * (1.0 - p)


def pfsp_sample(me: RatingState, pool, rng: np.random.Generator,
                cfg: RatingConfig = DEFAULT_RATING) -> int:
    """Sample an opponent index, favouring near-even predicted matchups."""
    pool = list(pool)
    if not pool:
        raise ValueError("empty opponent pool")
    w = pfsp_weights(me, pool, cfg)
    if not (w >= 1e-12).any():
        w = np.ones(len(pool))
    return int(rng.choice(len(pool), p=w / w.sum()))


def lcb_rank(pool, cfg: RatingConfig = DEFAULT_RATING) -> list[int]:
    """Indices sorted worst-first by ``mu - lcb_mult * sigma`` (stable)."""
    scores = [r.mu - cfg.lcb_mult * r.sigma for r in pool]
    return sorted(range(len(scores)), key=lambda i: scores[i])
