"""Rewards, group-baseline advantages and the adapter policy-gradient update.

No value network and no KL term: the update direction depends only on the
rollout batch and the current adapter factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, AdapterState, FactorPair

CORRECT = "correct"
WRONG_WELLFORMED = "wrong_wellformed"
MALFORMED = "malformed"

_STUDENT_REWARD = {CORRECT: 1.0, WRONG_WELLFORMED: -0.5, MALFORMED: -1.0}

WHITEN_EPS = 1e-8


def reward_student(verdict: str) -> float:
    try:
        return _STUDENT_REWARD[verdict]
    except KeyError:
        raise ValueError(f"unknown verdict {verdict!r}") from None


def solve_rate(bits) -> float:
    bits = np.asarray(bits, dtype=bool)
    if bits.size == 0:
        raise ValueError("solve rate of an empty rollout set")
    return float(bits.mean())


def reward_teacher(valid: bool, rho: float | None) -> float:
    if not valid:
        return -1.0
    if rho == 0:
        return 0.0
    return 1.0 - rho


@dataclass
class RolloutBatch:
    """Rewards and score-function gradients grouped by prompt.

    ``rewards[i]`` holds the rollout rewards for prompt ``i``; ``grads[i]``
    maps slot name to an array ``(n_i, d_out, d_in)`` of per-rollout
    gradients of ``log pi`` with respect to that slot's effective delta.
    Groups may differ in size when a batch pools prompts from both roles.
    """

    rewards: list[np.ndarray] = field(default_factory=list)
    grads: list[dict[str, np.ndarray]] = field(default_factory=list)
    logps: list[np.ndarray] = field(default_factory=list)

    def add(self, rewards, grads: dict[str, np.ndarray], logps=None):
        rewards = np.asarray(rewards, dtype=np.float64)
        for g in grads.values():
            if g.shape[0] != rewards.size:
                raise ValueError("gradient count does not match reward count")
        self.rewards.append(rewards)
        self.grads.append(grads)
        self.logps.append(np.zeros(rewards.size) if logps is None else np.asarray(logps, float))

    def extend(self, other: "RolloutBatch"):
        self.rewards += other.rewards
        self.grads += other.grads
        self.logps += other.logps

    @property
    def n_samples(self) -> int:
        return int(sum(r.size for r in self.rewards))

    def __len__(self):
        return len(self.rewards)


def compute_advantages(rewards) -> list[np.ndarray]:
    """Centre within each prompt group, then whiten across the whole batch."""
    if isinstance(rewards, RolloutBatch):
        rewards = rewards.rewards
    groups = [np.asarray(r, dtype=np.float64) for r in rewards]
    if not groups:
        return []
    centred = [g - g.mean() if g.size else g for g in groups]
    flat = np.concatenate(centred)
    mean, std = flat.mean(), flat.std()
    return [(c - mean) / (std + WHITEN_EPS) for c in centred]


def delta_gradient(batch: RolloutBatch, adv) -> dict[str, np.ndarray]:
    """Advantage-weighted mean score gradient per slot, w.r.t. the delta."""
    total = batch.n_samples
    out: dict[str, np.ndarray] = {}
    for a, g in zip(adv, batch.grads):
        for slot, arr in g.items():
            contrib = np.tensordot(np.asarray(a, float), arr, axes=(0, 0))
            out[slot] = out[slot] + contrib if slot in out else contrib
    return {k: v / total for k, v in out.items()}


def factor_gradients(adapter: AdapterState, gdelta: dict[str, np.ndarray]) -> dict[str, tuple]:
    """Chain rule through ``delta = scaling * B @ A``: returns ``(dA, dB)`` per slot."""
    out = {}
    s = adapter.scaling
    for slot, G in gdelta.items():
        p = adapter.slots[slot]
        out[slot] = (s * (p.B.T.astype(np.float64) @ G), s * (G @ p.A.T.astype(np.float64)))
    return out


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" | "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def policy_gradient_step(adapter: AdapterState, batch: RolloutBatch, adv, lr: float,
                         opt: OptimizerConfig = OptimizerConfig(),
                         opt_state: AdamState | None = None):
    """One ascent step on the adapter factors.

    Returns ``(new_adapter, new_opt_state, grad_norm)``.  Slots without
    gradient contributions are copied unchanged.
    """
    gdelta = delta_gradient(batch, adv) if batch.n_samples else {}
    fgrads = factor_gradients(adapter, gdelta)
    norm_sq = 0.0
    for dA, dB in fgrads.values():
        if not (np.isfinite(dA).all() and np.isfinite(dB).all()):
            raise FloatingPointError("non-finite policy gradient")
        norm_sq += float((dA ** 2).sum() + (dB ** 2).sum())

    new_state = opt_state
    slots = {}
    if opt.kind == "adamw":
        st = opt_state or AdamState()
        new_state = AdamState(st.step + 1, dict(st.m), dict(st.v))
    for name, pair in adapter.slots.items():
        if name not in fgrads or lr == 0:
            slots[name] = pair.copy()
            continue
        dA, dB = fgrads[name]
        if opt.kind == "sgd":
            A = pair.A + np.float32(lr) * dA.astype(DTYPE)
            B = pair.B + np.float32(lr) * dB.astype(DTYPE)
        elif opt.kind == "adamw":
            t = new_state.step
            upd = []
            for key, theta, g in ((name + ".A", pair.A, dA), (name + ".B", pair.B, dB)):
                m = opt.beta1 * new_state.m.get(key, 0.0) + (1 - opt.beta1) * g
                v = opt.beta2 * new_state.v.get(key, 0.0) + (1 - opt.beta2) * g * g
                new_state.m[key], new_state.v[key] = m, v
                mhat = m / (1 - opt.beta1 ** t)
                vhat = v / (1 - opt.beta2 ** t)
                step = lr * (mhat / (np.sqrt(vhat) + opt.eps) - opt.weight_decay * theta)
                upd.append((theta + step).astype(DTYPE))
            A, B = upd
        else:
            raise ValueError(f"unknown optimizer {opt.kind!r}")
        slots[name] = FactorPair(A, B)
    return AdapterState(slots, adapter.scaling, dict(adapter.provenance)), new_state, float(np.sqrt(norm_sq))


def pg_loss(batch: RolloutBatch, adv) -> float:
    """Surrogate loss ``-mean(adv * log pi)`` for diagnostics."""
    n = batch.n_samples
    if n == 0:
        return 0.0
    return float(-sum(float(np.dot(a, lp)) for a, lp in zip(adv, batch.logps)) / n)
