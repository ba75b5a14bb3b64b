"""Weight-space mutation and crossover operators for low-rank adapters.

Each operator takes one or two parents with identical slot layout and
returns a new adapter of the same rank and shapes.  Nothing here retrains;
children are produced directly from the factor tensors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import rng as rngmod
from .tensor import (
    DTYPE,
    AdapterState,
    FactorPair,
    ShapeError,
    SvdTriple,
    check_compatible,
    refactor_balanced,
    svd_of_delta,
    tensor_std,
)

MUTATIONS = (
    "m1_svd", "m2_layer_gauss", "m3_component_mask",
    "m4_full_gauss", "m5_neftune", "m6_rank_perturb",
)
CROSSOVERS = (
    "x1_dare", "x2_layerwise", "x3_svd_subspace", "x4_extrapolative", "x5_linear",
    "x6_ties", "x7_della", "x8_slerp", "x9_fisher",
)
CONTROLS = ("copy_parent", "linear_0_5")
ALL_OPERATORS = MUTATIONS + ("copy_parent",) + CROSSOVERS + ("linear_0_5",)
# The subset that runs inside the live population loop.
LIVE_OPERATORS = (
    "m1_svd", "m2_layer_gauss", "m3_component_mask", "m4_full_gauss",
    "x1_dare", "x2_layerwise", "x3_svd_subspace", "x4_extrapolative",
)
DETERMINISTIC = ("copy_parent", "x5_linear", "x6_ties", "x8_slerp", "x9_fisher", "linear_0_5")


class UnknownOperatorError(KeyError):
    pass


class ArityError(ValueError):
    pass


@dataclass(frozen=True)
class OperatorParams:
    m1_eps: float = 0.1
    m2_eps: float = 0.1
    m2_frac: float = 0.33
    m3_rho: float = 0.3
    m4_eps: float = 0.15
    neft_alpha: float = 10.0
    rank_k: int = 2
    rank_sigma: float = 0.05
    dare_p: float = 0.7
    ties_tau: float = 0.2
    della_eps: float = 0.1
    slerp_t: float = 0.5
    eta_min: float = 1.0
    eta_max: float = 1.5
    lin_alpha: float = 0.5
    x3_k: int | None = None

    def __post_init__(self):
        for name in ("m2_frac", "m3_rho", "dare_p", "ties_tau", "della_eps", "slerp_t", "lin_alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not self.eta_max >= self.eta_min >= 0:
            raise ValueError("need eta_max >= eta_min >= 0")
        if self.rank_k < 0 or self.rank_sigma < 0:
            raise ValueError("rank_k and rank_sigma must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown operator params: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_PARAMS = OperatorParams()


def ceil_frac(frac: float, n: int) -> int:
    """``ceil(frac * n)`` that ignores float fuzz such as 0.3 * 10 = 3.0000000000000004."""
    return int(math.ceil(frac * n - 1e-9))


def _gauss_like(t: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    if scale == 0.0:
        return t.copy()
    return (t + rng.normal(0.0, scale, size=t.shape)).astype(DTYPE)


def _map_slots(parent: AdapterState, fn) -> AdapterState:
    return AdapterState({k: fn(k, p) for k, p in parent.slots.items()}, parent.scaling)


def _map_pairs(p1: AdapterState, p2: AdapterState, fn) -> AdapterState:
    """Apply ``fn(t1, t2)`` to corresponding A and B tensors."""
    check_compatible(p1, p2)
    out = {}
    for name, a in p1.slots.items():
        b = p2.slots[name]
        out[name] = FactorPair(fn(a.A, b.A).astype(DTYPE), fn(a.B, b.B).astype(DTYPE))
    return AdapterState(out, p1.scaling)


def _sorted_triple(U, S, V) -> SvdTriple:
    order = np.argsort(-S, kind="stable")
    return SvdTriple(U[:, order], S[order].astype(DTYPE), V[:, order])


# --- mutations ---------------------------------------------------------------

def m1_svd(parent: AdapterState, params: OperatorParams, rng: np.random.Generator) -> AdapterState:
    eps = params.m1_eps
    r = parent.rank

    def mutate(_, pair):
        t = svd_of_delta(pair)
        z = rng.standard_normal(r)
        S = (t.S * np.exp(eps * z)).astype(DTYPE)
        rots = []
        for _side in range(2):
            M = rng.standard_normal((r, r))
            K = (M - M.T) / 2.0
            rots.append((np.eye(r) + eps * K).astype(DTYPE))
        U = t.U @ rots[0]
        V = t.V @ rots[1]
        return refactor_balanced(_sorted_triple(U, S, V))

    return _map_slots(parent, mutate)


def m2_layer_gauss(parent: AdapterState, params: OperatorParams, rng: np.random.Generator) -> AdapterState:
    names = list(parent.slots)
    n_pick = ceil_frac(params.m2_frac, len(names))
    picked = set(rng.choice(len(names), size=n_pick, replace=False).tolist()) if n_pick else set()
    out = {}
    for i, name in enumerate(names):
        pair = parent.slots[name]
        if i in picked:
            A = _gauss_like(pair.A, params.m2_eps * tensor_std(pair.A), rng)
            B = _gauss_like(pair.B, params.m2_eps * tensor_std(pair.B), rng)
            out[name] = FactorPair(A, B)
        else:
            out[name] = pair.copy()
    return AdapterState(out, parent.scaling)


def m3_component_mask(parent: AdapterState, params: OperatorParams, rng: np.random.Generator) -> AdapterState:
    r = parent.rank
    n_zero = min(r, ceil_frac(params.m3_rho, r))

    def mutate(_, pair):
        t = svd_of_delta(pair)
        S = t.S.copy()
        if n_zero:
            S[rng.choice(r, size=n_zero, replace=False)] = 0
        return refactor_balanced(_sorted_triple(t.U, S, t.V))

    return _map_slots(parent, mutate)


def m4_full_gauss(parent: AdapterState, params: OperatorParams, rng: np.random.Generator) -> AdapterState:
    eps = params.m4_eps
    return _map_slots(parent, lambda _, p: FactorPair(
        _gauss_like(p.A, eps * tensor_std(p.A), rng),
        _gauss_like(p.B, eps * tensor_std(p.B), rng),
    ))


def m5_neftune(parent: AdapterState, params: OperatorParams, rng: np.random.Generator) -> AdapterState:
    def mutate(_, pair):
        L, d = pair.A.shape
        bound = params.neft_alpha / math.sqrt(L * d)
        if bound == 0.0:
            return pair.copy()
        noise = rng.uniform(-bound, bound, size=pair.A.shape)
        return FactorPair((pair.A + noise).astype(DTYPE), pair.B.copy())

    return _map_slots(parent, mutate)


def m6_rank_perturb(parent: AdapterState, params: OperatorParams, rng: np.random.Generator) -> AdapterState:
    r = parent.rank
    k = min(params.rank_k, r)

    def mutate(_, pair):
        t = svd_of_delta(pair)
        S = t.S.astype(np.float64)
        S[r - k:] = 0.0
        S[:r - k] *= rng.normal(1.0, params.rank_sigma, size=r - k)
        # A draw below zero flips the direction's sign; keep magnitudes.
        return refactor_balanced(_sorted_triple(t.U, np.abs(S).astype(DTYPE), t.V))

    return _map_slots(parent, mutate)


def copy_parent(parent: AdapterState) -> AdapterState:
    return AdapterState({k: p.copy() for k, p in parent.slots.items()}, parent.scaling)


# --- crossovers --------------------------------------------------------------

def _dare(t: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if p >= 1.0:
        rng.random(t.shape)  # keep the draw count independent of p
        return np.zeros_like(t)
    keep = rng.random(t.shape) >= p
    return np.where(keep, t / np.float32(1.0 - p), np.float32(0)).astype(DTYPE)


def x1_dare(p1: AdapterState, p2: AdapterState, params: OperatorParams,
            rng: np.random.Generator) -> AdapterState:
    p = params.dare_p
    return _map_pairs(p1, p2, lambda a, b: (_dare(a, p, rng) + _dare(b, p, rng)) / np.float32(2))


def x2_layerwise(p1: AdapterState, p2: AdapterState, rng: np.random.Generator) -> AdapterState:
    check_compatible(p1, p2)
    out = {}
    for name in p1.slots:
        src = p1 if rng.random() < 0.5 else p2
        out[name] = src.slots[name].copy()
    return AdapterState(out, p1.scaling)


def x3_svd_subspace(p1: AdapterState, p2: AdapterState, params: OperatorParams,
                    rng: np.random.Generator) -> AdapterState:
    check_compatible(p1, p2)
    r = p1.rank
    out = {}
    for name, a in p1.slots.items():
        t1, t2 = svd_of_delta(a), svd_of_delta(p2.slots[name])
        if params.x3_k is not None:
            k = max(0, min(r, params.x3_k))
        elif r >= 2:
            k = int(rng.integers(1, r))
        else:
            k = int(rng.integers(0, 2))
        U = np.concatenate([t1.U[:, :k], t2.U[:, k:]], axis=1)
        S = np.concatenate([t1.S[:k], t2.S[k:]])
        V = np.concatenate([t1.V[:, :k], t2.V[:, k:]], axis=1)
        out[name] = refactor_balanced(SvdTriple(U, S, V))
    return AdapterState(out, p1.scaling)


def x4_extrapolative(p1: AdapterState, p2: AdapterState, params: OperatorParams,
                     rng: np.random.Generator, eta: float | None = None) -> AdapterState:
    if eta is None:
        eta = float(rng.uniform(params.eta_min, params.eta_max))
    check_compatible(p1, p2)
    # Endpoints are returned exactly rather than through float round-off.
    if eta == 1.0:
        return copy_parent(p2)
    if eta == 0.0:
        return copy_parent(p1)
    e = np.float32(eta)
    return _map_pairs(p1, p2, lambda a, b: a + e * (b - a))


def x5_linear(p1: AdapterState, p2: AdapterState, params: OperatorParams) -> AdapterState:
    alpha = np.float32(params.lin_alpha)
    return _map_pairs(p1, p2, lambda a, b: alpha * a + (np.float32(1) - alpha) * b)


def _trim(t: np.ndarray, tau: float) -> np.ndarray:
    flat = t.ravel().copy()
    n_trim = int(math.floor(tau * flat.size + 1e-9))
    if n_trim:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:n_trim]] = 0
    return flat.reshape(t.shape)


def _ties(a: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    ta, tb = _trim(a, tau), _trim(b, tau)
    elected = np.sign(ta + tb)
    agree_a = (np.sign(ta) == elected) & (elected != 0)
    agree_b = (np.sign(tb) == elected) & (elected != 0)
    count = agree_a.astype(DTYPE) + agree_b.astype(DTYPE)
    total = np.where(agree_a, ta, 0) + np.where(agree_b, tb, 0)
    return np.where(count > 0, total / np.maximum(count, 1), 0).astype(DTYPE)


def x6_ties(p1: AdapterState, p2: AdapterState, params: OperatorParams) -> AdapterState:
    return _map_pairs(p1, p2, lambda a, b: _ties(a, b, params.ties_tau))


def della_drop_probs(n: int, eps: float) -> np.ndarray:
    """Drop probability by magnitude rank (0 = largest)."""
    if n == 1:
        return np.array([eps])
    return eps + (1.0 - eps) * np.arange(n) / (n - 1)


def _della(t: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    flat = t.ravel().astype(np.float64)
    order = np.argsort(-np.abs(flat), kind="stable")
    p = np.empty(flat.size)
    p[order] = della_drop_probs(flat.size, eps)
    keep = rng.random(flat.size) >= p
    scale = np.where(p < 1.0, 1.0 / np.maximum(1.0 - p, 1e-12), 0.0)
    return np.where(keep, flat * scale, 0.0).reshape(t.shape).astype(DTYPE)


def x7_della(p1: AdapterState, p2: AdapterState, params: OperatorParams,
             rng: np.random.Generator) -> AdapterState:
    eps = params.della_eps
    return _map_pairs(p1, p2, lambda a, b: (_della(a, eps, rng) + _della(b, eps, rng)) / np.float32(2))


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    va = a.ravel().astype(np.float64)
    vb = b.ravel().astype(np.float64)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    lerp = (1.0 - t) * va + t * vb
    if na < 1e-8 or nb < 1e-8:
        return lerp.reshape(a.shape).astype(DTYPE)
    cos = float(np.clip(va @ vb / (na * nb), -1.0, 1.0))
    theta = math.acos(cos)
    s = math.sin(theta)
    if abs(s) < 1e-6:
        return lerp.reshape(a.shape).astype(DTYPE)
    out = math.sin((1.0 - t) * theta) / s * va + math.sin(t * theta) / s * vb
    return out.reshape(a.shape).astype(DTYPE)


def x8_slerp(p1: AdapterState, p2: AdapterState, params: OperatorParams) -> AdapterState:
    return _map_pairs(p1, p2, lambda a, b: slerp(a, b, params.slerp_t))


def x9_fisher(p1: AdapterState, p2: AdapterState, eps: float = 1e-8) -> AdapterState:
    def merge(a, b):
        a = a.astype(np.float64)
        b = b.astype(np.float64)
        fa, fb = a * a, b * b
        return (fa * a + fb * b) / (fa + fb + eps)

    return _map_pairs(p1, p2, merge)


def linear_0_5(p1: AdapterState, p2: AdapterState) -> AdapterState:
    return x5_linear(p1, p2, replace(DEFAULT_PARAMS, lin_alpha=0.5))


# --- registry ----------------------------------------------------------------

_UNARY = {
    "m1_svd": lambda ps, prm, g: m1_svd(ps[0], prm, g),
    "m2_layer_gauss": lambda ps, prm, g: m2_layer_gauss(ps[0], prm, g),
    "m3_component_mask": lambda ps, prm, g: m3_component_mask(ps[0], prm, g),
    "m4_full_gauss": lambda ps, prm, g: m4_full_gauss(ps[0], prm, g),
    "m5_neftune": lambda ps, prm, g: m5_neftune(ps[0], prm, g),
    "m6_rank_perturb": lambda ps, prm, g: m6_rank_perturb(ps[0], prm, g),
    "copy_parent": lambda ps, prm, g: copy_parent(ps[0]),
}
_BINARY = {
    "x1_dare": lambda ps, prm, g: x1_dare(ps[0], ps[1], prm, g),
    "x2_layerwise": lambda ps, prm, g: x2_layerwise(ps[0], ps[1], g),
    "x3_svd_subspace": lambda ps, prm, g: x3_svd_subspace(ps[0], ps[1], prm, g),
    "x4_extrapolative": lambda ps, prm, g: x4_extrapolative(ps[0], ps[1], prm, g),
    "x5_linear": lambda ps, prm, g: x5_linear(ps[0], ps[1], prm),
    "x6_ties": lambda ps, prm, g: x6_ties(ps[0], ps[1], prm),
    "x7_della": lambda ps, prm, g: x7_della(ps[0], ps[1], prm, g),
    "x8_slerp": lambda ps, prm, g: x8_slerp(ps[0], ps[1], prm),
    "x9_fisher": lambda ps, prm, g: x9_fisher(ps[0], ps[1]),
    "linear_0_5": lambda ps, prm, g: linear_0_5(ps[0], ps[1]),
}


def arity(op_id: str) -> int:
    if op_id in _UNARY:
        return 1
    if op_id in _BINARY:
        return 2
    raise UnknownOperatorError(op_id)


def apply_operator(op_id: str, parents, params: OperatorParams = DEFAULT_PARAMS,
                   seed: int = 0) -> AdapterState:
    """Dispatch ``op_id`` on ``parents`` with a stream derived from ``seed``.

    The child's provenance records the operator, the seed and the parents'
    ``id`` provenance entries (``None`` when a parent carries no id).
    """
    n = arity(op_id)
    parents = list(parents)
    if len(parents) != n:
        raise ArityError(f"{op_id} takes {n} parent(s), got {len(parents)}")
    if n == 2:
        check_compatible(*parents)
    fn = _UNARY.get(op_id) or _BINARY[op_id]
    child = fn(parents, params, rngmod.stream("operator", seed))
    child.provenance = {
        "operator": op_id,
        "seed": int(seed),
        "parents": [p.provenance.get("id") for p in parents],
    }
    return child


__all__ = [
    "ALL_OPERATORS", "LIVE_OPERATORS", "MUTATIONS", "CROSSOVERS", "DETERMINISTIC",
    "OperatorParams", "DEFAULT_PARAMS", "apply_operator", "arity", "ShapeError",
    "UnknownOperatorError", "ArityError",
]
