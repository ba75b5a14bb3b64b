"""Low-rank adapter data model and the linear algebra the operators need.

Factors follow the usual LoRA layout: ``A`` is ``(r, d_in)``, ``B`` is
``(d_out, r)`` and the effective weight delta is ``B @ A``.  Everything is
stored and computed in float32.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float32

MAGIC = b"PLRA"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Factor shapes disagree with each other or with a sibling adapter."""


class AdapterFormatError(ValueError):
    """Base class for adapter container decoding failures."""


class BadMagicError(AdapterFormatError):
    pass


class VersionMismatchError(AdapterFormatError):
    pass


class TruncatedBlobError(AdapterFormatError):
    pass


class HeaderShapeError(AdapterFormatError):
    """Header shapes are malformed or disagree with the blob size."""


def as_tensor(x) -> np.ndarray:
    t = np.ascontiguousarray(np.asarray(x, dtype=DTYPE))
    if t.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {t.shape}")
    return t


@dataclass
class FactorPair:
    A: np.ndarray  # (r, d_in)
    B: np.ndarray  # (d_out, r)

    def __post_init__(self):
        self.A = as_tensor(self.A)
        self.B = as_tensor(self.B)
        if self.A.shape[0] != self.B.shape[1]:
            raise ShapeError(
                f"rank mismatch: A has {self.A.shape[0]} rows, B has {self.B.shape[1]} cols"
            )
        if self.rank < 1:
            raise ShapeError("rank must be >= 1")
        if self.rank > min(self.d_in, self.d_out):
            raise ShapeError(f"rank {self.rank} exceeds min(d_in, d_out) = {min(self.d_in, self.d_out)}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def copy(self) -> "FactorPair":
        return FactorPair(self.A.copy(), self.B.copy())


@dataclass
class AdapterState:
    """Named low-rank factor pairs sharing one rank.

    Operators act on the raw factors and carry ``scaling`` through unchanged;
    policies apply ``scaling * B @ A`` on top of their frozen tables.  ``provenance`` is free-form bookkeeping and is not part of the
    serialized container.
    """

    slots: dict[str, FactorPair]
    scaling: float = 1.0
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.slots:
            raise ShapeError("adapter needs at least one slot")
        ranks = {p.rank for p in self.slots.values()}
        if len(ranks) != 1:
            raise ShapeError(f"slots disagree on rank: {sorted(ranks)}")
        if not self.scaling > 0:
            raise ShapeError("scaling must be positive")

    @property
    def rank(self) -> int:
        return next(iter(self.slots.values())).rank

    def copy(self) -> "AdapterState":
        return AdapterState(
            {k: p.copy() for k, p in self.slots.items()},
            self.scaling,
            dict(self.provenance),
        )

    def tensors(self):
        """Yield ``(slot, factor_name, array)`` in container order."""
        for name, pair in self.slots.items():
            yield name, "A", pair.A
            yield name, "B", pair.B

    def bitwise_equal(self, other: "AdapterState") -> bool:
        if list(self.slots) != list(other.slots):
            return False
        if self.scaling != other.scaling:
            return False
        for (_, _, x), (_, _, y) in zip(self.tensors(), other.tensors()):
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
        return True


@dataclass
class SvdTriple:
    U: np.ndarray  # (d_out, r)
    S: np.ndarray  # (r,)
    V: np.ndarray  # (d_in, r)


def init_adapter(shapes: dict[str, tuple[int, int]], rank: int, rng: np.random.Generator,
                 scaling: float = 1.0, a_scale: float | None = None,
                 b_scale: float = 0.0) -> AdapterState:
    """LoRA init: ``A`` Gaussian and ``B`` zero, so the delta starts at 0.

    ``shapes`` maps slot name to ``(d_out, d_in)``.  A positive ``b_scale``
    draws ``B`` from ``N(0, b_scale^2)`` instead, giving members distinct
    starting policies.
    """
    slots = {}
    for name, (d_out, d_in) in shapes.items():
        if rank > min(d_in, d_out):
            raise ShapeError(f"rank {rank} exceeds min dims of slot {name!r}")
        scale = a_scale if a_scale is not None else 1.0 / math.sqrt(d_in)
        A = (rng.standard_normal((rank, d_in)) * scale).astype(DTYPE)
        # + 0.0 folds the -0.0 entries a zero scale leaves behind
        B = (rng.standard_normal((d_out, rank)) * b_scale + 0.0).astype(DTYPE)
        slots[name] = FactorPair(A, B)
    return AdapterState(slots, scaling)


def check_compatible(*adapters: AdapterState) -> None:
    first = adapters[0]
    for other in adapters[1:]:
        if list(other.slots) != list(first.slots):
            raise ShapeError("parents have different slot names")
        for name, pair in first.slots.items():
            q = other.slots[name]
            if q.A.shape != pair.A.shape or q.B.shape != pair.B.shape:
                raise ShapeError(f"slot {name!r} shapes differ between parents")


def effective_delta(p: FactorPair) -> np.ndarray:
    return p.B @ p.A


def tensor_std(t: np.ndarray) -> float:
    """Population standard deviation over all entries."""
    t = np.asarray(t, dtype=DTYPE)
    if t.size == 0:
        raise ValueError("empty tensor")
    return float(np.std(t, dtype=DTYPE))


def householder_qr(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of a tall ``(m, n)`` matrix by Householder reflections.

    Q always has orthonormal columns, including for rank-deficient input.
    """
    x = np.asarray(x, dtype=DTYPE)
    m, n = x.shape
    if m < n:
        raise ShapeError(f"householder_qr needs m >= n, got {x.shape}")
    r = x.copy()
    reflectors = []
    for k in range(n):
        col = r[k:, k]
        alpha = np.float32(np.linalg.norm(col))
        if alpha == 0:
            reflectors.append(None)
            continue
        v = col.copy()
        v[0] += alpha if col[0] >= 0 else -alpha
        v /= np.linalg.norm(v)
        r[k:, k:] -= np.float32(2) * np.outer(v, v @ r[k:, k:])
        reflectors.append(v)
    q = np.eye(m, n, dtype=DTYPE)
    for k in reversed(range(n)):
        v = reflectors[k]
        if v is None:
            continue
        q[k:, :] -= np.float32(2) * np.outer(v, v @ q[k:, :])
    return q, np.triu(r[:n, :])


def _complete_orthonormal(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # Replace columns not in ``keep`` with an orthonormal completion.
    n = u.shape[1]
    cols = [u[:, i] for i in range(n) if keep[i]]
    out = u.copy()
    candidates = iter(np.eye(u.shape[0], dtype=DTYPE))
    for i in range(n):
        if keep[i]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for c in cols:
                    w -= (c @ w) * c
            nw = np.linalg.norm(w)
            if nw > 1e-3:
                w /= nw
                out[:, i] = w
                cols.append(w)
                break
    return out


def jacobi_svd(c: np.ndarray, tol: float = 1e-6, max_sweeps: int = 40):
    """One-sided (Hestenes) Jacobi SVD of a small square matrix.

    Returns ``(U, S, V)`` with ``c == U @ diag(S) @ V.T`` and ``S`` sorted
    descending.
    """
    w = np.array(c, dtype=DTYPE)
    n = w.shape[1]
    v = np.eye(n, dtype=DTYPE)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = float(w[:, i] @ w[:, i])
                b = float(w[:, j] @ w[:, j])
                g = float(w[:, i] @ w[:, j])
                if g == 0.0 or abs(g) <= tol * math.sqrt(a * b):
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * g)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                cs, sn = np.float32(cs), np.float32(sn)
                wi, wj = w[:, i].copy(), w[:, j].copy()
                w[:, i] = cs * wi - sn * wj
                w[:, j] = sn * wi + cs * wj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = cs * vi - sn * vj
                v[:, j] = sn * vi + cs * vj
        if not rotated:
            break
    s = np.linalg.norm(w, axis=0).astype(DTYPE)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]
    floor = max(float(s[0]) if n else 0.0, 1e-30) * 1e-6
    keep = s > floor
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / s[keep]
    s = np.where(keep, s, np.float32(0)).astype(DTYPE)
    if not keep.all():
        u = _complete_orthonormal(u, keep)
    return u, s, v


def svd_of_delta(p: FactorPair) -> SvdTriple:
    """SVD of ``B @ A`` through QR of both factors and an ``r x r`` core SVD."""
    if not (np.isfinite(p.A).all() and np.isfinite(p.B).all()):
        raise ValueError("non-finite factor entries")
    if p.rank > min(p.d_in, p.d_out):
        raise ShapeError("rank exceeds min(d_in, d_out)")
    qb, rb = householder_qr(p.B)
    qa, ra = householder_qr(p.A.T)
    uc, s, vc = jacobi_svd(rb @ ra.T)
    return SvdTriple(qb @ uc, s, qa @ vc)


def refactor_balanced(t: SvdTriple) -> FactorPair:
    """Split ``U diag(S) V^T`` evenly: ``B = U sqrt(S)``, ``A = sqrt(S) V^T``."""
    s = np.asarray(t.S, dtype=DTYPE)
    if (s < 0).any():
        raise ValueError("negative singular value")
    root = np.sqrt(s)
    B = np.asarray(t.U, dtype=DTYPE) * root[None, :]
    A = (np.asarray(t.V, dtype=DTYPE) * root[None, :]).T
    return FactorPair(A, B)


def orthonormality_error(m: np.ndarray) -> float:
    """Max absolute deviation of ``m.T @ m`` from the identity."""
    g = m.T @ m
    return float(np.max(np.abs(g - np.eye(g.shape[0], dtype=g.dtype))))


# --- serialization ---------------------------------------------------------

def adapter_to_bytes(a: AdapterState) -> bytes:
    header = {
        "rank": a.rank,
        "scaling": a.scaling,
        "slots": [
            {"name": name, "a_shape": list(p.A.shape), "b_shape": list(p.B.shape)}
            for name, p in a.slots.items()
        ],
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(hbytes)), hbytes]
    for _, _, t in a.tensors():
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def _shape(v, what):
    if (not isinstance(v, list) or len(v) != 2
            or not all(isinstance(d, int) and d >= 1 for d in v)):
        raise HeaderShapeError(f"bad {what} {v!r}")
    return tuple(v)


def adapter_from_bytes(buf: bytes) -> AdapterState:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not an adapter container (bad magic)")
    if len(buf) < 16:
        raise TruncatedBlobError("container ends inside the fixed preamble")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"container version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    if 16 + hlen > len(buf):
        raise TruncatedBlobError("container ends inside the header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
        rank = header["rank"]
        scaling = header["scaling"]
        slot_specs = header["slots"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderShapeError(f"unreadable header: {exc}") from exc
    if not isinstance(slot_specs, list) or not slot_specs:
        raise HeaderShapeError("header lists no slots")
    offset = 16 + hlen
    slots = {}
    for spec in slot_specs:
        a_shape = _shape(spec.get("a_shape"), "a_shape")
        b_shape = _shape(spec.get("b_shape"), "b_shape")
        if a_shape[0] != rank or b_shape[1] != rank:
            raise HeaderShapeError(f"slot {spec.get('name')!r} shapes disagree with rank {rank}")
        arrays = []
        for shp in (a_shape, b_shape):
            nbytes = 4 * shp[0] * shp[1]
            if offset + nbytes > len(buf):
                raise TruncatedBlobError(f"blob for slot {spec.get('name')!r} is truncated")
            arr = np.frombuffer(buf, dtype="<f4", count=shp[0] * shp[1], offset=offset)
            arrays.append(arr.astype(DTYPE).reshape(shp))
            offset += nbytes
        slots[spec["name"]] = FactorPair(arrays[0], arrays[1])
    if offset != len(buf):
        raise HeaderShapeError(f"{len(buf) - offset} trailing bytes after the declared blobs")
    return AdapterState(slots, float(scaling))


def save_adapter(a: AdapterState, path) -> None:
    Path(path).write_bytes(adapter_to_bytes(a))


def load_adapter(path) -> AdapterState:
    return adapter_from_bytes(Path(path).read_bytes())
