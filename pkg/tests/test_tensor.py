import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfplay_lora import tensor as T
from selfplay_lora.tensor import FactorPair, AdapterState


def random_pair(rng, d_out, d_in, r, scale=1.0):
    return FactorPair(rng.standard_normal((r, d_in)) * scale, rng.standard_normal((d_out, r)) * scale)


def random_adapter(rng, n_slots=3, r=3, scaling=2.0):
    slots = {}
    for i in range(n_slots):
        d_out, d_in = rng.integers(r, 12, size=2)
        slots[f"s{i}"] = random_pair(rng, int(d_out), int(d_in), r)
    return AdapterState(slots, scaling)


# --- data model ----------------------------------------------------------------------

def test_effective_delta_hand_example():
    p = FactorPair(np.array([[2.0, 3.0]]), np.array([[1.0], [0.0]]))
    assert np.array_equal(T.effective_delta(p), [[2, 3], [0, 0]])


def test_effective_delta_zero_and_outer_product():
    p = FactorPair(np.zeros((1, 3)), np.ones((2, 1)))
    assert not T.effective_delta(p).any()
    q = FactorPair(np.array([[0.0, 1.0, 0.0]]), np.array([[1.0], [0.0]]))
    d = T.effective_delta(q)
    assert d[0, 1] == 1 and np.count_nonzero(d) == 1


def test_factor_pair_rejects_bad_shapes():
    with pytest.raises(T.ShapeError):
        FactorPair(np.zeros((2, 3)), np.zeros((4, 3)))
    with pytest.raises(T.ShapeError):
        FactorPair(np.zeros((3, 2)), np.zeros((4, 3)))  # r > d_in
    with pytest.raises(T.ShapeError):
        AdapterState({"a": FactorPair(np.zeros((1, 3)), np.zeros((3, 1))),
                      "b": FactorPair(np.zeros((2, 3)), np.zeros((3, 2)))})


@pytest.mark.parametrize("t,expected", [
    (np.full((2, 3), 4.0), 0.0),
    (np.array([[1.0, -1.0]]), 1.0),
    (np.array([[0.0, 0.0, 3.0, 3.0]]), 1.5),
])
def test_tensor_std(t, expected):
    assert T.tensor_std(t) == pytest.approx(expected, abs=1e-7)


def test_init_adapter_starts_at_zero_delta():
    a = T.init_adapter({"w": (6, 5), "v": (4, 7)}, 2, np.random.default_rng(0))
    for pair in a.slots.values():
        assert not T.effective_delta(pair).any()
        assert pair.A.dtype == np.float32


# --- SVD path -------------------------------------------------------------------------

def test_householder_qr_matches_input():
    x = np.random.default_rng(1).standard_normal((9, 4))
    q, r = T.householder_qr(x)
    # float32 arithmetic throughout
    assert np.allclose(q @ r, x, atol=1e-5)
    assert np.allclose(q.T @ q, np.eye(4), atol=1e-5)
    assert np.allclose(np.tril(r, -1), 0)


def test_jacobi_svd_against_lapack():
    c = np.random.default_rng(2).standard_normal((5, 5))
    u, s, v = T.jacobi_svd(c)
    assert np.allclose(s, np.linalg.svd(c, compute_uv=False), atol=1e-9)
    assert np.allclose(u @ np.diag(s) @ v.T, c, atol=1e-9)


def test_svd_rank_one_hand_example():
    t = T.svd_of_delta(FactorPair(np.array([[1.0, 0.0]]), np.array([[3.0], [0.0]])))
    assert t.S == pytest.approx([3.0])
    assert abs(abs(t.U[0, 0]) - 1) < 1e-6 and abs(abs(t.V[0, 0]) - 1) < 1e-6


def test_svd_of_zero_factors():
    t = T.svd_of_delta(FactorPair(np.zeros((3, 6)), np.zeros((5, 3))))
    assert not t.S.any()
    assert T.orthonormality_error(t.U) < 1e-4 and T.orthonormality_error(t.V) < 1e-4


def test_svd_rejects_non_finite():
    p = FactorPair(np.ones((1, 3)), np.ones((2, 1)))
    p.A[0, 0] = np.nan
    with pytest.raises(ValueError):
        T.svd_of_delta(p)


@settings(max_examples=60, deadline=None)
@given(d_out=st.integers(4, 64), d_in=st.integers(4, 64), r=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
def test_svd_reconstruction_and_orthonormality(d_out, d_in, r, seed):
    p = random_pair(np.random.default_rng(seed), d_out, d_in, min(r, d_out, d_in))
    t = T.svd_of_delta(p)
    recon = t.U @ np.diag(t.S) @ t.V.T
    assert np.max(np.abs(recon - T.effective_delta(p))) < 1e-4
    assert T.orthonormality_error(t.U) < 1e-4 and T.orthonormality_error(t.V) < 1e-4
    assert (np.diff(t.S) <= 1e-6).all() and (t.S >= 0).all()
    # independent oracle: LAPACK on the materialized delta
    ref = np.linalg.svd(T.effective_delta(p).astype(np.float64), compute_uv=False)[: len(t.S)]
    assert np.allclose(t.S, ref, atol=1e-4 * max(1.0, ref[0]))
    back = T.effective_delta(T.refactor_balanced(t))
    assert np.max(np.abs(back - T.effective_delta(p))) < 1e-4


def test_refactor_balanced_examples():
    zero = T.SvdTriple(np.eye(3)[:, :2], np.zeros(2), np.eye(4)[:, :2])
    f = T.refactor_balanced(zero)
    assert not f.A.any() and not f.B.any()
    one = T.refactor_balanced(T.SvdTriple(np.eye(3)[:, :1], np.array([4.0]), np.eye(2)[:, :1]))
    assert np.linalg.norm(one.A) == pytest.approx(2.0) and np.linalg.norm(one.B) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        T.refactor_balanced(T.SvdTriple(np.eye(2)[:, :1], np.array([-1.0]), np.eye(2)[:, :1]))


# --- serialization ----------------------------------------------------------------

def test_roundtrip_bitwise(tmp_path):
    a = random_adapter(np.random.default_rng(3))
    T.save_adapter(a, tmp_path / "a.plra")
    b = T.load_adapter(tmp_path / "a.plra")
    assert a.bitwise_equal(b)
    assert T.adapter_to_bytes(a) == T.adapter_to_bytes(b)


def test_container_layout():
    a = random_adapter(np.random.default_rng(4), n_slots=2)
    buf = T.adapter_to_bytes(a)
    assert buf[:4] == b"PLRA"
    assert struct.unpack("<I", buf[4:8])[0] == 1
    hlen = struct.unpack("<Q", buf[8:16])[0]
    blob = np.frombuffer(buf[16 + hlen:], dtype="<f4")
    expected = np.concatenate([t.ravel() for _, _, t in a.tensors()])
    assert np.array_equal(blob, expected)


def test_corrupt_magic():
    buf = bytearray(T.adapter_to_bytes(random_adapter(np.random.default_rng(5))))
    buf[0:4] = b"XXXX"
    with pytest.raises(T.BadMagicError):
        T.adapter_from_bytes(bytes(buf))


def test_version_mismatch():
    buf = bytearray(T.adapter_to_bytes(random_adapter(np.random.default_rng(6))))
    buf[4:8] = struct.pack("<I", 99)
    with pytest.raises(T.VersionMismatchError):
        T.adapter_from_bytes(bytes(buf))


def test_truncated_blob_when_a_slot_is_missing():
    a = random_adapter(np.random.default_rng(7), n_slots=3)
    two = AdapterState(dict(list(a.slots.items())[:2]), a.scaling)
    full = T.adapter_to_bytes(a)
    hlen = struct.unpack("<Q", full[8:16])[0]
    # header for three slots, blobs for only two
    cut = full[:16 + hlen] + T.adapter_to_bytes(two)[16 + struct.unpack("<Q", T.adapter_to_bytes(two)[8:16])[0]:]
    with pytest.raises(T.TruncatedBlobError):
        T.adapter_from_bytes(cut)
    with pytest.raises(T.TruncatedBlobError):
        T.adapter_from_bytes(full[:10])


def test_header_shape_disagreement():
    a = random_adapter(np.random.default_rng(8), n_slots=1)
    buf = T.adapter_to_bytes(a)
    hlen = struct.unpack("<Q", buf[8:16])[0]
    header = buf[16:16 + hlen].decode().replace('"rank":3', '"rank":2')
    assert header != buf[16:16 + hlen].decode()
    hb = header.encode()
    bad = buf[:8] + struct.pack("<Q", len(hb)) + hb + buf[16 + hlen:]
    with pytest.raises(T.HeaderShapeError):
        T.adapter_from_bytes(bad)
    with pytest.raises(T.AdapterFormatError):
        T.adapter_from_bytes(buf + b"\0\0\0\0")


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), r=st.integers(1, 3))
def test_roundtrip_property(seed, n, r):
    a = random_adapter(np.random.default_rng(seed), n_slots=n, r=r, scaling=float(seed % 7 + 1))
    assert T.adapter_from_bytes(T.adapter_to_bytes(a)).bitwise_equal(a)
