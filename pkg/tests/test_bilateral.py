import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwdg.bilateral import (
    GRID_SHAPE,
    GridDimensionError,
    GridFormatError,
    GridTruncatedError,
    apply_affine,
    apply_affine_backward,
    bench_slice,
    deserialize_grid,
    identity_grid,
    serialize_grid,
    slice_grid,
    slice_grid_backward,
    slice_grid_batched,
    slice_grid_reference,
)
from uwdg.gradcheck import grad_check


def _rand(seed, h=32, w=32):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(GRID_SHAPE + (3, 4)), rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w, 3))


def test_constant_grid_gives_constant_field():
    M = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    A = np.broadcast_to(M, GRID_SHAPE + (3, 4)).copy()
    g = np.random.default_rng(0).uniform(0, 1, (23, 17))
    g[0, 0], g[1, 1] = 0.0, 1.0
    F = slice_grid(A, g)
    assert np.max(np.abs(F - M)) <= 1e-9


def test_identity_grid_reproduces_content():
    # tent weights sum to one only up to rounding, so allow a few ulp
    _, g, C = _rand(1, 40, 24)
    O = apply_affine(C, slice_grid(identity_grid(), g))
    assert np.max(np.abs(O - C)) <= 4 * np.finfo(np.float64).eps


def test_matches_reference_on_32px():
    A, g, _ = _rand(2)
    assert np.max(np.abs(slice_grid(A, g) - slice_grid_reference(A, g))) <= 1e-6


def test_guidance_edges_keep_partition_of_unity():
    # g = 1 puts the raw depth coordinate at 8, outside the 8-cell axis
    A = np.ones(GRID_SHAPE + (3, 4))
    for val in (0.0, 1.0):
        F = slice_grid_reference(A, np.full((4, 4), val))
        assert np.allclose(F, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_linear_in_grid(seed, alpha):
    rng = np.random.default_rng(seed)
    A1, A2 = rng.standard_normal((2,) + GRID_SHAPE + (3, 4))
    g = rng.uniform(0, 1, (9, 11))
    lhs = slice_grid(alpha * A1 + A2, g)
    rhs = alpha * slice_grid(A1, g) + slice_grid(A2, g)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_guidance_change_is_local():
    A, g, _ = _rand(3, 12, 12)
    F0 = slice_grid(A, g)
    g2 = g.copy()
    g2[5, 7] = 1 - g2[5, 7]
    diff = np.abs(slice_grid(A, g2) - F0).reshape(12, 12, -1).max(axis=-1)
    diff[5, 7] = 0
    assert diff.max() == 0


def test_apply_affine_examples():
    field = np.zeros((1, 1, 3, 4))
    field[0, 0, :, :3] = np.diag([0.5, 2.0, 1.0])
    field[0, 0, :, 3] = 0.1
    O = apply_affine(np.array([[[1.0, 0.0, 0.0]]]), field)
    assert np.allclose(O, [0.6, 0.1, 0.1])
    bias_only = np.zeros((3, 2, 3, 4))
    bias_only[..., 3] = [0.2, -0.4, 7.0]
    C = np.random.default_rng(0).uniform(0, 1, (3, 2, 3))
    assert np.array_equal(apply_affine(C, bias_only), np.broadcast_to([0.2, -0.4, 7.0], C.shape))
    with pytest.raises(ValueError):
        apply_affine(C, np.zeros((2, 2, 3, 4)))


def test_batched_slice_matches_single():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((2,) + GRID_SHAPE + (3, 4))
    g = rng.uniform(0, 1, (2, 10, 14))
    field, _ = slice_grid_batched(A, g)
    for i in range(2):
        assert np.allclose(field[i], slice_grid(A[i], g[i]), atol=1e-12)


def test_slice_and_apply_gradients():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((1, 4, 4, 3, 3, 4))
    g = rng.uniform(0.05, 0.95, (1, 6, 5))
    C = rng.uniform(0, 1, (1, 6, 5, 3))
    W = rng.standard_normal((1, 6, 5, 3))

    def loss(p):
        field, cache = slice_grid_batched(p["A"], p["g"])
        return float(np.sum(W * apply_affine(p["C"], field))), cache

    params = {"A": A, "g": g, "C": C}
    _, cache = loss(params)
    field, _ = slice_grid_batched(A, g)
    dC, dfield = apply_affine_backward(W, C, field)
    dA, dg = slice_grid_backward(dfield, cache)

    def fn(p):
        value, c = loss(p)
        return value, [c[i] for i in range(len(c)) if isinstance(c[i], np.ndarray) and c[i].dtype.kind in "bi"]

    res = grad_check(fn, params, {"A": dA, "g": dg, "C": dC})
    assert res.max_rel_error <= 1e-6


def test_grid_round_trip_bit_exact():
    A = np.random.default_rng(6).standard_normal(GRID_SHAPE + (3, 4)).astype(np.float32)
    A.reshape(-1)[:3] = [np.float32(1e-40), -0.0, np.inf]
    B = deserialize_grid(serialize_grid(A))
    assert B.dtype == np.float32
    assert A.tobytes() == B.tobytes()


def test_grid_header_layout():
    buf = serialize_grid(identity_grid())
    assert buf[:4] == b"BGRD"
    assert struct.unpack("<6H", buf[4:16]) == (1, 16, 16, 8, 3, 4)
    assert len(buf) == 16 + 16 * 16 * 8 * 12 * 4
    first = np.frombuffer(buf[16:64], dtype="<f4")
    assert first.tolist() == [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0]


def test_grid_format_errors():
    buf = serialize_grid(identity_grid())
    with pytest.raises(GridTruncatedError):
        deserialize_grid(buf[:-1])
    with pytest.raises(GridTruncatedError):
        deserialize_grid(buf[:10])
    with pytest.raises(GridFormatError):
        deserialize_grid(b"XXXX" + buf[4:])
    small = serialize_grid(identity_grid((16, 16, 7)))
    with pytest.raises(GridDimensionError):
        deserialize_grid(small)
    assert deserialize_grid(small, expected_shape=None).shape == (16, 16, 7, 3, 4)


def test_bench_report_schema():
    with pytest.raises(ValueError):
        bench_slice(32, 32, iterations=5)
    rep = bench_slice(64, 64, iterations=10, ref_iterations=1, jobs=2)
    assert {"size", "iters", "fps_opt", "fps_ref", "ratio"} <= set(rep)
    assert rep["fps_opt"] > 0 and rep["fps_ref"] > 0 and "fps_opt_parallel" in rep
