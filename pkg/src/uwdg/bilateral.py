"""Bilateral grid slicing, per-pixel affine colour transforms and the grid file format.

A grid is an array of shape ``(grid_h, grid_w, grid_d, 3, 4)``; axis 0 runs
along image rows (y), axis 1 along columns (x), axis 2 along guidance.  Each
cell holds ``[M | b]`` with ``M`` a 3x3 colour matrix and ``b`` a bias.

Continuous lookup coordinates are ``(y * grid_h / h, x * grid_w / w, g * grid_d)``,
each clamped to ``[0, dim - 1]`` before the tent weights
``tau(t) = max(1 - |t|, 0)`` are applied, so the weights along every axis sum to 1.
"""
from __future__ import annotations

import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

GRID_SHAPE = (16, 16, 8)
MAGIC = b"BGRD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s6H")


class GridFormatError(ValueError):
    pass


class GridTruncatedError(GridFormatError):
    pass


class GridDimensionError(GridFormatError):
    pass


def identity_grid(shape=GRID_SHAPE, dtype=np.float64) -> np.ndarray:
    A = np.zeros(tuple(shape) + (3, 4), dtype=dtype)
    A[..., :, :3] = np.eye(3, dtype=dtype)
    return A


def _axis_coords(n_pixels: int, n_cells: int) -> np.ndarray:
    c = np.arange(n_pixels, dtype=np.float64) * (n_cells / n_pixels)
    return np.clip(c, 0.0, n_cells - 1)


def _lerp_indices(coord: np.ndarray, n_cells: int):
    lo = np.floor(coord).astype(np.intp)
    lo = np.minimum(lo, n_cells - 1)
    frac = coord - lo
    hi = np.minimum(lo + 1, n_cells - 1)
    return lo, hi, frac


def _check_slice_inputs(A, g):
    A = np.asarray(A)
    g = np.asarray(g)
    if A.ndim != 5 or A.shape[3:] != (3, 4):
        raise ValueError(f"grid must have shape (gh, gw, gd, 3, 4), got {A.shape}")
    if g.ndim != 2:
        raise ValueError(f"guidance must be (h, w), got {g.shape}")
    return A, g


def _slice_core(A, cy, cx, g):
    gh, gw, gd = A.shape[:3]
    y0, y1, fy = _lerp_indices(cy, gh)
    x0, x1, fx = _lerp_indices(cx, gw)
    z0, z1, fz = _lerp_indices(np.clip(g * gd, 0.0, gd - 1), gd)
    flat = A.reshape(gh * gw * gd, 12)
    out = np.zeros(g.shape + (12,), dtype=np.result_type(A.dtype, g.dtype))
    for yi, wy in ((y0, 1 - fy), (y1, fy)):
        for xi, wx in ((x0, 1 - fx), (x1, fx)):
            base = (yi[:, None] * gw + xi[None, :]) * gd
            wyx = wy[:, None] * wx[None, :]
            for zi, wz in ((z0, 1 - fz), (z1, fz)):
                out += (wyx * wz)[:, :, None] * flat[base + zi]
    return out.reshape(g.shape + (3, 4))


def slice_grid(A, g) -> np.ndarray:
    """Trilinear lookup of the grid at every pixel; returns an ``(h, w, 3, 4)`` field."""
    A, g = _check_slice_inputs(A, g)
    h, w = g.shape
    return _slice_core(A, _axis_coords(h, A.shape[0]), _axis_coords(w, A.shape[1]), g)


def slice_grid_reference(A, g) -> np.ndarray:
    """Literal triple sum over every cell; slow on purpose, used as ground truth."""
    A, g = _check_slice_inputs(A, g)
    gh, gw, gd = A.shape[:3]
    h, w = g.shape
    cy = _axis_coords(h, gh)[:, None]
    cx = _axis_coords(w, gw)[None, :]
    cz = np.clip(g * gd, 0.0, gd - 1)
    tau = lambda t: np.maximum(1.0 - np.abs(t), 0.0)  # noqa: E731
    out = np.zeros((h, w, 3, 4), dtype=np.result_type(A.dtype, g.dtype))
    for i in range(gh):
        wy = tau(cy - i)
        for j in range(gw):
            wyx = wy * tau(cx - j)
            for k in range(gd):
                out += (wyx * tau(cz - k))[:, :, None, None] * A[i, j, k]
    return out


def slice_grid_batched(A, g):
    """Slice a batch ``A (N, gh, gw, gd, 3, 4)`` with guides ``g (N, h, w)``.

    Returns the field and a cache for :func:`slice_grid_backward`.
    """
    N, gh, gw, gd = A.shape[:4]
    _, h, w = g.shape
    y0, y1, fy = _lerp_indices(_axis_coords(h, gh), gh)
    x0, x1, fx = _lerp_indices(_axis_coords(w, gw), gw)
    cz_raw = g * gd
    cz = np.clip(cz_raw, 0.0, gd - 1)
    z0, z1, fz = _lerp_indices(cz, gd)
    flat = A.reshape(N, gh * gw * gd, 12)
    nidx = np.arange(N)[:, None, None]
    out = np.zeros((N, h, w, 12), dtype=A.dtype)
    dz = np.zeros((N, h, w, 12), dtype=A.dtype)
    corners = []
    for yi, wy in ((y0, 1 - fy), (y1, fy)):
        for xi, wx in ((x0, 1 - fx), (x1, fx)):
            base = (yi[:, None] * gw + xi[None, :]) * gd
            wyx = (wy[:, None] * wx[None, :])[None]
            c_lo = flat[nidx, base[None] + z0]
            c_hi = flat[nidx, base[None] + z1]
            out += (wyx * (1 - fz))[..., None] * c_lo + (wyx * fz)[..., None] * c_hi
            dz += wyx[..., None] * (c_hi - c_lo)
            corners.append((base, wyx))
    inside = ((cz_raw > 0) & (cz_raw < gd - 1)).astype(A.dtype)
    cache = (A.shape, corners, z0, z1, fz, dz, inside, gd)
    return out.reshape(N, h, w, 3, 4), cache


def slice_grid_backward(dfield, cache):
    """Gradients of a batched slice w.r.t. the grid and the guidance map."""
    a_shape, corners, z0, z1, fz, dz, inside, gd = cache
    N = a_shape[0]
    n_cells = a_shape[1] * a_shape[2] * a_shape[3]
    df = dfield.reshape(N, -1, 12)
    dA = np.empty((N, n_cells, 12), dtype=dfield.dtype)
    for n in range(N):
        idx, wts = [], []
        for base, wyx in corners:
            for zi, wz in ((z0[n], 1 - fz[n]), (z1[n], fz[n])):
                idx.append((base + zi).ravel())
                wts.append((wyx[0] * wz).ravel())
        idx = np.concatenate(idx)
        wts = np.concatenate(wts)
        dfn = np.tile(df[n], (len(corners) * 2, 1))
        for c in range(12):
            dA[n, :, c] = np.bincount(idx, weights=wts * dfn[:, c], minlength=n_cells)
    dg = (dfield.reshape(dz.shape) * dz).sum(axis=-1) * inside * gd
    return dA.reshape(a_shape), dg


def apply_affine(C, field) -> np.ndarray:
    """``O = M C + b`` per pixel.  Works on ``(h, w, 3)`` or batched ``(N, h, w, 3)``."""
    C = np.asarray(C)
    field = np.asarray(field)
    if field.shape[:-2] != C.shape[:-1] or field.shape[-2:] != (3, 4) or C.shape[-1] != 3:
        raise ValueError(f"shape mismatch: image {C.shape} vs affine field {field.shape}")
    return np.einsum("...rc,...c->...r", field[..., :3], C) + field[..., 3]


def apply_affine_backward(dO, C, field):
    dC = np.einsum("...rc,...r->...c", field[..., :3], dO)
    dfield = np.empty(field.shape, dtype=dO.dtype)
    dfield[..., :3] = dO[..., :, None] * C[..., None, :]
    dfield[..., 3] = dO
    return dC, dfield


def serialize_grid(A) -> bytes:
    A = np.asarray(A)
    if A.ndim != 5 or A.shape[3:] != (3, 4):
        raise GridDimensionError(f"grid must have shape (gh, gw, gd, 3, 4), got {A.shape}")
    gh, gw, gd = A.shape[:3]
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, gh, gw, gd, 3, 4)
    return header + np.ascontiguousarray(A, dtype="<f4").tobytes()


def deserialize_grid(buf: bytes, expected_shape=GRID_SHAPE) -> np.ndarray:
    """Parse a BGRD buffer; ``expected_shape=None`` accepts any grid dimensions."""
    if len(buf) < _HEADER.size:
        raise GridTruncatedError(f"buffer of {len(buf)} bytes is shorter than the {_HEADER.size}-byte header")
    magic, version, gh, gw, gd, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise GridFormatError(f"unsupported format version {version}")
    if (rows, cols) != (3, 4):
        raise GridDimensionError(f"cells must be 3x4, got {rows}x{cols}")
    if expected_shape is not None and (gh, gw, gd) != tuple(expected_shape):
        raise GridDimensionError(f"grid dims {(gh, gw, gd)} differ from expected {tuple(expected_shape)}")
    n = gh * gw * gd * 12
    payload = buf[_HEADER.size :]
    if len(payload) < 4 * n:
        raise GridTruncatedError(f"payload has {len(payload)} bytes, need {4 * n}")
    if len(payload) > 4 * n:
        raise GridFormatError(f"{len(payload) - 4 * n} trailing bytes after grid payload")
    return np.frombuffer(payload, dtype="<f4").reshape(gh, gw, gd, 3, 4).copy()


def _slice_apply_parallel(A, g, C, pool, bands):
    h, w = g.shape
    cy = _axis_coords(h, A.shape[0])
    cx = _axis_coords(w, A.shape[1])
    edges = np.linspace(0, h, bands + 1).astype(int)
    out = np.empty_like(C)

    def work(lo, hi):
        out[lo:hi] = apply_affine(C[lo:hi], _slice_core(A, cy[lo:hi], cx, g[lo:hi]))

    list(pool.map(lambda ab: work(*ab), zip(edges[:-1], edges[1:])))
    return out


def bench_slice(height: int = 512, width: int = 512, iterations: int = 100, ref_iterations: int = 2, jobs: int = 1, seed: int = 0) -> dict:
    """Frames per second for optimized slice+apply versus the reference slice+apply.

    The reference is timed on ``ref_iterations`` frames because one frame at
    512x512 takes seconds.
    """
    if iterations < 10:
        raise ValueError("iterations must be at least 10")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal(GRID_SHAPE + (3, 4))
    g = rng.uniform(0, 1, size=(height, width))
    C = rng.uniform(0, 1, size=(height, width, 3))

    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        apply_affine(C, slice_grid(A, g))
        times.append(time.perf_counter() - t0)
    t_opt = float(np.median(times))

    ref_times = []
    for _ in range(max(1, ref_iterations)):
        t0 = time.perf_counter()
        apply_affine(C, slice_grid_reference(A, g))
        ref_times.append(time.perf_counter() - t0)
    t_ref = float(np.median(ref_times))

    report = {
        "size": [height, width],
        "iters": iterations,
        "ref_iters": max(1, ref_iterations),
        "fps_opt": 1.0 / t_opt,
        "fps_ref": 1.0 / t_ref,
        "ratio": t_ref / t_opt,
        "frame_ms_opt": 1e3 * t_opt,
        "frame_ms_ref": 1e3 * t_ref,
    }
    if jobs > 1:
        ptimes = []
        with ThreadPoolExecutor(jobs) as pool:
            for _ in range(iterations):
                t0 = time.perf_counter()
                _slice_apply_parallel(A, g, C, pool, jobs)
                ptimes.append(time.perf_counter() - t0)
        report["jobs"] = jobs
        report["fps_opt_parallel"] = 1.0 / float(np.median(ptimes))
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)
