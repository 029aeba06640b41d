"""Conditional bilateral stylizer: predicts a bilateral grid of affine colour
transforms from a low-resolution content image and a style id, slices it with a
learned guidance map and applies it to the full-resolution image.

All tensors are NHWC.  The feature extractor is a fixed seeded convolution
stack standing in for pretrained perceptual features; its four taps sit at
strides 1, 2, 4 and 8.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .bilateral import GRID_SHAPE, apply_affine_backward, identity_grid, slice_grid_backward, slice_grid_batched

BLOB_MAGIC = b"SNET"
_BLOB_HEAD = struct.Struct("<4sI")


class NetFormatError(ValueError):
    pass


@dataclass
class StylizerConfig:
    n_styles: int = 2
    tap_widths: tuple = (8, 16, 32, 64)
    block_widths: tuple = (16, 32, 64)
    local_width: int = 64
    global_width: int = 64
    guide_width: int = 8
    low_res: int = 256
    grid_shape: tuple = GRID_SHAPE
    seed: int = 0
    fuse_init_scale: float = 0.01

    def __post_init__(self):
        self.tap_widths = tuple(int(v) for v in self.tap_widths)
        self.block_widths = tuple(int(v) for v in self.block_widths)
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        if len(self.tap_widths) != 4 or len(self.block_widths) != 3:
            raise ValueError("need four tap widths and three splatting block widths")
        if self.block_widths != self.tap_widths[1:]:
            raise ValueError("splatting block widths must equal the widths of taps 2-4 they are added to")
        if self.n_styles < 1:
            raise ValueError("n_styles must be >= 1")
        gh, gw, _ = self.grid_shape
        if gh != gw or self.low_res % (8 * gh) or self.low_res < 8 * gh:
            raise ValueError(f"low_res {self.low_res} must be a multiple of 8 * grid size {gh}")

    @property
    def trail_stride(self) -> int:
        return self.low_res // (8 * self.grid_shape[0])

    @classmethod
    def from_dict(cls, d: dict) -> "StylizerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _conv_shape(k, cin, cout):
    return (k, k, cin, cout)


class Extractor:
    """Fixed random conv stack: tap1 (stride 1) .. tap4 (stride 8)."""

    def __init__(self, widths=(8, 16, 32, 64), seed=0, dtype=np.float64, params=None):
        self.widths = tuple(widths)
        if params is None:
            rng = np.random.default_rng([seed, 101])
            params = {}
            cin = 3
            for i, c in enumerate(self.widths):
                params[f"ext{i}_w"] = nn.he_init(rng, _conv_shape(3, cin, c), 9 * cin, dtype)
                params[f"ext{i}_b"] = np.zeros(c, dtype)
                cin = c
        self.params = params

    def forward(self, x):
        taps, caches = [], []
        h = x
        for i in range(len(self.widths)):
            h, c1 = nn.conv2d_forward(h, self.params[f"ext{i}_w"], self.params[f"ext{i}_b"], stride=1 if i == 0 else 2)
            h, c2 = nn.leaky_relu_forward(h)
            taps.append(h)
            caches.append((c1, c2))
        return taps, caches

    def backward(self, dtaps, caches):
        """Input gradient given per-tap gradients (``None`` entries mean zero)."""
        dh = None
        for i in reversed(range(len(self.widths))):
            g = dtaps[i]
            if dh is not None:
                g = dh if g is None else g + dh
            if g is None:
                continue
            c1, c2 = caches[i]
            g = nn.leaky_relu_backward(g, c2)
            dh, _, _ = nn.conv2d_backward(g, c1)
        return dh


def _pointwise_forward(x, w, b):
    return x @ w + b, (x, w)


def _pointwise_backward(dout, cache):
    x, w = cache
    dw = np.tensordot(x, dout, axes=(list(range(x.ndim - 1)), list(range(dout.ndim - 1))))
    return dout @ w.T, dw, dout.reshape(-1, dout.shape[-1]).sum(axis=0)


class StylizerNet:
    def __init__(self, config: StylizerConfig, dtype=np.float32, params=None, extractor_params=None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.extractor = Extractor(config.tap_widths, config.seed, self.dtype, extractor_params)
        self.params = params if params is not None else self._init_params()
        self._identity = identity_grid(config.grid_shape, self.dtype)

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 202])
        dt = self.dtype
        p = {}

        def conv(name, k, cin, cout, scale=1.0):
            p[f"{name}_w"] = nn.he_init(rng, _conv_shape(k, cin, cout), k * k * cin, dt) * dt.type(scale)
            p[f"{name}_b"] = np.zeros(cout, dt)

        def cin(name, width):
            p[f"{name}_gamma"] = np.ones((cfg.n_styles, width), dt)
            p[f"{name}_beta"] = np.zeros((cfg.n_styles, width), dt)

        prev = cfg.tap_widths[0]
        for b, wd in enumerate(cfg.block_widths):
            conv(f"blk{b}_conv1", 3, prev, wd)
            cin(f"blk{b}_cin", wd)
            conv(f"blk{b}_conv2", 3, wd, wd)
            cin(f"tap{b + 1}_cin", wd)
            prev = wd
        conv("trail1", 3, prev, cfg.local_width)
        conv("trail2", 3, cfg.local_width, cfg.local_width)
        conv("local1", 3, cfg.local_width, cfg.local_width)
        conv("local2", 3, cfg.local_width, cfg.local_width)
        conv("glob1", 3, cfg.local_width, cfg.global_width)
        conv("glob2", 3, cfg.global_width, cfg.global_width)
        gsz = cfg.grid_shape[0] // 4
        fan = gsz * gsz * cfg.global_width
        p["fc1_w"] = nn.he_init(rng, (fan, cfg.global_width), fan, dt)
        p["fc1_b"] = np.zeros(cfg.global_width, dt)
        p["fc2_w"] = nn.he_init(rng, (cfg.global_width, cfg.local_width), cfg.global_width, dt)
        p["fc2_b"] = np.zeros(cfg.local_width, dt)
        n_out = cfg.grid_shape[2] * 12
        p["fuse_w"] = nn.he_init(rng, (cfg.local_width, n_out), cfg.local_width, dt) * dt.type(cfg.fuse_init_scale)
        p["fuse_b"] = np.zeros(n_out, dt)
        g = cfg.guide_width
        p["guide1_w"] = nn.he_init(rng, (3, g), 3, dt)
        p["guide1_b"] = np.zeros(g, dt)
        p["guide2_w"] = nn.he_init(rng, (g, g), g, dt)
        p["guide2_b"] = np.zeros(g, dt)
        p["guide3_w"] = nn.he_init(rng, (g, 1), g, dt)
        p["guide3_b"] = np.zeros(1, dt)
        return p

    # ------------------------------------------------------------------ parts
    def grid_forward(self, C_low, style):
        """Low-res image and style ids -> grid ``(N, gh, gw, gd, 3, 4)``."""
        cfg = self.config
        p = self.params
        N = C_low.shape[0]
        taps, _ = self.extractor.forward(C_low)
        caches = {}
        h = taps[0]
        for b in range(3):
            h, caches[f"b{b}c1"] = nn.conv2d_forward(h, p[f"blk{b}_conv1_w"], p[f"blk{b}_conv1_b"], stride=2)
            h, caches[f"b{b}n"] = nn.cin_forward(h, style, p[f"blk{b}_cin_gamma"], p[f"blk{b}_cin_beta"])
            h, caches[f"b{b}r1"] = nn.leaky_relu_forward(h)
            h, caches[f"b{b}c2"] = nn.conv2d_forward(h, p[f"blk{b}_conv2_w"], p[f"blk{b}_conv2_b"], stride=1)
            t, caches[f"t{b}n"] = nn.cin_forward(taps[b + 1], style, p[f"tap{b + 1}_cin_gamma"], p[f"tap{b + 1}_cin_beta"])
            h, caches[f"b{b}r2"] = nn.leaky_relu_forward(h + t)
        h, caches["tr1"] = nn.conv2d_forward(h, p["trail1_w"], p["trail1_b"])
        h, caches["tr1r"] = nn.leaky_relu_forward(h)
        h, caches["tr2"] = nn.conv2d_forward(h, p["trail2_w"], p["trail2_b"], stride=cfg.trail_stride)
        feat, caches["tr2r"] = nn.leaky_relu_forward(h)

        loc, caches["l1"] = nn.conv2d_forward(feat, p["local1_w"], p["local1_b"])
        loc, caches["l1r"] = nn.leaky_relu_forward(loc)
        loc, caches["l2"] = nn.conv2d_forward(loc, p["local2_w"], p["local2_b"])

        gl, caches["g1"] = nn.conv2d_forward(feat, p["glob1_w"], p["glob1_b"], stride=2)
        gl, caches["g1r"] = nn.leaky_relu_forward(gl)
        gl, caches["g2"] = nn.conv2d_forward(gl, p["glob2_w"], p["glob2_b"], stride=2)
        gl, caches["g2r"] = nn.leaky_relu_forward(gl)
        caches["gshape"] = gl.shape
        gl, caches["fc1"] = nn.linear_forward(gl.reshape(N, -1), p["fc1_w"], p["fc1_b"])
        gl, caches["fc1r"] = nn.leaky_relu_forward(gl)
        gl, caches["fc2"] = nn.linear_forward(gl, p["fc2_w"], p["fc2_b"])

        fused, caches["fr"] = nn.leaky_relu_forward(loc + gl[:, None, None, :])
        out, caches["fuse"] = _pointwise_forward(fused, p["fuse_w"], p["fuse_b"])
        gh, gw, gd = cfg.grid_shape
        A = out.reshape(N, gh, gw, gd, 3, 4) + self._identity
        return A, caches

    def grid_backward(self, dA, caches, grads):
        p = self.params
        N = dA.shape[0]
        dout = dA.reshape(N, dA.shape[1], dA.shape[2], -1)
        dfused, grads["fuse_w"], grads["fuse_b"] = _pointwise_backward(dout, caches["fuse"])
        d = nn.leaky_relu_backward(dfused, caches["fr"])
        dloc = d
        dgl = d.sum(axis=(1, 2))

        dgl, grads["fc2_w"], grads["fc2_b"] = nn.linear_backward(dgl, caches["fc2"])
        dgl = nn.leaky_relu_backward(dgl, caches["fc1r"])
        dgl, grads["fc1_w"], grads["fc1_b"] = nn.linear_backward(dgl, caches["fc1"])
        dgl = nn.leaky_relu_backward(dgl.reshape(caches["gshape"]), caches["g2r"])
        dgl, grads["glob2_w"], grads["glob2_b"] = nn.conv2d_backward(dgl, caches["g2"])
        dgl = nn.leaky_relu_backward(dgl, caches["g1r"])
        dfeat, grads["glob1_w"], grads["glob1_b"] = nn.conv2d_backward(dgl, caches["g1"])

        dloc, grads["local2_w"], grads["local2_b"] = nn.conv2d_backward(dloc, caches["l2"])
        dloc = nn.leaky_relu_backward(dloc, caches["l1r"])
        dl, grads["local1_w"], grads["local1_b"] = nn.conv2d_backward(dloc, caches["l1"])
        dfeat = dfeat + dl

        dh = nn.leaky_relu_backward(dfeat, caches["tr2r"])
        dh, grads["trail2_w"], grads["trail2_b"] = nn.conv2d_backward(dh, caches["tr2"])
        dh = nn.leaky_relu_backward(dh, caches["tr1r"])
        dh, grads["trail1_w"], grads["trail1_b"] = nn.conv2d_backward(dh, caches["tr1"])
        for b in reversed(range(3)):
            dh = nn.leaky_relu_backward(dh, caches[f"b{b}r2"])
            # tap branch: extractor is frozen, only the CIN pair learns
            _, grads[f"tap{b + 1}_cin_gamma"], grads[f"tap{b + 1}_cin_beta"] = nn.cin_backward(dh, caches[f"t{b}n"])
            dh, grads[f"blk{b}_conv2_w"], grads[f"blk{b}_conv2_b"] = nn.conv2d_backward(dh, caches[f"b{b}c2"])
            dh = nn.leaky_relu_backward(dh, caches[f"b{b}r1"])
            dh, grads[f"blk{b}_cin_gamma"], grads[f"blk{b}_cin_beta"] = nn.cin_backward(dh, caches[f"b{b}n"])
            dh, grads[f"blk{b}_conv1_w"], grads[f"blk{b}_conv1_b"] = nn.conv2d_backward(dh, caches[f"b{b}c1"])
        return grads

    def guidance_forward(self, C):
        p = self.params
        h, c1 = _pointwise_forward(C, p["guide1_w"], p["guide1_b"])
        h, r1 = nn.leaky_relu_forward(h)
        h, c2 = _pointwise_forward(h, p["guide2_w"], p["guide2_b"])
        h, r2 = nn.leaky_relu_forward(h)
        h, c3 = _pointwise_forward(h, p["guide3_w"], p["guide3_b"])
        g, s = nn.sigmoid_forward(h[..., 0])
        return g, (c1, r1, c2, r2, c3, s)

    def guidance_backward(self, dg, cache, grads):
        c1, r1, c2, r2, c3, s = cache
        d = nn.sigmoid_backward(dg, s)[..., None]
        d, grads["guide3_w"], grads["guide3_b"] = _pointwise_backward(d, c3)
        d = nn.leaky_relu_backward(d, r2)
        d, grads["guide2_w"], grads["guide2_b"] = _pointwise_backward(d, c2)
        d = nn.leaky_relu_backward(d, r1)
        _, grads["guide1_w"], grads["guide1_b"] = _pointwise_backward(d, c1)
        return grads

    # --------------------------------------------------------------- pipeline
    def forward(self, C_low, C_full, style):
        """Returns ``(A, g, O)`` for batched inputs plus the cache for :meth:`backward`."""
        C_low = np.asarray(C_low, dtype=self.dtype)
        C_full = np.asarray(C_full, dtype=self.dtype)
        style = np.broadcast_to(np.asarray(style), (C_low.shape[0],))
        A, gcache = self.grid_forward(C_low, style)
        g, hcache = self.guidance_forward(C_full)
        field_, scache = slice_grid_batched(A, g)
        O = np.einsum("...rc,...c->...r", field_[..., :3], C_full) + field_[..., 3]
        return (A, g, O), (gcache, hcache, scache, field_, C_full)

    def backward(self, dA, dO, cache):
        gcache, hcache, scache, field_, C_full = cache
        grads: dict[str, np.ndarray] = {}
        _, dfield = apply_affine_backward(dO, C_full, field_)
        dA_slice, dg = slice_grid_backward(dfield, scache)
        total_dA = dA_slice if dA is None else dA_slice + dA
        self.grid_backward(total_dA, gcache, grads)
        self.guidance_backward(dg, hcache, grads)
        return grads

    def stylize(self, C_full, style, low_res=None):
        """Single ``(h, w, 3)`` image -> stylized image, grid and guidance."""
        C_full = np.asarray(C_full, dtype=self.dtype)
        C_low = resize_image(C_full, low_res or self.config.low_res)
        (A, g, O), _ = self.forward(C_low[None], C_full[None], style)
        return O[0], A[0], g[0]

    # -------------------------------------------------------------- plumbing
    def astype(self, dtype) -> "StylizerNet":
        dt = np.dtype(dtype)
        return StylizerNet(
            self.config,
            dt,
            {k: v.astype(dt) for k, v in self.params.items()},
            {k: v.astype(dt) for k, v in self.extractor.params.items()},
        )

    def make_identity(self) -> "StylizerNet":
        """Zero the fusion layer so every predicted grid is the identity transform."""
        self.params["fuse_w"][...] = 0
        self.params["fuse_b"][...] = 0
        return self

    def to_bytes(self) -> bytes:
        tensors = {f"net/{k}": v for k, v in self.params.items()}
        tensors.update({f"extractor/{k}": v for k, v in self.extractor.params.items()})
        return pack_tensors({"kind": "stylizer", "config": asdict(self.config)}, tensors)

    @classmethod
    def from_bytes(cls, buf: bytes, dtype=np.float32) -> "StylizerNet":
        meta, tensors = unpack_tensors(buf)
        if meta.get("kind") != "stylizer":
            raise NetFormatError(f"expected a stylizer blob, got kind={meta.get('kind')!r}")
        cfg = StylizerConfig.from_dict(meta["config"])
        net = {k[4:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("net/")}
        ext = {k[10:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("extractor/")}
        ref = StylizerNet(cfg, dtype)
        missing = set(ref.params) - set(net) | set(ref.extractor.params) - set(ext)
        if missing:
            raise NetFormatError(f"blob is missing tensors: {sorted(missing)}")
        for k, v in net.items():
            if k in ref.params and ref.params[k].shape != v.shape:
                raise NetFormatError(f"tensor {k} has shape {v.shape}, expected {ref.params[k].shape}")
        return cls(cfg, dtype, net, ext)


def pack_tensors(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """JSON header (metadata + tensor index) followed by little-endian f32 payloads."""
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({**meta, "tensors": index}, sort_keys=True).encode()
    return _BLOB_HEAD.pack(BLOB_MAGIC, len(header)) + header + b"".join(chunks)


def unpack_tensors(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _BLOB_HEAD.size:
        raise NetFormatError("parameter blob truncated before header")
    magic, hlen = _BLOB_HEAD.unpack_from(buf)
    if magic != BLOB_MAGIC:
        raise NetFormatError(f"bad parameter blob magic {magic!r}")
    start = _BLOB_HEAD.size
    try:
        meta = json.loads(buf[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise NetFormatError(f"corrupt parameter header: {e}") from None
    payload = memoryview(buf)[start + hlen :]
    tensors = {}
    for t in meta.pop("tensors", []):
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        lo, hi = t["offset"], t["offset"] + 4 * n
        if hi > len(payload):
            raise NetFormatError(f"tensor {t['name']} runs past the end of the blob")
        tensors[t["name"]] = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(t["shape"]).copy()
    return meta, tensors


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Area/bilinear resize of ``(h, w, 3)`` to ``size x size`` (identity when already that size)."""
    if img.shape[0] == size and img.shape[1] == size:
        return img
    from PIL import Image

    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(img[:, :, c], dtype=np.float32), mode="F").resize((size, size), Image.BILINEAR)) for c in range(3)]
    return np.stack(chans, axis=-1).astype(img.dtype)


@dataclass
class StyleTargets:
    """Per-style, per-tap channel mean/std targets for the style loss."""

    means: list = field(default_factory=list)  # [style][tap] -> (C,)
    stds: list = field(default_factory=list)

    def for_styles(self, styles) -> list[tuple[np.ndarray, np.ndarray]]:
        styles = np.asarray(styles)
        n_taps = len(self.means[0])
        return [(np.stack([self.means[s][t] for s in styles]), np.stack([self.stds[s][t] for s in styles])) for t in range(n_taps)]


def style_targets_from_images(extractor: Extractor, images_per_style: list[np.ndarray]) -> StyleTargets:
    """Average extractor statistics over each style's exemplar images ``(N, h, w, 3)``."""
    from .losses import channel_stats

    means, stds = [], []
    for imgs in images_per_style:
        taps, _ = extractor.forward(np.asarray(imgs, dtype=extractor.params["ext0_w"].dtype))
        ms, ss = [], []
        for F in taps:
            mu, sd = channel_stats(F)
            ms.append(mu.mean(axis=0))
            ss.append(sd.mean(axis=0))
        means.append(ms)
        stds.append(ss)
    return StyleTargets(means, stds)
