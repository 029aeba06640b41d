"""Four-stage strided conv classifier with an explicit backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .stylizer import NetFormatError, pack_tensors, unpack_tensors

MIN_INPUT = 16


@dataclass
class TinyNetConfig:
    widths: tuple = (8, 16, 32, 64)
    n_classes: int = 4
    in_channels: int = 3
    seed: int = 0


class TinyNet:
    """Stage ``k`` (1-based) is ``leaky_relu(conv3x3_stride2(h_{k-1}))``; the head is
    global average pooling followed by a linear classifier."""

    def __init__(self, config: TinyNetConfig | None = None, dtype=np.float64, params=None):
        self.config = config or TinyNetConfig()
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init_params()

    @property
    def n_stages(self) -> int:
        return len(self.config.widths)

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 404])
        p = {}
        cin = cfg.in_channels
        for k, c in enumerate(cfg.widths, start=1):
            p[f"conv{k}_w"] = nn.he_init(rng, (3, 3, cin, c), 9 * cin, self.dtype)
            p[f"conv{k}_b"] = np.zeros(c, self.dtype)
            cin = c
        p["head_w"] = nn.he_init(rng, (cin, cfg.n_classes), cin, self.dtype) * 0.5
        p["head_b"] = np.zeros(cfg.n_classes, self.dtype)
        return p

    def copy(self) -> "TinyNet":
        return TinyNet(self.config, self.dtype, {k: v.copy() for k, v in self.params.items()})

    def stage_forward(self, k: int, h):
        z, c1 = nn.conv2d_forward(h, self.params[f"conv{k}_w"], self.params[f"conv{k}_b"], stride=2)
        out, c2 = nn.leaky_relu_forward(z)
        return out, (c1, c2, z)

    def stage_backward(self, k: int, dout, cache, grads: dict):
        c1, c2, _ = cache
        dz = nn.leaky_relu_backward(dout, c2)
        dh, dw, db = nn.conv2d_backward(dz, c1)
        _accumulate(grads, f"conv{k}_w", dw)
        _accumulate(grads, f"conv{k}_b", db)
        return dh

    def head_forward(self, h):
        pooled, pc = nn.global_avg_pool_forward(h)
        logits, lc = nn.linear_forward(pooled, self.params["head_w"], self.params["head_b"])
        return logits, (pc, lc)

    def head_backward(self, dlogits, cache, grads: dict):
        pc, lc = cache
        dpool, dw, db = nn.linear_backward(dlogits, lc)
        _accumulate(grads, "head_w", dw)
        _accumulate(grads, "head_b", db)
        return nn.global_avg_pool_backward(dpool, pc)

    def check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] < MIN_INPUT or x.shape[2] < MIN_INPUT:
            raise ValueError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}, got {x.shape}")
        return x

    def forward(self, x):
        """Plain forward: returns ``(stage activations {k: h_k}, logits)``."""
        h = self.check_input(x)
        acts = {}
        for k in range(1, self.n_stages + 1):
            h, _ = self.stage_forward(k, h)
            acts[k] = h
        logits, _ = self.head_forward(h)
        return acts, logits

    def predict(self, x, batch_size=256):
        x = np.asarray(x)
        out = []
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(self.forward(x[i : i + batch_size])[1], axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def to_bytes(self) -> bytes:
        cfg = self.config
        meta = {"kind": "tinynet", "config": {"widths": list(cfg.widths), "n_classes": cfg.n_classes, "in_channels": cfg.in_channels, "seed": cfg.seed}}
        return pack_tensors(meta, self.params)

    @classmethod
    def from_bytes(cls, buf: bytes, dtype=np.float64) -> "TinyNet":
        meta, tensors = unpack_tensors(buf)
        if meta.get("kind") != "tinynet":
            raise NetFormatError(f"expected a tinynet blob, got kind={meta.get('kind')!r}")
        c = meta["config"]
        cfg = TinyNetConfig(tuple(c["widths"]), c["n_classes"], c.get("in_channels", 3), c.get("seed", 0))
        net = cls(cfg, dtype, {k: v.astype(dtype) for k, v in tensors.items()})
        missing = set(cls(cfg, dtype).params) - set(net.params)
        if missing:
            raise NetFormatError(f"blob is missing tensors: {sorted(missing)}")
        return net


def _accumulate(grads: dict, key: str, g):
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g
