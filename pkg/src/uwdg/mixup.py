"""Paired-stream forward/backward with feature-level mixing between streams.

The main stream sees ``I1``; the assist stream sees ``I2`` (same content,
other domain) and is never mixed.  At every layer ``k`` in the configured set
the main activation becomes ``lam_k * f_k(h1) + (1 - lam_k) * f_k(h2)``.
Because the assist activation at layer ``k`` is exactly ``f_k(h2)``, mixing
reuses it rather than recomputing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("standard", "detach", "output_before_mixup", "input_level", "off")
FEATURE_MODES = ("standard", "detach", "output_before_mixup")


class MixupConfigError(ValueError):
    pass


@dataclass
class MixupConfig:
    layers: tuple = (2, 3, 4)
    alpha: float = 1.0
    mode: str = "standard"

    def __post_init__(self):
        self.layers = tuple(sorted(int(k) for k in self.layers))
        if self.mode not in MODES:
            raise MixupConfigError(f"unknown mixup mode {self.mode!r}; expected one of {MODES}")
        if not self.alpha > 0:
            raise MixupConfigError(f"alpha must be > 0, got {self.alpha}")
        if not self.layers and self.mode in FEATURE_MODES:
            raise MixupConfigError(f"mode {self.mode!r} needs at least one mixup layer")

    @classmethod
    def from_dict(cls, d: dict) -> "MixupConfig":
        return cls(layers=tuple(d.get("layers", (2, 3, 4))), alpha=float(d.get("alpha", 1.0)), mode=d.get("mode", "standard"))

    def to_dict(self) -> dict:
        return {"layers": list(self.layers), "alpha": self.alpha, "mode": self.mode}


def sample_mixup_ratio(alpha: float, rng: np.random.Generator, size=None):
    """One draw (or ``size`` draws) from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise MixupConfigError(f"alpha must be > 0, got {alpha}")
    return rng.beta(alpha, alpha, size=size)


def mix(h1, h2, lam):
    """Convex combination ``lam * h1 + (1 - lam) * h2``; ``lam`` is a scalar or one value per sample."""
    h1 = np.asarray(h1)
    h2 = np.asarray(h2)
    if h1.shape != h2.shape:
        raise ValueError(f"cannot mix shapes {h1.shape} and {h2.shape}")
    lam = np.asarray(lam, dtype=h1.dtype)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("mixup ratio must lie in [0, 1]")
    if lam.ndim == 1:
        lam = lam.reshape((-1,) + (1,) * (h1.ndim - 1))
    return lam * h1 + (1 - lam) * h2


@dataclass
class ActivationSet:
    stages: dict = field(default_factory=dict)  # k -> h_k as propagated downstream
    pre_mix: dict = field(default_factory=dict)  # k -> f_k(h_{k-1}) before any mixing
    caches: dict = field(default_factory=dict)
    head_input: np.ndarray | None = None


@dataclass
class PairedResult:
    main: ActivationSet
    assist: ActivationSet | None
    lambdas: dict  # layer (0 for input level) -> per-sample ratios
    cfg: MixupConfig
    partner_given: bool = False


def _plain(backbone, x, start=1):
    acts = ActivationSet()
    h = x
    for k in range(start, backbone.n_stages + 1):
        h, cache = backbone.stage_forward(k, h)
        acts.stages[k] = acts.pre_mix[k] = h
        acts.caches[k] = cache
    acts.head_input = h
    return acts


def paired_forward(backbone, I1, I2, cfg: MixupConfig, rng: np.random.Generator | None = None, lambdas: dict | None = None, mix_partner: ActivationSet | None = None) -> PairedResult:
    """Run both streams.

    ``lambdas`` forces the per-layer ratios (layer -> scalar or per-sample
    array) instead of sampling; ``mix_partner`` supplies precomputed assist
    activations to mix with, which the backward pass treats as constants.
    """
    I1 = backbone.check_input(I1)
    n = I1.shape[0]
    bad = [k for k in cfg.layers if not 1 <= k <= backbone.n_stages]
    if bad and cfg.mode in FEATURE_MODES:
        raise MixupConfigError(f"mixup layers {bad} do not exist (backbone has stages 1..{backbone.n_stages})")
    assist = _plain(backbone, backbone.check_input(I2)) if I2 is not None else None
    partner = mix_partner if mix_partner is not None else assist

    def ratio(k):
        if lambdas is not None and k in lambdas:
            return np.broadcast_to(np.asarray(lambdas[k], dtype=backbone.dtype), (n,)).copy()
        if rng is None:
            raise ValueError("need an rng or explicit lambdas")
        return sample_mixup_ratio(cfg.alpha, rng, size=n)

    record = {}
    if cfg.mode == "off":
        main = _plain(backbone, I1)
    elif cfg.mode == "input_level":
        lam = record[0] = ratio(0)
        main = _plain(backbone, mix(I1, backbone.check_input(I2), lam))
    else:
        if partner is None:
            raise ValueError(f"mode {cfg.mode!r} needs the paired image I2")
        main = ActivationSet()
        h = I1
        for k in range(1, backbone.n_stages + 1):
            pre, cache = backbone.stage_forward(k, h)
            main.pre_mix[k] = pre
            main.caches[k] = cache
            if k in cfg.layers:
                lam = record[k] = ratio(k)
                h = mix(pre, partner.stages[k], lam)
            else:
                h = pre
            main.stages[k] = h
        last = backbone.n_stages
        main.head_input = main.pre_mix[last] if cfg.mode == "output_before_mixup" else main.stages[last]
    return PairedResult(main, assist, record, cfg, mix_partner is not None)


def paired_backward(backbone, res: PairedResult, d_head_input, d_main=None, d_main_pre=None, d_assist=None) -> dict:
    """Parameter gradients of a loss on the paired activations.

    ``d_head_input`` is the gradient w.r.t. ``res.main.head_input``;
    ``d_main``/``d_main_pre``/``d_assist`` map a layer to extra gradients
    on the post-mix main, pre-mix main and assist activations.
    """
    cfg = res.cfg
    n_st = backbone.n_stages
    d_main = dict(d_main or {})
    d_main_pre = dict(d_main_pre or {})
    d_assist = dict(d_assist or {})
    grads: dict = {}

    def add(dct, k, g):
        if g is None:
            return
        dct[k] = dct[k] + g if k in dct else g

    if cfg.mode == "output_before_mixup":
        add(d_main_pre, n_st, d_head_input)
    else:
        add(d_main, n_st, d_head_input)

    feature_mix = cfg.mode in FEATURE_MODES
    to_partner = feature_mix and cfg.mode != "detach" and not res.partner_given
    g_down = None
    for k in range(n_st, 0, -1):
        g = d_main.get(k)
        if g_down is not None:
            g = g_down if g is None else g + g_down
        if feature_mix and k in cfg.layers and g is not None:
            lam = res.lambdas[k].reshape((-1, 1, 1, 1))
            if to_partner:
                add(d_assist, k, (1 - lam) * g)
            g = lam * g
        pre = d_main_pre.get(k)
        if pre is not None:
            g = pre if g is None else g + pre
        g_down = backbone.stage_backward(k, g, res.main.caches[k], grads) if g is not None else None

    if res.assist is not None:
        g_down = None
        for k in range(n_st, 0, -1):
            g = d_assist.get(k)
            if g_down is not None:
                g = g_down if g is None else g + g_down
            g_down = backbone.stage_backward(k, g, res.assist.caches[k], grads) if g is not None else None
    return grads
