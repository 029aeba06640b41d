"""Training objectives with analytic gradients.

Each loss returns a :class:`LossTerm` whose ``grads`` maps an input name to the
gradient of the scalar value with respect to that input.  Feature maps are
``(H, W, C)`` or batched ``(N, H, W, C)``; batched losses average over ``N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_INSIDE = 1.0
MASK_OUTSIDE = 0.01


@dataclass
class LossWeights:
    lambda_c: float = 0.5
    lambda_sa: float = 1.0
    lambda_r: float = 0.015
    lambda_mask: float = 1.0
    lambda_ssmc: float = 10.0
    delta: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0, got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {k: float(d[k]) for k in ("lambda_c", "lambda_sa", "lambda_r", "lambda_mask", "lambda_ssmc", "delta") if k in d}
        return cls(**known)


@dataclass
class LossTerm:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def scaled(self, w: float) -> "LossTerm":
        return LossTerm(w * self.value, {k: w * g for k, g in self.grads.items()})


def combine(terms: list[tuple[float, LossTerm]]) -> LossTerm:
    """Weighted sum of loss terms; gradients with the same key are added."""
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for w, t in terms:
        value += w * t.value
        for k, g in t.grads.items():
            grads[k] = grads[k] + w * g if k in grads else w * g
    return LossTerm(value, grads)


def _same_shape(a, b, what="inputs"):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what} shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def build_mask(boxes, height: int, width: int) -> np.ndarray:
    """1 on pixels covered by any ``(x, y, w, h)`` box, 0.01 elsewhere."""
    M = np.full((height, width), MASK_OUTSIDE)
    for box in boxes:
        x, y, w, h = (int(v) for v in box)
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValueError(f"box {box} lies outside a {width}x{height} image")
        M[y : y + h, x : x + w] = MASK_INSIDE
    return M


def mask_loss(O, C, M) -> LossTerm:
    """Mask-weighted L1 change between output and content, averaged over h*w*3."""
    O, C = _same_shape(O, C, "image")
    M = np.asarray(M)
    if M.shape != O.shape[:-1]:
        raise ValueError(f"mask shape {M.shape} does not match image {O.shape}")
    d = O - C
    Mw = M[..., None]
    n = d.size
    return LossTerm(float(np.sum(np.abs(d) * Mw)) / n, {"O": np.sign(d) * Mw / n})


def content_loss(F_O, F_C) -> LossTerm:
    """Mean squared feature difference."""
    F_O, F_C = _same_shape(F_O, F_C, "feature")
    d = F_O - F_C
    g = 2.0 * d / d.size
    return LossTerm(float(np.mean(d * d)), {"F_O": g, "F_C": -g})


def channel_stats(F) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial mean and (population) std of ``(..., H, W, C)``."""
    F = np.asarray(F)
    mu = F.mean(axis=(-3, -2))
    sd = np.sqrt(((F - mu[..., None, None, :]) ** 2).mean(axis=(-3, -2)))
    return mu, sd


def style_loss(taps, targets) -> LossTerm:
    """Sum over taps of squared mean and std mismatches per channel.

    ``targets`` is one ``(mean, std)`` pair per tap; each may be ``(C,)`` or
    per-sample ``(N, C)``.  Gradients are returned under ``"tap{i}"``.
    """
    if len(targets) != len(taps):
        raise ValueError(f"need style statistics for {len(taps)} taps, got {len(targets)}")
    value = 0.0
    grads = {}
    for i, (F, (mu_t, sd_t)) in enumerate(zip(taps, targets)):
        F = np.asarray(F)
        batched = F.ndim == 4
        n_batch = F.shape[0] if batched else 1
        hw = F.shape[-3] * F.shape[-2]
        mu = F.mean(axis=(-3, -2))
        xc = F - mu[..., None, None, :]
        sd = np.sqrt((xc * xc).mean(axis=(-3, -2)))
        dmu = mu - mu_t
        dsd = sd - sd_t
        value += float(np.sum(dmu * dmu) + np.sum(dsd * dsd)) / n_batch
        safe = np.where(sd > 0, sd, 1.0)
        g_mu = 2.0 * dmu / (hw * n_batch)
        g_sd = np.where(sd > 0, 2.0 * dsd / (hw * safe * n_batch), 0.0)
        grads[f"tap{i}"] = g_mu[..., None, None, :] + xc * g_sd[..., None, None, :]
    return LossTerm(value, grads)


def laplacian_reg(A) -> LossTerm:
    """Mean over axis-adjacent cell pairs of the squared distance between their 12 coefficients.

    ``A`` is ``(gh, gw, gd, 3, 4)`` or batched with a leading axis.
    """
    A = np.asarray(A)
    batched = A.ndim == 6
    Ab = A if batched else A[None]
    gh, gw, gd = Ab.shape[1:4]
    n_pairs = (gh - 1) * gw * gd + gh * (gw - 1) * gd + gh * gw * (gd - 1)
    scale = 1.0 / (n_pairs * Ab.shape[0])
    value = 0.0
    g = np.zeros_like(Ab)
    for ax in (1, 2, 3):
        d = np.diff(Ab, axis=ax)
        value += float(np.sum(d * d))
        lo = [slice(None)] * 6
        hi = [slice(None)] * 6
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        g[tuple(hi)] += 2 * d
        g[tuple(lo)] -= 2 * d
    g *= scale
    return LossTerm(value * scale, {"A": g if batched else g[0]})


def cbst_total_loss(content: LossTerm, style: LossTerm, laplacian: LossTerm, mask: LossTerm, w: LossWeights) -> LossTerm:
    return combine([(w.lambda_c, content), (w.lambda_sa, style), (w.lambda_r, laplacian), (w.lambda_mask, mask)])


def variance_matrix(F1, F2) -> np.ndarray:
    F1, F2 = _same_shape(F1, F2, "feature")
    return (F1 - F2) ** 2


def _per_sample(F1, F2):
    F1, F2 = _same_shape(F1, F2, "feature")
    if F1.ndim == 3:
        return F1[None], F2[None], False
    if F1.ndim != 4:
        raise ValueError(f"features must be (H, W, C) or (N, H, W, C), got {F1.shape}")
    return F1, F2, True


def _unbatch(g, batched):
    return g if batched else g[0]


def sc_loss(F1, F2) -> LossTerm:
    """Squared Frobenius distance between paired features."""
    A, B, batched = _per_sample(F1, F2)
    d = A - B
    n = A.shape[0]
    g = 2.0 * d / n
    return LossTerm(float(np.sum(d * d)) / n, {"F1": _unbatch(g, batched), "F2": _unbatch(-g, batched)})


def topk_count(h: int, w: int) -> int:
    return max(1, (h * w) // 16)


def k_maxpooling(H, k: int) -> float:
    """Mean of the ``k`` largest entries of a 2-D map."""
    H = np.asarray(H)
    if not 1 <= k <= H.size:
        raise ValueError(f"k={k} outside [1, {H.size}]")
    flat = np.sort(H.ravel(), kind="stable")
    return float(flat[-k:].mean())


def _selective(F1, F2, delta: float) -> tuple[LossTerm, dict]:
    A, B, batched = _per_sample(F1, F2)
    n, h, w, c = A.shape
    k = topk_count(h, w)
    d = A - B
    m = (d * d).mean(axis=-1).reshape(n, h * w) - delta
    active = m > 0
    m = np.maximum(m, 0.0)
    # stable descending order keeps the selection deterministic under ties
    order = np.argsort(-m, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(m, order, axis=1)
    value = float(picked.mean(axis=1).sum()) / n
    sel = np.zeros((n, h * w), dtype=bool)
    np.put_along_axis(sel, order, True, axis=1)
    dm = (sel & active).astype(A.dtype) / (k * n)
    g = 2.0 * d * (dm.reshape(n, h, w, 1) / c)
    info = {"selected": sel.reshape(n, h, w), "active": active.reshape(n, h, w), "k": k}
    return LossTerm(value, {"F1": _unbatch(g, batched), "F2": _unbatch(-g, batched)}), info


def ssc_loss(F1, F2) -> LossTerm:
    """Top-k pooled per-pixel channel-mean variance, k = max(1, H*W // 16)."""
    return _selective(F1, F2, 0.0)[0]


def ssmc_loss(F1, F2, delta: float = 0.1) -> LossTerm:
    """As :func:`ssc_loss` but pixels whose mean variance is within ``delta`` contribute nothing."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return _selective(F1, F2, delta)[0]


def selective_info(F1, F2, delta: float = 0.0) -> dict:
    """Selection and margin masks of the selective losses (used to detect kinks)."""
    return _selective(F1, F2, delta)[1]


def softmax_cross_entropy(logits, labels) -> LossTerm:
    """Mean cross-entropy over the batch."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    value = -float(logp[np.arange(n), labels].sum()) / n
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    return LossTerm(value, {"logits": p / n})


def total_task_loss(task: LossTerm, contrastive: LossTerm, lambda_ssmc: float) -> LossTerm:
    if lambda_ssmc < 0:
        raise ValueError("lambda_ssmc must be >= 0")
    return combine([(1.0, task), (lambda_ssmc, contrastive)])
