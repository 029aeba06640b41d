"""Layer primitives with explicit backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the upstream gradient and that cache.  Feature maps are NHWC.
Convolution weights are ``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.01
CIN_EPS = 1e-5


def conv2d_forward(x, w, b, stride=1, pad=None):
    kh, kw = w.shape[:2]
    if pad is None:
        pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (N, Ho, Wo, Cin, kh, kw)
    out = np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1])) + b
    return out, (x.shape, xp.shape, win, w, stride, pad)


def conv2d_backward(dout, cache):
    x_shape, xp_shape, win, w, stride, pad = cache
    kh, kw = w.shape[:2]
    dw = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    n, ho, wo, _ = dout.shape
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dout @ w[i, j].T
    dx = dxp[:, pad : pad + x_shape[1], pad : pad + x_shape[2], :] if pad else dxp
    return dx, dw, db


def leaky_relu_forward(x, slope=LEAKY_SLOPE):
    pos = x > 0
    return np.where(pos, x, slope * x), (pos, slope)


def leaky_relu_backward(dout, cache):
    pos, slope = cache
    return np.where(pos, dout, slope * dout)


def sigmoid_forward(x):
    y = 1.0 / (1.0 + np.exp(-x))
    return y, y


def sigmoid_backward(dout, y):
    return dout * y * (1.0 - y)


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, shape):
    n, h, w, c = shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), shape).copy()


def cin_forward(x, style, gamma, beta, eps=CIN_EPS):
    """Conditional instance norm: per-sample, per-channel normalisation, then the
    affine pair selected by ``style`` (int or one id per sample)."""
    n_styles = gamma.shape[0]
    style = np.broadcast_to(np.asarray(style), (x.shape[0],))
    if np.any(style < 0) or np.any(style >= n_styles):
        raise KeyError(f"unknown style id in {np.unique(style).tolist()} (have {n_styles} styles)")
    mu = x.mean(axis=(1, 2), keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=(1, 2), keepdims=True))
    s = sigma + eps
    u = xc / s
    g = gamma[style][:, None, None, :]
    out = g * u + beta[style][:, None, None, :]
    return out, (xc, sigma, s, u, g, style, n_styles)


def cin_backward(dout, cache):
    xc, sigma, s, u, g, style, n_styles = cache
    m = xc.shape[1] * xc.shape[2]
    gu = dout * g
    dgamma_s = (dout * u).sum(axis=(1, 2))
    dbeta_s = dout.sum(axis=(1, 2))
    dgamma = np.zeros((n_styles, xc.shape[3]), dtype=dout.dtype)
    dbeta = np.zeros_like(dgamma)
    np.add.at(dgamma, style, dgamma_s)
    np.add.at(dbeta, style, dbeta_s)
    safe = np.where(sigma > 0, sigma, 1.0)
    proj = (gu * xc).sum(axis=(1, 2), keepdims=True)
    dx = (gu - gu.mean(axis=(1, 2), keepdims=True)) / s - xc * proj / (s * s * m * safe) * (sigma > 0)
    return dx, dgamma, dbeta


class SGD:
    def __init__(self, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for k in sorted(grads):
            g = grads[k] + self.weight_decay * params[k] if self.weight_decay else grads[k]
            v = self.velocity.get(k)
            v = g if v is None else self.momentum * v + g
            self.velocity[k] = v
            params[k] -= self.lr * v


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def make_optimizer(kind: str, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(lr, momentum, weight_decay)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
