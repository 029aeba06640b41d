import numpy as np
import pytest

from uwdg.gradcheck import grad_check
from uwdg.mixup import (
    MixupConfig,
    MixupConfigError,
    mix,
    paired_backward,
    paired_forward,
    sample_mixup_ratio,
)
from uwdg.tinynet import TinyNet, TinyNetConfig


def net(seed=0, widths=(4, 5, 6, 7)):
    return TinyNet(TinyNetConfig(widths=widths, n_classes=3, seed=seed))


def images(seed, n=3, size=16):
    return np.random.default_rng(seed).uniform(0, 1, (n, size, size, 3))


def test_beta_one_is_uniform():
    x = sample_mixup_ratio(1.0, np.random.default_rng(0), size=100_000)
    ks = np.max(np.abs(np.sort(x) - (np.arange(1, x.size + 1) / x.size)))
    assert ks < 0.01
    assert x.min() >= 0 and x.max() <= 1


@pytest.mark.parametrize("alpha", [0.2, 1.0, 5.0])
def test_beta_mean_is_half(alpha):
    x = sample_mixup_ratio(alpha, np.random.default_rng(1), size=100_000)
    assert abs(x.mean() - 0.5) <= 0.01


def test_bad_alpha():
    with pytest.raises(MixupConfigError):
        sample_mixup_ratio(0.0, np.random.default_rng(0))
    with pytest.raises(MixupConfigError):
        MixupConfig(alpha=-1)
    with pytest.raises(MixupConfigError):
        MixupConfig(layers=(), mode="standard")
    with pytest.raises(MixupConfigError):
        MixupConfig(mode="sideways")
    MixupConfig(layers=(), mode="input_level")


def test_mix_examples():
    assert mix(2.0, 6.0, 0.25) == 5.0
    h1 = np.random.default_rng(2).standard_normal((2, 3, 3, 4))
    assert np.array_equal(mix(h1, h1 + 1, 1.0), h1)
    assert np.allclose(mix(h1, h1, 0.37), h1)
    with pytest.raises(ValueError):
        mix(h1, h1[:1], 0.5)


def test_nonexistent_layer():
    with pytest.raises(MixupConfigError):
        paired_forward(net(), images(0), images(1), MixupConfig(layers=(2, 5)), np.random.default_rng(0))


@pytest.mark.parametrize("mode", ["standard", "detach", "output_before_mixup", "input_level", "off"])
def test_unit_lambda_recovers_plain_forward(mode):
    b = net()
    I1, I2 = images(3), images(4)
    plain, logits = b.forward(I1)
    cfg = MixupConfig(mode=mode)
    lam = {k: 1.0 for k in (0, 1, 2, 3, 4)}
    res = paired_forward(b, I1, I2, cfg, lambdas=lam)
    for k in plain:
        assert np.array_equal(res.main.stages[k], plain[k])
    assert np.array_equal(b.head_forward(res.main.head_input)[0], logits)


def test_identical_streams_unchanged_by_mixing():
    b = net()
    I = images(5)
    plain, _ = b.forward(I)
    res = paired_forward(b, I, I.copy(), MixupConfig(), np.random.default_rng(0))
    for k in plain:
        assert np.allclose(res.main.stages[k], plain[k], atol=1e-13)


def test_assist_purity_and_convexity():
    b = net()
    I1, I2 = images(6), images(7)
    ref = None
    for cfg in (MixupConfig(layers=(1,)), MixupConfig(layers=(2, 3, 4), mode="detach"), MixupConfig(mode="output_before_mixup")):
        res = paired_forward(b, I1, I2, cfg, np.random.default_rng(11))
        if ref is None:
            ref = res.assist.stages
        for k in ref:
            assert np.array_equal(res.assist.stages[k], ref[k])
        for k in cfg.layers:
            lo = np.minimum(res.main.pre_mix[k], res.assist.stages[k])
            hi = np.maximum(res.main.pre_mix[k], res.assist.stages[k])
            assert np.all(res.main.stages[k] >= lo - 1e-12) and np.all(res.main.stages[k] <= hi + 1e-12)


def test_zero_lambda_everywhere_gives_assist():
    b = net()
    res = paired_forward(b, images(8), images(9), MixupConfig(), lambdas={2: 0.0, 3: 0.0, 4: 0.0})
    for k in (2, 3, 4):
        assert np.array_equal(res.main.stages[k], res.assist.stages[k])


def test_output_before_mixup_feeds_head_premix():
    b = net()
    res = paired_forward(b, images(10), images(11), MixupConfig(mode="output_before_mixup"), np.random.default_rng(1))
    assert res.main.head_input is res.main.pre_mix[4]
    assert not np.array_equal(res.main.stages[4], res.main.pre_mix[4])


def test_per_sample_lambdas_recorded():
    res = paired_forward(net(), images(12, n=5), images(13, n=5), MixupConfig(), np.random.default_rng(2))
    assert sorted(res.lambdas) == [2, 3, 4]
    assert all(v.shape == (5,) for v in res.lambdas.values())
    assert len(set(res.lambdas[2].tolist())) == 5


def _head_loss(b, res, W):
    logits, hc = b.head_forward(res.main.head_input)
    return float(np.sum(W * logits)), hc


def test_detach_drops_assist_path_exactly():
    # two-stage backbone, mixing at stage 1: standard minus detach is exactly the
    # gradient that flows into the assist stream through the (1 - lam) branch
    b = TinyNet(TinyNetConfig(widths=(3, 4), n_classes=2, seed=4))
    I1, I2 = images(14, n=2), images(15, n=2)
    W = np.random.default_rng(3).standard_normal((2, 2))
    lam = {1: np.array([0.3, 0.8])}
    grads = {}
    for mode in ("standard", "detach"):
        res = paired_forward(b, I1, I2, MixupConfig(layers=(1,), mode=mode), lambdas=lam)
        g = {}
        d_head = b.head_backward(W, b.head_forward(res.main.head_input)[1], g)
        for k, v in paired_backward(b, res, d_head).items():
            g[k] = g.get(k, 0) + v
        grads[mode] = g
    # stage-2 weights only see the main stream, so both modes agree there
    assert np.allclose(grads["standard"]["conv2_w"], grads["detach"]["conv2_w"])
    # stage-1 weights differ by exactly the assist contribution
    res = paired_forward(b, I1, I2, MixupConfig(layers=(1,)), lambdas=lam)
    dh = b.head_backward(W, b.head_forward(res.main.head_input)[1], {})
    up = b.stage_backward(2, dh, res.main.caches[2], {})
    assist = {}
    b.stage_backward(1, (1 - lam[1]).reshape(-1, 1, 1, 1) * up, res.assist.caches[1], assist)
    assert np.allclose(grads["standard"]["conv1_w"] - grads["detach"]["conv1_w"], assist["conv1_w"], atol=1e-14)


def test_detach_matches_constant_partner_finite_differences():
    b = TinyNet(TinyNetConfig(widths=(3, 4), n_classes=2, seed=5))
    I1, I2 = images(16, n=2), images(17, n=2)
    W = np.random.default_rng(4).standard_normal((2, 2))
    cfg = MixupConfig(layers=(1, 2), mode="detach")
    lam = {1: np.array([0.4, 0.6]), 2: np.array([0.5, 0.2])}
    res = paired_forward(b, I1, I2, cfg, lambdas=lam)
    g = {}
    d_head = b.head_backward(W, b.head_forward(res.main.head_input)[1], g)
    for k, v in paired_backward(b, res, d_head).items():
        g[k] = g.get(k, 0) + v
    frozen = paired_forward(b.copy(), I2, None, MixupConfig(mode="off")).main

    def fn(p):
        r = paired_forward(b, I1, I2, cfg, lambdas=lam, mix_partner=frozen)
        return _head_loss(b, r, W)[0], [r.main.caches[k][1] for k in r.main.caches]

    assert grad_check(fn, b.params, g).max_rel_error <= 1e-6
    # and the standard gradient is not what this function differentiates to
    res_s = paired_forward(b, I1, I2, MixupConfig(layers=(1, 2)), lambdas=lam)
    gs = {}
    d_head = b.head_backward(W, b.head_forward(res_s.main.head_input)[1], gs)
    for k, v in paired_backward(b, res_s, d_head).items():
        gs[k] = gs.get(k, 0) + v
    assert grad_check(fn, b.params, gs).max_rel_error > 1e-3
