import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwdg import losses as L


def test_build_mask():
    assert np.all(L.build_mask([], 3, 5) == 0.01)
    assert np.all(L.build_mask([(0, 0, 5, 3)], 3, 5) == 1.0)
    M = L.build_mask([(1, 1, 2, 2)], 4, 4)
    assert (M == 1).sum() == 4 and (M == 0.01).sum() == 12
    assert np.all(M[1:3, 1:3] == 1)
    with pytest.raises(ValueError):
        L.build_mask([(3, 3, 2, 2)], 4, 4)


def test_mask_loss_values():
    C = np.zeros((1, 1, 3))
    O = np.full((1, 1, 3), 0.1)
    assert L.mask_loss(O, C, np.ones((1, 1))).value == pytest.approx(0.1, abs=1e-15)
    assert L.mask_loss(O, C, np.full((1, 1), 0.01)).value == pytest.approx(0.001, abs=1e-15)
    assert L.mask_loss(C, C, np.ones((1, 1))).value == 0.0


def test_mask_loss_gradient_formula():
    rng = np.random.default_rng(0)
    O, C = rng.uniform(0, 1, (2, 3, 4, 3))
    M = L.build_mask([(1, 0, 2, 2)], 3, 4)
    g = L.mask_loss(O, C, M).grads["O"]
    assert np.allclose(g, np.sign(O - C) * M[..., None] / (3 * 4 * 3))


def test_content_loss_values():
    assert L.content_loss(np.zeros((2, 2, 1)), np.zeros((2, 2, 1))).value == 0
    assert L.content_loss(np.ones((3, 2, 2)), np.zeros((3, 2, 2))).value == 1
    assert L.content_loss(np.array([[[0.0, 0.0]]]), np.array([[[1.0, 3.0]]])).value == 5


def test_style_loss_values():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((5, 4, 3))
    mu, sd = L.channel_stats(F)
    assert L.style_loss([F], [(mu, sd)]).value == pytest.approx(0, abs=1e-24)
    off = mu.copy()
    off[1] += 2
    assert L.style_loss([F], [(off, sd)]).value == pytest.approx(4)


def test_style_loss_independent_stats():
    rng = np.random.default_rng(2)
    taps = [rng.standard_normal((6, 6, 2)), rng.standard_normal((3, 3, 4))]
    targets = [(rng.standard_normal(2), rng.uniform(0.5, 2, 2)), (rng.standard_normal(4), rng.uniform(0.5, 2, 4))]
    want = 0.0
    for F, (m, s) in zip(taps, targets):
        for c in range(F.shape[-1]):
            x = F[..., c].ravel()
            mean = sum(x) / len(x)
            std = (sum((v - mean) ** 2 for v in x) / len(x)) ** 0.5
            want += (mean - m[c]) ** 2 + (std - s[c]) ** 2
    assert L.style_loss(taps, targets).value == pytest.approx(want, rel=1e-12)


def test_laplacian_values():
    assert L.laplacian_reg(np.ones((4, 3, 2, 3, 4))).value == 0
    A = np.zeros((4, 3, 2, 3, 4))
    A[..., 0, 0] = np.arange(4)[:, None, None]
    n_i, n_j, n_k = 3 * 3 * 2, 4 * 2 * 2, 4 * 3 * 1
    assert L.laplacian_reg(A).value == pytest.approx(n_i / (n_i + n_j + n_k))


def test_cbst_total_weights():
    one = L.LossTerm(1.0)
    w = L.LossWeights()
    assert L.cbst_total_loss(one, one, one, one, w).value == pytest.approx(2.515, abs=1e-15)
    zero = L.LossTerm(0.0)
    assert L.cbst_total_loss(zero, zero, zero, zero, w).value == 0
    nil = L.LossWeights(0, 0, 0, 0)
    assert L.cbst_total_loss(one, one, one, one, nil).value == 0


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        L.LossWeights(lambda_c=-1)
    with pytest.raises(ValueError):
        L.LossWeights.from_dict({"delta": float("nan")})


def test_variance_and_sc_examples():
    a = np.array([[[1.0, 3.0]]])
    b = np.array([[[0.0, 1.0]]])
    assert L.variance_matrix(np.array([[[1.0]]]), np.array([[[3.0]]])).item() == 4
    assert np.array_equal(L.variance_matrix(a, b), L.variance_matrix(b, a))
    assert L.sc_loss(a, b).value == 5
    assert np.array_equal(L.sc_loss(a, b).grads["F1"], 2 * (a - b))
    with pytest.raises(ValueError):
        L.sc_loss(a, np.zeros((1, 1, 3)))


def test_k_maxpooling():
    H = np.random.default_rng(3).standard_normal((4, 4))
    assert L.k_maxpooling(H, 16) == pytest.approx(H.mean())
    one = np.zeros((4, 4))
    one[2, 1] = 10
    assert L.k_maxpooling(one, 1) == 10
    assert L.k_maxpooling(np.array([[4.0, 3.0], [2.0, 1.0]]), 2) == 3.5
    with pytest.raises(ValueError):
        L.k_maxpooling(one, 0)
    with pytest.raises(ValueError):
        L.k_maxpooling(one, 17)


def test_topk_count():
    assert L.topk_count(4, 4) == 1
    assert L.topk_count(2, 2) == 1
    assert L.topk_count(8, 8) == 4
    assert L.topk_count(5, 7) == 2


def test_ssc_and_ssmc_examples():
    F1 = np.zeros((4, 4, 1))
    F2 = np.zeros((4, 4, 1))
    F2[1, 2, 0] = 2
    assert L.ssc_loss(F1, F2).value == 4
    assert L.ssc_loss(F1, F1).value == 0
    a = np.array([[[1.0, 3.0]]])
    b = np.array([[[0.0, 1.0]]])
    assert L.ssmc_loss(a, b, delta=1.0).value == 1.5
    assert L.ssmc_loss(a, b, delta=2.5).value == 0.0
    with pytest.raises(ValueError):
        L.ssmc_loss(a, b, delta=-0.1)


def test_cross_entropy_at_optimum():
    logits = np.array([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
    ce = L.softmax_cross_entropy(logits, np.array([0, 2]))
    assert np.max(np.abs(ce.grads["logits"])) <= 1e-8


def test_total_task_loss():
    task, con = L.LossTerm(1.0), L.LossTerm(0.05)
    assert L.total_task_loss(task, con, 10).value == pytest.approx(1.5)
    assert L.total_task_loss(task, con, 0).value == 1.0
    for lam in (0, 1, 5, 10, 15):
        assert L.LossWeights(lambda_ssmc=lam).lambda_ssmc == lam


pairs = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).standard_normal((2, 4, 4, 3)))


@settings(max_examples=50, deadline=None)
@given(pairs, st.floats(0, 2), st.floats(0, 2))
def test_contrastive_properties(F, d1, d2):
    F1, F2 = F
    lo, hi = sorted((d1, d2))
    ssc = L.ssc_loss(F1, F2).value
    assert L.sc_loss(F1, F2).value == pytest.approx(L.sc_loss(F2, F1).value)
    assert ssc == L.ssc_loss(F2, F1).value
    assert L.ssmc_loss(F1, F2, lo).value == L.ssmc_loss(F2, F1, lo).value
    assert L.ssmc_loss(F1, F2, hi).value <= L.ssmc_loss(F1, F2, lo).value <= ssc
    assert L.ssmc_loss(F1, F2, 0.0).value == ssc
    for loss in (L.sc_loss, L.ssc_loss):
        assert loss(F1, F2).value >= 0


@settings(max_examples=30, deadline=None)
@given(pairs, st.floats(-4, 4))
def test_sc_scale_law(F, alpha):
    F1, F2 = F
    assert L.sc_loss(alpha * F1, alpha * F2).value == pytest.approx(alpha**2 * L.sc_loss(F1, F2).value, rel=1e-9, abs=1e-12)


def test_ssc_ignores_unselected_permutation():
    rng = np.random.default_rng(4)
    F1 = rng.standard_normal((8, 8, 2))
    F2 = np.zeros_like(F1)
    v = L.ssc_loss(F1, F2).value
    m = (F1**2).mean(axis=-1).ravel()
    keep = np.argsort(-m)[:4]
    rest = np.setdiff1d(np.arange(64), keep)
    flat = F1.reshape(64, 2).copy()
    flat[rest] = flat[rng.permutation(rest)]
    assert L.ssc_loss(flat.reshape(8, 8, 2), F2).value == v


def test_ties_are_deterministic():
    F1 = np.ones((4, 4, 2))
    F2 = np.zeros((4, 4, 2))
    a = L.ssc_loss(F1, F2)
    b = L.ssc_loss(F1, F2)
    assert a.value == 1.0
    assert np.array_equal(a.grads["F1"], b.grads["F1"])
