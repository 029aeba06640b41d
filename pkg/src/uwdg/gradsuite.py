"""Finite-difference pre-flight for every loss and for the paired TinyNet pipeline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .gradcheck import grad_check
from .mixup import MixupConfig, paired_backward, paired_forward
from .tinynet import TinyNet, TinyNetConfig

TOL = 1e-4
STEP = 1e-5

LOSS_CHECKS = (
    "mask_loss",
    "content_loss",
    "style_loss",
    "laplacian_reg",
    "cbst_total_loss",
    "sc_loss",
    "ssc_loss",
    "ssmc_loss",
    "softmax_cross_entropy",
    "total_task_loss",
)
NET_CHECKS = ("tinynet_standard", "tinynet_detach", "tinynet_output_before_mixup", "tinynet_input_level", "stylizer")


@dataclass
class CheckRow:
    name: str
    instances: int
    checked: int
    kinks: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOL


def kink_signature(obj):
    """Every boolean or integer array reachable inside ``obj``: ReLU masks,
    selections, floor indices.  Equal signatures mean no kink was crossed."""
    out = []

    def walk(o):
        if isinstance(o, np.ndarray):
            if o.dtype == bool or np.issubdtype(o.dtype, np.integer):
                out.append(o)
        elif isinstance(o, dict):
            for k in sorted(o, key=str):
                walk(o[k])
        elif isinstance(o, (list, tuple)):
            for v in o:
                walk(v)

    walk(obj)
    return out


def _run(name, make, n_instances, seed, corrupt=False, max_coords=None):
    worst, checked, kinks = 0.0, 0, 0
    for inst in range(n_instances):
        rng = np.random.default_rng([seed, inst])
        params, fn, analytic = make(rng)
        if corrupt:
            key = sorted(analytic)[0]
            analytic = dict(analytic)
            analytic[key] = analytic[key] * 1.01 + 1e-3
        res = grad_check(fn, params, analytic, STEP, max_coords=max_coords, rng=rng)
        worst = max(worst, res.max_rel_error)
        checked += res.n_checked
        kinks += res.n_kink
    return CheckRow(name, n_instances, checked, kinks, worst)


# ----------------------------------------------------------------- loss makers
def _mask(rng):
    h, w = rng.integers(2, 6, size=2)
    O = rng.uniform(0, 1, (h, w, 3))
    C = rng.uniform(0, 1, (h, w, 3))
    M = losses.build_mask([(0, 0, int(rng.integers(1, w + 1)), int(rng.integers(1, h + 1)))], h, w)
    p = {"O": O}

    def fn(q):
        return losses.mask_loss(q["O"], C, M).value, np.sign(q["O"] - C)

    return p, fn, {"O": losses.mask_loss(O, C, M).grads["O"]}


def _content(rng):
    shape = (2, 3, 3, 4)
    p = {"F_O": rng.standard_normal(shape), "F_C": rng.standard_normal(shape)}
    return p, lambda q: losses.content_loss(q["F_O"], q["F_C"]).value, losses.content_loss(p["F_O"], p["F_C"]).grads


def _style(rng):
    shapes = [(2, 4, 4, 3), (2, 2, 2, 5)]
    p = {f"tap{i}": rng.standard_normal(s) for i, s in enumerate(shapes)}
    targets = [(rng.standard_normal(s[-1]), rng.uniform(0.5, 1.5, s[-1])) for s in shapes]
    fn = lambda q: losses.style_loss([q["tap0"], q["tap1"]], targets).value  # noqa: E731
    return p, fn, losses.style_loss([p["tap0"], p["tap1"]], targets).grads


def _laplacian(rng):
    p = {"A": rng.standard_normal((3, 4, 2, 3, 4))}
    return p, lambda q: losses.laplacian_reg(q["A"]).value, losses.laplacian_reg(p["A"]).grads


def _cbst_total(rng):
    w = losses.LossWeights()
    C = rng.uniform(0, 1, (3, 3, 3))
    M = losses.build_mask([(1, 1, 2, 2)], 3, 3)
    F_C = rng.standard_normal((3, 3, 2))
    targets = [(rng.standard_normal(2), rng.uniform(0.5, 1.5, 2))]
    p = {"O": rng.uniform(0, 1, (3, 3, 3)), "F_O": rng.standard_normal((3, 3, 2)), "tap0": rng.standard_normal((4, 4, 2)), "A": rng.standard_normal((2, 2, 2, 3, 4))}

    def total(q):
        return losses.cbst_total_loss(
            losses.content_loss(q["F_O"], F_C),
            losses.style_loss([q["tap0"]], targets),
            losses.laplacian_reg(q["A"]),
            losses.mask_loss(q["O"], C, M),
            w,
        )

    t = total(p)
    return p, lambda q: (total(q).value, np.sign(q["O"] - C)), {k: t.grads[k] for k in p}


def _pair_maker(loss, delta=None):
    def make(rng):
        shape = (2, 4, 4, 3)
        p = {"F1": rng.standard_normal(shape), "F2": rng.standard_normal(shape)}
        if delta is None:
            f = lambda q: loss(q["F1"], q["F2"])  # noqa: E731
            sig = lambda q: None  # noqa: E731
        else:
            f = lambda q: loss(q["F1"], q["F2"], delta) if loss is losses.ssmc_loss else loss(q["F1"], q["F2"])  # noqa: E731
            sig = lambda q: kink_signature(losses.selective_info(q["F1"], q["F2"], delta))  # noqa: E731
        return p, (lambda q: (f(q).value, sig(q))), f(p).grads

    return make


def _cross_entropy(rng):
    p = {"logits": rng.standard_normal((5, 4))}
    labels = rng.integers(0, 4, size=5)
    return p, lambda q: losses.softmax_cross_entropy(q["logits"], labels).value, losses.softmax_cross_entropy(p["logits"], labels).grads


def _total_task(rng):
    labels = rng.integers(0, 4, size=2)
    p = {"logits": rng.standard_normal((2, 4)), "F1": rng.standard_normal((2, 4, 4, 3)), "F2": rng.standard_normal((2, 4, 4, 3))}
    lam = float(rng.choice([0.0, 1.0, 5.0, 10.0, 15.0]))

    def total(q):
        return losses.total_task_loss(losses.softmax_cross_entropy(q["logits"], labels), losses.ssmc_loss(q["F1"], q["F2"], 0.1), lam)

    fn = lambda q: (total(q).value, kink_signature(losses.selective_info(q["F1"], q["F2"], 0.1)))  # noqa: E731
    return p, fn, total(p).grads


_LOSS_MAKERS = {
    "mask_loss": _mask,
    "content_loss": _content,
    "style_loss": _style,
    "laplacian_reg": _laplacian,
    "cbst_total_loss": _cbst_total,
    "sc_loss": _pair_maker(losses.sc_loss),
    "ssc_loss": _pair_maker(losses.ssc_loss, 0.0),
    "ssmc_loss": _pair_maker(losses.ssmc_loss, 0.1),
    "softmax_cross_entropy": _cross_entropy,
    "total_task_loss": _total_task,
}


# ------------------------------------------------------------------ pipelines
def paired_loss(net: TinyNet, I1, I2, labels, cfg: MixupConfig, lambdas, lambda_ssmc=10.0, delta=0.1, ssmc_layer=None, mix_partner=None):
    """Cross-entropy on the main head plus weighted SSMC between streams;
    returns (value, signature, paired result, loss terms)."""
    ssmc_layer = ssmc_layer or net.n_stages
    res = paired_forward(net, I1, I2, cfg, lambdas=lambdas, mix_partner=mix_partner)
    logits, hcache = net.head_forward(res.main.head_input)
    ce = losses.softmax_cross_entropy(logits, labels)
    F1 = res.main.stages[ssmc_layer]
    F2 = res.assist.stages[ssmc_layer]
    ss = losses.ssmc_loss(F1, F2, delta)
    total = losses.total_task_loss(ce, ss, lambda_ssmc)
    sig = kink_signature([res.main.caches, res.assist.caches, losses.selective_info(F1, F2, delta)])
    return total, sig, res, (logits, hcache, ce, ss)


def paired_grads(net, res, extras, lambda_ssmc, ssmc_layer=None):
    ssmc_layer = ssmc_layer or net.n_stages
    logits, hcache, ce, ss = extras
    grads: dict = {}
    d_head = net.head_backward(ce.grads["logits"], hcache, grads)
    main_key = ssmc_layer
    pg = paired_backward(
        net,
        res,
        d_head,
        d_main={main_key: lambda_ssmc * ss.grads["F1"]},
        d_assist={main_key: lambda_ssmc * ss.grads["F2"]},
    )
    for k, v in pg.items():
        grads[k] = grads[k] + v if k in grads else v
    return grads


def _tinynet_maker(mode):
    def make(rng):
        net = TinyNet(TinyNetConfig(widths=(3, 4, 5, 6), n_classes=3, seed=int(rng.integers(1 << 30))))
        I1 = rng.uniform(0, 1, (2, 16, 16, 3))
        I2 = rng.uniform(0, 1, (2, 16, 16, 3))
        labels = rng.integers(0, 3, size=2)
        layers = (0,) if mode == "input_level" else (2, 3, 4)
        cfg = MixupConfig(layers=(2, 3, 4), mode=mode)
        lambdas = {k: rng.uniform(0.1, 0.9, size=2) for k in layers}
        total, _, res, extras = paired_loss(net, I1, I2, labels, cfg, lambdas)
        analytic = paired_grads(net, res, extras, 10.0)
        frozen = net.copy()
        partner = paired_forward(frozen, I2, None, MixupConfig(mode="off")).main if mode == "detach" else None

        def fn(q):
            net.params = q
            t, sig, _, _ = paired_loss(net, I1, I2, labels, cfg, lambdas, mix_partner=partner)
            return t.value, sig

        return net.params, fn, analytic

    return make


def _stylizer(rng):
    from .cbst_train import CBSTTrainConfig, cbst_loss_and_grads, make_cbst_data
    from .stylizer import StylizerConfig, StylizerNet

    cfg = CBSTTrainConfig(n_content=1, n_styles=2, image_size=128, seed=int(rng.integers(1 << 30)))
    scfg = StylizerConfig.from_dict({**cfg.net, "tap_widths": (2, 3, 4, 5), "block_widths": (3, 4, 5), "local_width": 4, "global_width": 4, "n_styles": 2, "seed": cfg.seed, "fuse_init_scale": 1.0})
    net = StylizerNet(scfg, np.float64)
    data = make_cbst_data(cfg, net)
    style = np.array([int(rng.integers(0, 2))])
    _, analytic, _ = cbst_loss_and_grads(net, data, [0], style, cfg.weights)

    def fn(q):
        net.params = q
        C = data.content[[0]]
        (A, g, O), cache = net.forward(C, C, style)
        taps_O, ecache = net.extractor.forward(O)
        comps, _, _ = cbst_loss_and_grads(net, data, [0], style, cfg.weights, need_grads=False)
        return comps["total"], kink_signature([cache, ecache, np.sign(O - C)])

    return net.params, fn, analytic


_NET_MAKERS = {
    "tinynet_standard": _tinynet_maker("standard"),
    "tinynet_detach": _tinynet_maker("detach"),
    "tinynet_output_before_mixup": _tinynet_maker("output_before_mixup"),
    "tinynet_input_level": _tinynet_maker("input_level"),
    "stylizer": _stylizer,
}


def run_suite(scope: str = "all", instances: int = 20, seed: int = 0, corrupt: str | None = None) -> list[CheckRow]:
    names = []
    if scope in ("loss", "all"):
        names += list(LOSS_CHECKS)
    if scope in ("net", "all"):
        names += list(NET_CHECKS)
    if not names:
        raise ValueError(f"unknown scope {scope!r}")
    rows = []
    for name in names:
        if name in _LOSS_MAKERS:
            rows.append(_run(name, _LOSS_MAKERS[name], instances, seed, corrupt == name))
        elif name == "stylizer":
            rows.append(_run(name, _NET_MAKERS[name], 2, seed, corrupt == name, max_coords=20))
        else:
            rows.append(_run(name, _NET_MAKERS[name], instances, seed, corrupt == name, max_coords=30))
    return rows
