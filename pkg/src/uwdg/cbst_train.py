"""Toy training loop for the conditional bilateral stylizer."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .image_model import default_domains, realize_domain, render_latent, synthesize_underwater
from .nn import Adam
from .stylizer import StyleTargets, StylizerConfig, StylizerNet, style_targets_from_images

CURVE_FIELDS = ("step", "total", "content", "style", "laplacian", "mask")


@dataclass
class CBSTTrainConfig:
    n_content: int = 8
    n_styles: int = 2
    image_size: int = 128
    steps: int = 400
    batch_size: int = 4
    lr: float = 2e-3
    seed: int = 0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    net: dict = field(default_factory=lambda: {
        "tap_widths": (4, 8, 16, 32),
        "block_widths": (8, 16, 32),
        "local_width": 32,
        "global_width": 32,
        "low_res": 128,
    })

    @classmethod
    def from_dict(cls, d: dict) -> "CBSTTrainConfig":
        d = dict(d)
        w = losses.LossWeights.from_dict(d.pop("weights", {}))
        cfg = cls(weights=w, **{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        return cfg


@dataclass
class CBSTData:
    content: np.ndarray  # (n, s, s, 3)
    masks: np.ndarray  # (n, s, s)
    boxes: list
    targets: StyleTargets
    content_taps: list


def make_cbst_data(cfg: CBSTTrainConfig, net: StylizerNet) -> CBSTData:
    s = cfg.image_size
    imgs, boxes = [], []
    for i in range(cfg.n_content):
        img, box = render_latent(i % 4, s, np.random.default_rng([cfg.seed, 5000 + i]))
        imgs.append(img)
        boxes.append(box)
    content = np.stack(imgs)
    masks = np.stack([losses.build_mask([b], s, s) for b in boxes])
    per_style = []
    for spec in default_domains(cfg.n_styles, cfg.seed):
        t, B = realize_domain(spec, s, s)
        per_style.append(np.stack([synthesize_underwater(c, t, B) for c in content]))
    targets = style_targets_from_images(net.extractor, per_style)
    c_taps, _ = net.extractor.forward(content.astype(net.dtype))
    return CBSTData(content, masks, boxes, targets, c_taps)


def cbst_loss_and_grads(net: StylizerNet, data: CBSTData, idx, styles, w: losses.LossWeights, need_grads=True):
    """Forward the stylizer on content ``idx`` with ``styles`` and return component
    values, the weighted total and (optionally) parameter gradients."""
    idx = np.asarray(idx)
    C = data.content[idx].astype(net.dtype)
    C_low = C  # toy content is already at the low resolution
    (A, g, O), cache = net.forward(C_low, C, styles)
    taps_O, ecache = net.extractor.forward(O)
    Lc = losses.content_loss(taps_O[-1], data.content_taps[-1][idx])
    Ls = losses.style_loss(taps_O, data.targets.for_styles(styles))
    Lr = losses.laplacian_reg(A)
    Lm = losses.mask_loss(O, C, data.masks[idx])
    total = losses.cbst_total_loss(Lc, Ls, Lr, Lm, w)
    comps = {"total": total.value, "content": Lc.value, "style": Ls.value, "laplacian": Lr.value, "mask": Lm.value}
    if not need_grads:
        return comps, None, O
    dtaps = [total.grads.get(f"tap{i}") for i in range(len(taps_O))]
    dtaps[-1] = total.grads["F_O"] if dtaps[-1] is None else dtaps[-1] + total.grads["F_O"]
    dO = total.grads["O"] + net.extractor.backward(dtaps, ecache)
    grads = net.backward(total.grads["A"], dO, cache)
    return comps, grads, O


def evaluate_cbst(net, data, cfg):
    """Mean components over every (content, style) pair and the mean in-box |O - C|."""
    n = len(data.content)
    sums = dict.fromkeys(CURVE_FIELDS[1:], 0.0)
    inbox = []
    for s in range(cfg.n_styles):
        comps, _, O = cbst_loss_and_grads(net, data, np.arange(n), np.full(n, s), cfg.weights, need_grads=False)
        for k in sums:
            sums[k] += comps[k] / cfg.n_styles
        for i, (x, y, bw, bh) in enumerate(data.boxes):
            diff = np.abs(O[i] - data.content[i])[y : y + bh, x : x + bw]
            inbox.append(float(diff.mean()))
    sums["inbox_change"] = float(np.mean(inbox))
    return sums


def train_cbst(cfg: CBSTTrainConfig, progress=None):
    net = StylizerNet(StylizerConfig.from_dict({**cfg.net, "n_styles": cfg.n_styles, "seed": cfg.seed}))
    data = make_cbst_data(cfg, net)
    rng = np.random.default_rng([cfg.seed, 303])
    opt = Adam(cfg.lr)
    initial = evaluate_cbst(net, data, cfg)
    curve = []
    for step in range(cfg.steps):
        idx = rng.choice(cfg.n_content, size=min(cfg.batch_size, cfg.n_content), replace=False)
        styles = rng.integers(0, cfg.n_styles, size=len(idx))
        comps, grads, _ = cbst_loss_and_grads(net, data, idx, styles, cfg.weights)
        opt.step(net.params, grads)
        curve.append({"step": step, **{k: comps[k] for k in CURVE_FIELDS[1:]}})
        if progress is not None:
            progress(step, comps)
    final = evaluate_cbst(net, data, cfg)
    summary = {"config": _config_echo(cfg), "initial": initial, "final": final, "ratio": final["total"] / initial["total"]}
    return net, curve, summary


def _config_echo(cfg: CBSTTrainConfig) -> dict:
    d = asdict(cfg)
    d["net"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["net"].items()}
    return d


def write_curve(curve: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        wr.writeheader()
        for row in curve:
            wr.writerow({k: row[k] for k in CURVE_FIELDS})
