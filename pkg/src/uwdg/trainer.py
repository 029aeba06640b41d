"""Leave-one-domain-out training harness, evaluation and feature statistics."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from .gradcheck import grad_check
from .gradsuite import kink_signature
from .image_model import LabeledSample
from .mixup import MixupConfig, paired_backward, paired_forward
from .nn import make_optimizer
from .tinynet import TinyNet, TinyNetConfig

CONTRASTIVE = {"ssmc", "ssc", "sc"}

# variant -> (augment with other-domain renderings, paired streams, mixup mode, contrastive loss, random single layer)
VARIANTS = {
    "deepall": (False, False, "off", None, False),
    "cbst_only": (True, False, "off", None, False),
    "cbst_dmx": (True, True, "standard", None, False),
    "dmx_in": (True, True, "input_level", None, False),
    "dmx_star": (True, True, "standard", None, True),
    "output_before_mixup": (True, True, "output_before_mixup", None, False),
    "detach": (True, True, "detach", None, False),
    "dmcl_sc": (True, True, "standard", "sc", False),
    "dmcl_ssc": (True, True, "standard", "ssc", False),
    "dmcl": (True, True, "standard", "ssmc", False),
}
MAIN_VARIANTS = ("deepall", "cbst_only", "cbst_dmx", "dmcl")
LAMBDA_GRID = (0.0, 1.0, 5.0, 10.0, 15.0)
STAGE_GRID = ((1,), (2,), (3,), (4,), (1, 2), (2, 3), (3, 4), (1, 2, 3), (2, 3, 4), (1, 2, 3, 4))


class CorpusError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = "dmcl"
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    steps: int = 3000
    seed: int = 0
    lambda_ssmc: float = 10.0
    delta: float = 0.1
    ssmc_layer: int = 4
    ssmc_on_mixed: bool = True
    mixup: MixupConfig = field(default_factory=MixupConfig)
    flip: bool = True
    widths: tuple = (8, 16, 32, 64)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        for name in ("lr", "batch_size", "steps"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        for name in ("momentum", "weight_decay", "lambda_ssmc", "delta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not 1 <= self.ssmc_layer <= len(self.widths):
            raise ValueError(f"ssmc_layer must lie in 1..{len(self.widths)}")
        if isinstance(self.mixup, dict):
            self.mixup = MixupConfig.from_dict(self.mixup)
        self.widths = tuple(self.widths)

    @property
    def augment(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def paired(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def contrastive(self) -> str | None:
        return VARIANTS[self.variant][3]

    def mix_config(self, layer=None) -> MixupConfig:
        mode = VARIANTS[self.variant][2]
        layers = self.mixup.layers if layer is None else (layer,)
        return MixupConfig(layers=layers, alpha=self.mixup.alpha, mode=mode)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "mixup" in d:
            d["mixup"] = MixupConfig.from_dict(d["mixup"])
        if "weights" in d:
            w = losses.LossWeights.from_dict(d.pop("weights"))
            d.setdefault("lambda_ssmc", w.lambda_ssmc)
            d.setdefault("delta", w.delta)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixup"] = self.mixup.to_dict()
        d["widths"] = list(self.widths)
        return d


# ---------------------------------------------------------------------- data
@dataclass
class DGSplit:
    """Images indexed by (domain, pair group) with a train/eval split of groups."""

    images: dict
    labels: dict
    sources: tuple
    held_out: int
    train_groups: np.ndarray
    eval_groups: np.ndarray

    def native(self, g: int) -> int:
        return self.sources[g % len(self.sources)]


def make_split(corpus: list[LabeledSample], sources, held_out: int, eval_fraction: float = 0.25) -> DGSplit:
    sources = tuple(int(s) for s in sources)
    if held_out in sources:
        raise CorpusError("held-out domain cannot also be a source domain")
    images, labels = {}, {}
    for s in corpus:
        images[(s.domain, s.pair_group)] = s.image
        labels[s.pair_group] = s.label
    domains = {d for d, _ in images}
    missing = [d for d in (*sources, held_out) if d not in domains]
    if missing:
        raise CorpusError(f"corpus has no samples for domains {missing}")
    groups = np.array(sorted(labels))
    # every pair group must exist in every domain we touch
    for d in (*sources, held_out):
        if any((d, int(g)) not in images for g in groups):
            raise CorpusError(f"domain {d} does not cover every pair group")
    n_eval = max(1, int(round(len(groups) * eval_fraction)))
    return DGSplit(images, labels, sources, held_out, groups[:-n_eval], groups[-n_eval:])


@dataclass
class Batch:
    I1: np.ndarray
    I2: np.ndarray | None
    labels: np.ndarray


def draw_batch(split: DGSplit, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """One minibatch.  Every variant consumes the rng identically so that variants
    differing only in their loss see the same data."""
    n = cfg.batch_size
    groups = rng.choice(split.train_groups, size=n, replace=len(split.train_groups) < n)
    coin = rng.random(n) < 0.5
    alt = rng.integers(0, max(1, len(split.sources) - 1), size=n)
    partner = rng.integers(0, max(1, len(split.sources) - 1), size=n)
    flips = rng.random(n) < 0.5
    I1, I2 = [], []
    for i, g in enumerate(groups):
        g = int(g)
        d1 = split.native(g)
        others = [d for d in split.sources if d != d1]
        if cfg.augment and coin[i] and others:
            # the source image or one of its other-domain renderings, at random
            d1 = others[alt[i] % len(others)]
        x1 = split.images[(d1, g)]
        if cfg.paired:
            rest = [d for d in split.sources if d != d1]
            if not rest:
                raise CorpusError("paired variants need at least two source domains")
            x2 = split.images[(rest[partner[i] % len(rest)], g)]
        if cfg.flip and flips[i]:
            x1 = x1[:, ::-1]
            if cfg.paired:
                x2 = x2[:, ::-1]
        I1.append(x1)
        if cfg.paired:
            I2.append(x2)
    labels = np.array([split.labels[int(g)] for g in groups])
    return Batch(np.stack(I1), np.stack(I2) if I2 else None, labels)


# ---------------------------------------------------------------------- loss
def _contrastive_term(kind, F1, F2, delta):
    if kind == "ssmc":
        return losses.ssmc_loss(F1, F2, delta), losses.selective_info(F1, F2, delta)
    if kind == "ssc":
        return losses.ssc_loss(F1, F2), losses.selective_info(F1, F2, 0.0)
    return losses.sc_loss(F1, F2), None


def batch_loss(net: TinyNet, batch: Batch, cfg: TrainConfig, mcfg: MixupConfig, rng=None, lambdas=None, need_grads=True, mix_partner=None):
    """Cross-entropy on the main head plus the weighted contrastive term.

    Returns ``(components, grads or None, signature, lambdas)``.
    """
    res = paired_forward(net, batch.I1, batch.I2, mcfg, rng=rng, lambdas=lambdas, mix_partner=mix_partner)
    logits, hcache = net.head_forward(res.main.head_input)
    ce = losses.softmax_cross_entropy(logits, batch.labels)
    comps = {"ce": ce.value, "contrastive": 0.0}
    sig_parts = [res.main.caches, res.assist.caches if res.assist else None]
    total = ce
    kind = cfg.contrastive
    k = cfg.ssmc_layer
    feats = res.main.stages if cfg.ssmc_on_mixed else res.main.pre_mix
    if kind is not None:
        term, info = _contrastive_term(kind, feats[k], res.assist.stages[k], cfg.delta)
        comps["contrastive"] = term.value
        sig_parts.append(info)
        total = losses.total_task_loss(ce, term, cfg.lambda_ssmc)
    comps["total"] = total.value
    comps["correct"] = int(np.sum(np.argmax(logits, axis=1) == batch.labels))
    sig = kink_signature(sig_parts)
    if not need_grads:
        return comps, None, sig, res.lambdas
    grads: dict = {}
    d_head = net.head_backward(total.grads["logits"], hcache, grads)
    d_main, d_pre, d_assist = {}, {}, {}
    if kind is not None:
        (d_main if cfg.ssmc_on_mixed else d_pre)[k] = cfg.lambda_ssmc * term.grads["F1"]
        d_assist[k] = cfg.lambda_ssmc * term.grads["F2"]
    for name, g in paired_backward(net, res, d_head, d_main, d_pre, d_assist).items():
        grads[name] = grads[name] + g if name in grads else g
    return comps, grads, sig, res.lambdas


def _step_mix_config(cfg: TrainConfig, rng) -> MixupConfig:
    if VARIANTS[cfg.variant][4]:
        return cfg.mix_config(int(rng.choice(cfg.mixup.layers)))
    return cfg.mix_config()


# ------------------------------------------------------------------- training
@dataclass
class TrainResult:
    net: TinyNet
    curve: list
    config: TrainConfig


CURVE_FIELDS = ("step", "total", "ce", "contrastive", "batch_acc")


def train(split: DGSplit, cfg: TrainConfig, progress=None) -> TrainResult:
    if cfg.paired and len(split.sources) < 2:
        raise CorpusError(f"variant {cfg.variant!r} needs at least two source domains")
    net = TinyNet(TinyNetConfig(widths=cfg.widths, n_classes=len(set(split.labels.values())), seed=cfg.seed))
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2024])
    curve = []
    for step in range(cfg.steps):
        batch = draw_batch(split, cfg, rng)
        mcfg = _step_mix_config(cfg, rng)
        comps, grads, _, _ = batch_loss(net, batch, cfg, mcfg, rng=rng)
        opt.step(net.params, grads)
        row = {"step": step, "total": comps["total"], "ce": comps["ce"], "contrastive": comps["contrastive"], "batch_acc": comps["correct"] / cfg.batch_size}
        curve.append(row)
        if progress is not None:
            progress(step, row)
    return TrainResult(net, curve, cfg)


def evaluate(net: TinyNet, images, labels) -> float:
    """Top-1 accuracy."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(net.predict(images) == labels))


def domain_set(split: DGSplit, domain: int, groups=None):
    groups = split.eval_groups if groups is None else groups
    return np.stack([split.images[(domain, int(g))] for g in groups]), np.array([split.labels[int(g)] for g in groups])


def smoothed(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    w = min(window, len(v))
    return np.convolve(v, np.ones(w) / w, mode="valid")


# ------------------------------------------------------------ feature stats
@dataclass
class FeatureStats:
    layers: list
    domains: list
    mean: dict  # (layer, domain) -> float
    variance: dict
    std_of_means: dict  # layer -> float or None when only one domain
    std_of_variances: dict

    def to_rows(self) -> list[dict]:
        rows = [{"layer": k, "domain": d, "mean": self.mean[k, d], "variance": self.variance[k, d]} for k in self.layers for d in self.domains]
        rows += [{"layer": k, "std_of_means": self.std_of_means[k], "std_of_variances": self.std_of_variances[k]} for k in self.layers]
        return rows

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layers),
            "domains": list(self.domains),
            "per_domain": [{"layer": k, "domain": d, "mean": self.mean[k, d], "variance": self.variance[k, d]} for k in self.layers for d in self.domains],
            "std_of_means": {str(k): v for k, v in self.std_of_means.items()},
            "std_of_variances": {str(k): v for k, v in self.std_of_variances.items()},
        }


STATS_FIELDS = ("layer", "domain", "mean", "variance", "std_of_means", "std_of_variances")


def feature_statistics(net: TinyNet, probes: dict, min_probes: int = 10) -> FeatureStats:
    """Per layer and domain: whole-tensor activation mean and variance per image,
    averaged over the probe images; per layer: population std of those across domains."""
    if not probes:
        raise ValueError("no probe sets given")
    domains = sorted(probes)
    layers = list(range(1, net.n_stages + 1))
    mean, var = {}, {}
    for d in domains:
        x = np.asarray(probes[d])
        if len(x) == 0:
            raise ValueError(f"empty probe set for domain {d}")
        if len(x) < min_probes:
            raise ValueError(f"domain {d} has {len(x)} probe images; need at least {min_probes}")
        acts, _ = net.forward(x)
        for k in layers:
            a = acts[k].reshape(len(x), -1)
            mean[k, d] = float(a.mean(axis=1).mean())
            var[k, d] = float(a.var(axis=1).mean())
    sm = {k: _spread([mean[k, d] for d in domains]) for k in layers}
    sv = {k: _spread([var[k, d] for d in domains]) for k in layers}
    return FeatureStats(layers, domains, mean, var, sm, sv)


def _spread(values) -> float | None:
    """Population std across domains; ``None`` for a single domain."""
    if len(values) < 2:
        return None
    v = np.asarray(values)
    # shifting by one member keeps identical values at exactly zero spread
    return float(np.std(v - v[0]))


def write_feature_stats(stats: FeatureStats, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=STATS_FIELDS)
        wr.writeheader()
        for row in stats.to_rows():
            wr.writerow({k: "" if row.get(k) is None else row.get(k) for k in STATS_FIELDS})


# ------------------------------------------------------------------ pre-flight
def preflight(cfg: TrainConfig, seed: int = 0, max_coords: int = 40) -> float:
    """Finite-difference check of one training step's gradient on a miniature
    float64 instance; returns the max relative error."""
    rng = np.random.default_rng([seed, 77])
    mini = replace(cfg, widths=(3, 4, 5, 6), batch_size=2, seed=seed)
    net = TinyNet(TinyNetConfig(widths=mini.widths, n_classes=3, seed=seed))
    I1 = rng.uniform(0, 1, (2, 16, 16, 3))
    batch = Batch(I1, rng.uniform(0, 1, (2, 16, 16, 3)) if cfg.paired else None, rng.integers(0, 3, size=2))
    mcfg = _step_mix_config(mini, rng)
    _, analytic, _, lambdas = batch_loss(net, batch, mini, mcfg, rng=rng)
    partner = None
    if mcfg.mode == "detach":
        partner = paired_forward(net.copy(), batch.I2, None, MixupConfig(mode="off")).main

    def fn(q):
        comps, _, sig, _ = batch_loss(net, batch, mini, mcfg, lambdas=lambdas, need_grads=False, mix_partner=partner)
        return comps["total"], sig

    return grad_check(fn, net.params, analytic, 1e-5, max_coords=max_coords, rng=rng).max_rel_error


# ------------------------------------------------------------------ experiment
@dataclass
class ExperimentConfig:
    n_domains: int = 4
    n_per_domain_per_class: int = 250
    n_classes: int = 4
    image_size: int = 32
    corpus_seed: int = 0
    held_out: int = 3
    sources: int | None = None  # restrict to the first n non-held-out domains
    eval_fraction: float = 0.25
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = MAIN_VARIANTS
    train: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)  # "lambda_ssmc" / "layers": values to sweep for dmcl
    stats_probes: int = 10
    preflight: bool = True
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("seeds", "variants"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        return d


def cells(ec: ExperimentConfig) -> list[tuple[str, TrainConfig]]:
    """Every (label, TrainConfig) in the grid, seeds excluded."""
    out = []
    base = dict(ec.train)
    for v in ec.variants:
        out.append((v, TrainConfig.from_dict({**base, "variant": v})))
    for lam in ec.grid.get("lambda_ssmc", ()):
        out.append((f"dmcl_lambda{lam:g}", TrainConfig.from_dict({**base, "variant": "dmcl", "lambda_ssmc": lam})))
    for layers in ec.grid.get("layers", ()):
        tag = "".join(str(k) for k in layers)
        mix = {**base.get("mixup", {}), "layers": list(layers)}
        out.append((f"dmcl_stages{tag}", TrainConfig.from_dict({**base, "variant": "dmcl", "mixup": mix})))
    return out


def build_split(ec: ExperimentConfig, corpus=None) -> DGSplit:
    from .image_model import generate_toy_corpus

    if corpus is None:
        corpus = generate_toy_corpus(ec.n_domains, ec.n_per_domain_per_class, ec.n_classes, ec.image_size, ec.corpus_seed)
    present = sorted({s.domain for s in corpus})
    sources = [d for d in present if d != ec.held_out]
    if ec.sources is not None:
        if not 1 <= ec.sources <= len(sources):
            raise CorpusError(f"sources must lie in 1..{len(sources)}")
        sources = sources[: ec.sources]
    return make_split(corpus, sources, ec.held_out, ec.eval_fraction)


def _run_cell(args):
    label, cfg, split, probes_n = args
    res = train(split, cfg)
    x, y = domain_set(split, split.held_out)
    acc = evaluate(res.net, x, y)
    src = [evaluate(res.net, *domain_set(split, d)) for d in split.sources]
    domains = (*split.sources, split.held_out)
    probes = {d: domain_set(split, d)[0][:probes_n] for d in domains}
    stats = feature_statistics(res.net, probes, min_probes=min(10, probes_n))
    row = {
        "variant": label,
        "seed": cfg.seed,
        "heldout_acc": acc,
        "source_acc": float(np.mean(src)),
        "final_loss": float(smoothed([r["total"] for r in res.curve])[-1]),
    }
    return row, res, stats


def run_dg_experiment(ec: ExperimentConfig, out_dir=None, corpus=None, progress=None, keep_nets=False) -> dict:
    """Train and evaluate every (cell, seed); returns the report dict and
    optionally writes report.json, summary.csv, rows.csv and loss curves."""
    split = build_split(ec, corpus)
    grid = cells(ec)
    if ec.preflight:
        for label, cfg in grid:
            err = preflight(cfg)
            if err > 1e-4:
                raise FloatingPointError(f"gradient pre-flight failed for {label}: max relative error {err:.3g}")
    jobs = [(label, replace(cfg, seed=s), split, ec.stats_probes) for label, cfg in grid for s in ec.seeds]
    if ec.jobs > 1:
        with ProcessPoolExecutor(ec.jobs) as ex:
            outputs = list(ex.map(_run_cell, jobs))
    else:
        outputs = []
        for j in jobs:
            outputs.append(_run_cell(j))
            if progress is not None:
                progress(outputs[-1][0])
    rows = [o[0] for o in outputs]
    summary, stats_summary = {}, {}
    for label, _ in grid:
        accs = [r["heldout_acc"] for r in rows if r["variant"] == label]
        summary[label] = {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "n": len(accs)}
        per_seed = [o[2] for o in outputs if o[0]["variant"] == label]
        stats_summary[label] = {
            "std_of_means": {str(k): float(np.mean([s.std_of_means[k] for s in per_seed])) for k in per_seed[0].layers},
            "std_of_variances": {str(k): float(np.mean([s.std_of_variances[k] for s in per_seed])) for k in per_seed[0].layers},
            "per_seed": [s.to_dict() for s in per_seed],
        }
    report = {
        "config": ec.to_dict(),
        "cells": {label: cfg.to_dict() for label, cfg in grid},
        "sources": list(split.sources),
        "held_out": split.held_out,
        "rows": rows,
        "summary": summary,
        "feature_stats": stats_summary,
    }
    if out_dir is not None:
        write_report(report, [(o[0], o[1]) for o in outputs], out_dir, keep_nets)
    if keep_nets:
        report = dict(report)
        report["_nets"] = {(o[0]["variant"], o[0]["seed"]): o[1].net for o in outputs}
    return report


def write_report(report: dict, results, out_dir, keep_nets=False) -> None:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["variant", "mean_heldout_acc", "std_heldout_acc", "n_seeds"])
        for label, s in report["summary"].items():
            wr.writerow([label, f"{s['mean']:.6f}", f"{s['std']:.6f}", s["n"]])
    with open(out / "rows.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(report["rows"][0]))
        wr.writeheader()
        wr.writerows(report["rows"])
    for row, res in results:
        stem = f"{row['variant']}_seed{row['seed']}"
        with open(out / "curves" / f"{stem}.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
            wr.writeheader()
            wr.writerows(res.curve)
        if keep_nets:
            (out / "nets").mkdir(exist_ok=True)
            (out / "nets" / f"{stem}.tnet").write_bytes(res.net.to_bytes())
