"""Underwater image formation and synthetic multi-domain corpora.

An underwater observation is modelled per pixel and per colour channel as

    I = J * t + (1 - t) * B

with ``J`` the clear latent image, ``t`` the transmission map and ``B`` the
homogeneous background light.  Images are ``(h, w, 3)`` float arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageDraw

SHAPE_FAMILIES = ("disc", "square", "triangle", "star", "cross", "ring", "diamond", "hexagon")
MIN_IMAGE_SIZE = 16
DEFAULT_T_MIN = 0.05


class ValidationError(ValueError):
    pass


def _check_image(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValidationError(f"{name} must have shape (h, w, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def _check_light(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if b.shape != (3,):
        raise ValidationError(f"background light must be a 3-vector, got shape {b.shape}")
    if np.any(b < 0) or np.any(b > 1):
        raise ValidationError(f"background light components must lie in [0, 1], got {b.tolist()}")
    return b


def _check_pair(J: np.ndarray, t: np.ndarray) -> None:
    if J.shape != t.shape:
        raise ValidationError(f"shape mismatch: image {J.shape} vs transmission {t.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise ValidationError("transmission values must lie in [0, 1]")


def synthesize_underwater(J, t, B) -> np.ndarray:
    """Push a clear image through the formation model."""
    J = _check_image("J", J)
    t = _check_image("t", t)
    B = _check_light(B)
    _check_pair(J, t)
    return J * t + (1.0 - t) * B


def recover_latent(I, t, B, t_min: float = DEFAULT_T_MIN) -> np.ndarray:
    """Invert the formation model; ``t`` must stay above ``t_min`` everywhere."""
    if not t_min > 0:
        raise ValidationError("t_min must be positive")
    I = _check_image("I", I)
    t = _check_image("t", t)
    B = _check_light(B)
    _check_pair(I, t)
    if np.any(t < t_min):
        raise ValidationError(f"transmission below t_min={t_min} (min {float(t.min()):.4g}); inversion is ill-conditioned")
    return (I - (1.0 - t) * B) / t


@dataclass(frozen=True)
class DomainSpec:
    """Parametric water type: per-channel base transmission minus a seeded ramp."""

    base: tuple[float, float, float]
    amplitude: float
    background: tuple[float, float, float]
    seed: int = 0

    def __post_init__(self):
        base = tuple(float(v) for v in self.base)
        bg = tuple(float(v) for v in self.background)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "background", bg)
        if len(base) != 3 or any(not (0 < v <= 1) for v in base):
            raise ValidationError(f"base transmission must be 3 values in (0, 1], got {base}")
        _check_light(bg)
        if not (0 <= self.amplitude < min(base)):
            raise ValidationError(f"ramp amplitude must lie in [0, min(base)), got {self.amplitude}")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "DomainSpec":
        d = json.loads(text)
        return cls(base=tuple(d["base"]), amplitude=d["amplitude"], background=tuple(d["background"]), seed=int(d.get("seed", 0)))


def smooth_ramp(height: int, width: int, seed: int) -> np.ndarray:
    """Linear ramp along a seeded direction, rescaled to span [0, 1]."""
    theta = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    r = math.cos(theta) * xx + math.sin(theta) * yy
    span = r.max() - r.min()
    if span == 0:
        return np.zeros((height, width))
    return (r - r.min()) / span


def realize_domain(spec: DomainSpec, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    r = smooth_ramp(height, width, spec.seed)
    t = np.asarray(spec.base)[None, None, :] - spec.amplitude * r[:, :, None]
    return t, np.asarray(spec.background, dtype=np.float64)


# Fixed water types for the first few domains; more are drawn from the corpus seed.
_PALETTE = (
    DomainSpec((0.55, 0.85, 0.75), 0.15, (0.10, 0.55, 0.45), seed=11),
    DomainSpec((0.45, 0.75, 0.90), 0.15, (0.05, 0.35, 0.65), seed=12),
    DomainSpec((0.60, 0.70, 0.55), 0.20, (0.35, 0.55, 0.30), seed=13),
    DomainSpec((0.20, 0.35, 0.45), 0.10, (0.15, 0.45, 0.40), seed=14),
)


def default_domains(n_domains: int, seed: int = 0) -> list[DomainSpec]:
    specs = list(_PALETTE[:n_domains])
    rng = np.random.default_rng([seed, 7919])
    while len(specs) < n_domains:
        base = rng.uniform(0.3, 0.95, size=3)
        specs.append(
            DomainSpec(
                tuple(base),
                float(rng.uniform(0.0, 0.8) * base.min()),
                tuple(rng.uniform(0.0, 0.8, size=3)),
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return specs


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    domain: int
    pair_group: int
    box: tuple[int, int, int, int]
    latent: np.ndarray = field(repr=False, default=None)


def _shape_polygon(family: str, cx: float, cy: float, r: float, angle: float) -> list[tuple[float, float]] | None:
    def ring_pts(n, radii, phase):
        pts = []
        for i in range(n):
            a = phase + 2 * math.pi * i / n
            rad = radii[i % len(radii)]
            pts.append((cx + rad * math.cos(a), cy + rad * math.sin(a)))
        return pts

    if family == "square":
        return ring_pts(4, [r * math.sqrt(2) * 0.8], angle + math.pi / 4)
    if family == "triangle":
        return ring_pts(3, [r], angle - math.pi / 2)
    if family == "star":
        return ring_pts(10, [r, 0.42 * r], angle - math.pi / 2)
    if family == "diamond":
        return ring_pts(4, [r, 0.6 * r], angle)
    if family == "hexagon":
        return ring_pts(6, [r], angle)
    if family == "cross":
        w = 0.33 * r
        base = [(-w, -r), (w, -r), (w, -w), (r, -w), (r, w), (w, w), (w, r), (-w, r), (-w, w), (-r, w), (-r, -w), (-w, -w)]
        ca, sa = math.cos(angle), math.sin(angle)
        return [(cx + ca * x - sa * y, cy + sa * x + ca * y) for x, y in base]
    return None


def render_shape(family: str, size: int, cx: float, cy: float, r: float, angle: float, supersample: int = 4) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1] for one shape."""
    s = supersample
    canvas = Image.new("L", (size * s, size * s), 0)
    draw = ImageDraw.Draw(canvas)
    if family == "disc":
        draw.ellipse([(cx - r) * s, (cy - r) * s, (cx + r) * s, (cy + r) * s], fill=255)
    elif family == "ring":
        draw.ellipse([(cx - r) * s, (cy - r) * s, (cx + r) * s, (cy + r) * s], fill=255)
        ri = 0.55 * r
        draw.ellipse([(cx - ri) * s, (cy - ri) * s, (cx + ri) * s, (cy + ri) * s], fill=0)
    else:
        poly = _shape_polygon(family, cx, cy, r, angle)
        if poly is None:
            raise ValidationError(f"unknown shape family {family!r}")
        draw.polygon([(x * s, y * s) for x, y in poly], fill=255)
    small = canvas.resize((size, size), Image.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency seeded noise: a coarse random lattice upsampled bilinearly."""
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3)).astype(np.float32)
    chans = [np.asarray(Image.fromarray(coarse[:, :, c], mode="F").resize((size, size), Image.BILINEAR)) for c in range(3)]
    tex = np.stack(chans, axis=-1).astype(np.float64)
    tint = rng.uniform(0.25, 0.6, size=3)
    return np.clip(tint + 0.25 * (tex - 0.5), 0.0, 1.0)


def render_latent(label: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """One clear latent image holding a single shape of class ``label`` and its bounding box."""
    family = SHAPE_FAMILIES[label]
    bg = textured_background(size, rng)
    r = rng.uniform(0.22, 0.34) * size
    margin = r + 1
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    angle = rng.uniform(0, 2 * math.pi)
    cover = render_shape(family, size, cx, cy, r, angle)
    color = rng.uniform(0.6, 1.0, size=3)
    color[rng.integers(0, 3)] *= rng.uniform(0.3, 1.0)
    img = bg * (1 - cover[:, :, None]) + color[None, None, :] * cover[:, :, None]
    ys, xs = np.nonzero(cover > 0.05)
    if len(xs) == 0:
        box = (0, 0, size, size)
    else:
        box = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return img, box


def generate_toy_corpus(
    n_domains: int = 4,
    n_per_domain_per_class: int = 25,
    n_classes: int = 4,
    image_size: int = 64,
    seed: int = 0,
    domains: list[DomainSpec] | None = None,
) -> list[LabeledSample]:
    """Labelled shapes rendered once as latents and pushed through every domain.

    Sample order is domain-major, then pair group. Pair group ``g`` holds the
    same latent image in every domain.
    """
    if not 2 <= n_classes <= 8:
        raise ValidationError("n_classes must lie in [2, 8]")
    if n_domains < 2:
        raise ValidationError("need at least two domains")
    if image_size < MIN_IMAGE_SIZE:
        raise ValidationError(f"image_size {image_size} too small to fit a shape (minimum {MIN_IMAGE_SIZE})")
    domains = list(domains) if domains is not None else default_domains(n_domains, seed)
    if len(domains) != n_domains:
        raise ValidationError("len(domains) must equal n_domains")
    n_groups = n_per_domain_per_class * n_classes
    latents = []
    for g in range(n_groups):
        rng = np.random.default_rng([seed, g])
        label = g % n_classes
        img, box = render_latent(label, image_size, rng)
        latents.append((label, img, box))
    maps = [realize_domain(d, image_size, image_size) for d in domains]
    samples = []
    for d, (t, B) in enumerate(maps):
        for g, (label, img, box) in enumerate(latents):
            samples.append(LabeledSample(synthesize_underwater(img, t, B), label, d, g, box, img))
    return samples


def resynthesize(sample: LabeledSample, spec: DomainSpec, domain_id: int) -> LabeledSample:
    """Render the latent of ``sample`` in another domain."""
    h, w = sample.latent.shape[:2]
    t, B = realize_domain(spec, h, w)
    return LabeledSample(synthesize_underwater(sample.latent, t, B), sample.label, domain_id, sample.pair_group, sample.box, sample.latent)
