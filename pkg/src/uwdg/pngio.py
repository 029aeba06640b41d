"""8-bit PNG reading/writing and the corpus manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .image_model import LabeledSample


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    # pinned settings keep the bytes reproducible across runs
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_corpus(samples: list[LabeledSample], out_dir) -> Path:
    """Write one PNG per sample plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rel = f"d{s.domain}/g{s.pair_group:05d}_c{s.label}.png"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_png(out / rel, s.image)
        records.append({"path": rel, "class": int(s.label), "domain": int(s.domain), "pair_group": int(s.pair_group), "box": list(s.box)})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(records, indent=1))
    return manifest


def read_corpus(corpus_dir) -> list[LabeledSample]:
    root = Path(corpus_dir)
    records = json.loads((root / "manifest.json").read_text())
    samples = []
    for r in records:
        img = read_png(root / r["path"])
        box = tuple(r.get("box", (0, 0, img.shape[1], img.shape[0])))
        samples.append(LabeledSample(img, int(r["class"]), int(r["domain"]), int(r["pair_group"]), box))
    return samples

