"""Synthetic demo corpus: colored geometric targets on textured backgrounds.

Useful for smoke tests, overfit sanity experiments and CLI demos without a
real underwater dataset. Writes the standard layout (``images/``, ``masks/``,
``classmap.csv``) so the rest of the pipeline consumes it unchanged.

Run directly to build one::

    python -m fssuw.synthetic --out demo_data --n-per-class 6 --size 128
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import ClassEntry, ClassMap

SHAPE_CLASSES = [
    # (id, name, mask color, fill color)
    (1, "disc", (255, 0, 0), (210, 40, 30)),
    (2, "box", (0, 255, 0), (40, 200, 60)),
    (3, "tri", (0, 0, 255), (40, 70, 220)),
    (4, "ring", (255, 255, 0), (230, 210, 40)),
]


def demo_class_map(n_classes: int = 4) -> ClassMap:
    return ClassMap([ClassEntry(cid, name, color)
                     for cid, name, color, _ in SHAPE_CLASSES[:n_classes]])


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth blue-gray noise; low-res noise bilinearly blown up plus grain."""
    coarse = rng.uniform(0.0, 1.0, size=(size // 8, size // 8, 3))
    img = np.asarray(Image.fromarray((coarse * 255).astype(np.uint8)).resize(
        (size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    base = np.array([0.25, 0.35, 0.45])
    tex = 0.55 * base + 0.30 * img + rng.normal(0, 0.02, size=(size, size, 3))
    return np.clip(tex, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, name: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy = rng.uniform(0.35, 0.65) * size
    cx = rng.uniform(0.35, 0.65) * size
    r = rng.uniform(0.22, 0.34) * size
    if name == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if name == "box":
        return (np.abs(yy - cy) <= r * 0.9) & (np.abs(xx - cx) <= r * 0.9)
    if name == "tri":
        # downward triangle: inside |x-cx| <= (cy + r - y)/2 for y in [cy-r, cy+r]
        return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (cy + r - yy) * 0.6)
    if name == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r ** 2) & (d2 >= (0.45 * r) ** 2)
    raise ValueError(f"unknown shape {name!r}")


def make_demo_corpus(root, n_per_class: int = 6, size: int = 128, seed: int = 0,
                     n_classes: int = 4) -> ClassMap:
    """Write a demo corpus under ``root``; returns its class map."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    class_map = demo_class_map(n_classes)
    for cid, name, mask_color, fill in SHAPE_CLASSES[:n_classes]:
        for i in range(n_per_class):
            img = _textured_background(rng, size)
            mask = _shape_mask(rng, name, size)
            color = np.array(fill, dtype=np.float64) / 255.0
            jitter = rng.normal(0, 0.03, size=3)
            img[mask] = np.clip(color + jitter, 0, 1)
            img += rng.normal(0, 0.01, size=img.shape)
            img = np.clip(img, 0, 1)

            mask_rgb = np.zeros((size, size, 3), dtype=np.uint8)
            mask_rgb[mask] = mask_color
            stem = f"{name}_{i:03d}"
            Image.fromarray((img * 255).astype(np.uint8)).save(root / "images" / f"{stem}.png")
            Image.fromarray(mask_rgb).save(root / "masks" / f"{stem}.png")
    class_map.to_csv(root / "classmap.csv")
    return class_map


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="build a synthetic demo corpus")
    parser.add_argument("--out", required=True)
    parser.add_argument("--n-per-class", type=int, default=6)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=4)
    args = parser.parse_args(argv)
    make_demo_corpus(args.out, args.n_per_class, args.size, args.seed, args.classes)
    print(f"wrote demo corpus to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
