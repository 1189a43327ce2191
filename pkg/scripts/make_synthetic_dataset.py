#!/usr/bin/env python3
"""Regenerate the bundled synthetic evaluation dataset (data/synthetic).

Two small datasets of four samples each: three tampered images with
ground-truth masks plus one authentic image.  Everything is seeded, so the
bundled files are reproducible byte-for-byte.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image


def _base_image(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    r = 96 + 64 * np.sin(xx / width * 3.1) + 16 * (yy / height)
    g = 80 + 48 * np.cos(yy / height * 2.3) + 24 * (xx / width)
    b = 72 + 40 * np.sin((xx + yy) / (width + height) * 4.7)
    base = np.stack([r, g, b], axis=2)
    base += rng.normal(0, 6.0, base.shape)
    return np.clip(base, 0, 255).astype(np.uint8)


def _tamper(rng: np.random.Generator, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Paste a foreign patch; returns (tampered pixels, binary mask)."""
    height, width = pixels.shape[:2]
    bw = int(rng.integers(width // 6, width // 3))
    bh = int(rng.integers(height // 6, height // 3))
    x1 = int(rng.integers(2, width - bw - 2))
    y1 = int(rng.integers(2, height - bh - 2))
    patch = rng.integers(0, 255, (bh, bw, 3), dtype=np.uint8)
    patch = (0.6 * patch + 0.4 * pixels[y1 : y1 + bh, x1 : x1 + bw]).astype(np.uint8)
    out = pixels.copy()
    out[y1 : y1 + bh, x1 : x1 + bw] = patch
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[y1 : y1 + bh, x1 : x1 + bw] = 255
    return out, mask


def make_dataset(root: Path, name: str, seed: int, sizes: list[tuple[int, int]]) -> None:
    rng = np.random.default_rng(seed)
    images = root / name / "images"
    masks = root / name / "masks"
    authentic = root / name / "authentic"
    for d in (images, masks, authentic):
        d.mkdir(parents=True, exist_ok=True)

    for i, (width, height) in enumerate(sizes[:-1]):
        base = _base_image(rng, width, height)
        tampered, mask = _tamper(rng, base)
        Image.fromarray(tampered, "RGB").save(images / f"{name}_t{i:02d}.png")
        Image.fromarray(mask, "L").save(masks / f"{name}_t{i:02d}.png")

    width, height = sizes[-1]
    Image.fromarray(_base_image(rng, width, height), "RGB").save(
        authentic / f"{name}_a00.png"
    )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/synthetic", help="output root")
    args = parser.parse_args()
    root = Path(args.out)
    make_dataset(root, "synthA", seed=101, sizes=[(64, 48), (80, 64), (56, 56), (64, 64)])
    make_dataset(root, "synthB", seed=202, sizes=[(72, 48), (64, 64), (96, 64), (48, 48)])
    total = sum(1 for _ in root.rglob("*.png"))
    print(f"wrote {total} PNGs under {root}")


if __name__ == "__main__":
    main()
