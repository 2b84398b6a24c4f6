"""Deterministic toy dataset of colored shapes with exactly known label maps.

Files are written in the default FloodNet layout so ``scan_dataset`` reads
them unchanged, together with a manifest per split::

    <out>/<split>/manifest.txt
    # sample_id<TAB>image_path<TAB>mask_path<TAB>count_0,count_1,...

The last column is the region ledger: pixels per class in the final label map.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetIndex, DatasetLayout, IndexEntry, SPLITS, write_mask
from .errors import ContractError

# class id -> base RGB; noise is added on top
PALETTE = np.array([
    [40, 40, 40],
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [235, 210, 40],
    [200, 60, 210],
    [40, 210, 220],
    [245, 140, 30],
    [140, 90, 40],
    [240, 240, 240],
], dtype=np.float64)

MANIFEST = "manifest.txt"


def _draw_regions(rng: np.random.Generator, size: int, n_classes: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.int64)
    if n_classes < 2:
        return mask
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 6))):
        cls = int(rng.integers(1, n_classes))
        if rng.random() < 0.5:
            h, w = rng.integers(size // 8, size // 2, size=2)
            y0, x0 = rng.integers(0, size - h), rng.integers(0, size - w)
            mask[y0:y0 + h, x0:x0 + w] = cls
        else:
            r = rng.uniform(size / 12, size / 4)
            cy, cx = rng.uniform(r, size - r, size=2)
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    return mask


def _render(rng: np.random.Generator, mask: np.ndarray, noise: float) -> np.ndarray:
    base = PALETTE[mask % len(PALETTE)]
    img = base + rng.normal(0.0, noise, size=base.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic_dataset(n_images: int, size: int, n_classes: int, seed: int, out,
                           split: str = "train", layout: DatasetLayout | None = None,
                           noise: float = 12.0) -> DatasetIndex:
    """Write ``n_images`` shape images with label maps under ``out``.

    Output is a pure function of the arguments: rerunning produces
    byte-identical files.
    """
    if n_images < 1:
        raise ContractError("n_images must be >= 1")
    if size < 32:
        raise ContractError("size must be >= 32")
    if not 1 <= n_classes <= len(PALETTE):
        raise ContractError(f"n_classes must be in 1..{len(PALETTE)}")
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")

    layout = layout or DatasetLayout()
    out = Path(out)
    img_dir, mask_dir = layout.image_root(out, split), layout.mask_root(out, split)
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([seed, SPLITS.index(split)])
    entries, lines = [], []
    for i in range(n_images):
        sid = f"syn_{split}_{i:04d}"
        mask = _draw_regions(rng, size, n_classes)
        image = _render(rng, mask, noise)
        img_path = img_dir / f"{sid}.png"
        mask_path = mask_dir / f"{sid}{layout.mask_suffix}{layout.mask_ext}"
        Image.fromarray(image, mode="RGB").save(img_path)
        write_mask(mask_path, mask)
        ledger = np.bincount(mask.ravel(), minlength=n_classes)
        entries.append(IndexEntry(sid, img_path, mask_path))
        lines.append("\t".join([sid, str(img_path.relative_to(out)), str(mask_path.relative_to(out)),
                                ",".join(str(int(c)) for c in ledger)]))

    (out / split / MANIFEST).write_text("\n".join(lines) + "\n")
    return DatasetIndex(entries, split)


def read_manifest(out, split: str = "train") -> dict[str, dict]:
    """Parse a split manifest into ``{sample_id: {image, mask, ledger}}``."""
    out = Path(out)
    records = {}
    for line in (out / split / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        sid, img, mask, ledger = line.split("\t")
        records[sid] = {"image": out / img, "mask": out / mask,
                        "ledger": np.array([int(c) for c in ledger.split(",")], dtype=np.int64)}
    return records


def manifest_ledger(out, split: str = "train") -> np.ndarray:
    """Total per-class pixel area recorded by the generator for a split."""
    return sum(r["ledger"] for r in read_manifest(out, split).values())
