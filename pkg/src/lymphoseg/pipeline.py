"""Patch extraction, per-patch normalisation, dataset splits and class statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .labels import CLASS_NAMES, NUM_CLASSES

NORM_STD_FLOOR = 1e-6


@dataclass
class PatchPair:
    image: np.ndarray  # (1, d, d) float32
    target: np.ndarray  # (d, d) uint8 class indices
    slide_id: int = 0
    origin: tuple = (0, 0)  # (x, y) of the top-left pixel in the source slide

    @property
    def patch_id(self) -> str:
        return f"{self.slide_id}_{self.origin[0]}_{self.origin[1]}"

    @property
    def size(self) -> int:
        return self.target.shape[0]


def patch_stride(size: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1); got {overlap}")
    return max(1, int(round(size * (1.0 - overlap))))


def patch_origins(width: int, height: int, size: int, overlap: float) -> list[tuple[int, int]]:
    """Row-major (x, y) origins of every window that fits entirely in the image."""
    if size > width or size > height:
        raise ValueError(f"patch size {size} exceeds image {width}x{height}")
    stride = patch_stride(size, overlap)
    return [(x, y) for y in range(0, height - size + 1, stride) for x in range(0, width - size + 1, stride)]


def expected_patch_count(width: int, height: int, size: int, overlap: float) -> int:
    stride = patch_stride(size, overlap)
    return ((width - size) // stride + 1) * ((height - size) // stride + 1)


def extract_patches(image: np.ndarray, labelmap: np.ndarray, size: int, overlap: float = 0.5, slide_id: int = 0) -> list[PatchPair]:
    """Cut aligned ``size`` x ``size`` windows; partial windows at the edges are dropped."""
    if image.shape != labelmap.shape:
        raise ValueError(f"image {image.shape} and label map {labelmap.shape} differ")
    h, w = image.shape
    out = []
    for x, y in patch_origins(w, h, size, overlap):
        img = image[y:y + size, x:x + size].astype(np.float32)[None]
        out.append(PatchPair(img, labelmap[y:y + size, x:x + size].copy(), slide_id, (x, y)))
    return out


def normalize_image(image: np.ndarray) -> np.ndarray:
    img = image.astype(np.float64)
    std = max(img.std(), NORM_STD_FLOOR)
    return ((img - img.mean()) / std).astype(np.float32)


def normalize_patch(patch: PatchPair) -> PatchPair:
    """Z-score the image of one patch; the target is untouched."""
    return PatchPair(normalize_image(patch.image), patch.target, patch.slide_id, patch.origin)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    mode: str = "random"
    seed: int = 0
    ratios: tuple = (0.8, 0.1, 0.1)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def assignment(self) -> dict:
        return {pid: name for name in ("train", "val", "test") for pid in getattr(self, name)}


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor every share but the last, which takes the remainder.

    7413 at 80:10:10 gives 5930/741/742.
    """
    sizes = [int(math.floor(n * r + 1e-9)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def split_dataset(patches: Sequence, ratios=(0.8, 0.1, 0.1), mode: str = "random", seed: int = 0,
                  holdout_slide: Optional[int] = None) -> DatasetSplit:
    """Deterministic train/val/test split of patch ids.

    ``patches`` may be :class:`PatchPair` objects or ``(patch_id, slide_id)``
    pairs. In ``holdout`` mode every patch of ``holdout_slide`` (default: the
    highest slide id) goes to test and the rest are divided between train and
    val in proportion to the first two ratios.
    """
    items = [(p.patch_id, p.slide_id) if isinstance(p, PatchPair) else (str(p[0]), int(p[1])) for p in patches]
    if not items:
        raise ValueError("cannot split an empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-6 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1; got {ratios}")
    rng = np.random.default_rng(seed)

    if mode == "random":
        order = rng.permutation(len(items))
        n_train, n_val, _ = split_sizes(len(items), ratios)
        ids = [items[i][0] for i in order]
        return DatasetSplit(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:], mode, seed, ratios)

    if mode == "holdout":
        slides = sorted({s for _, s in items})
        if len(slides) < 2:
            raise ValueError("holdout mode needs patches from at least two slides")
        held = slides[-1] if holdout_slide is None else holdout_slide
        if held not in slides:
            raise ValueError(f"holdout slide {held} not present; slides are {slides}")
        test = [pid for pid, s in items if s == held]
        rest = [pid for pid, s in items if s != held]
        rest = [rest[i] for i in rng.permutation(len(rest))]
        tv = ratios[0] + ratios[1]
        n_train = split_sizes(len(rest), (ratios[0] / tv, ratios[1] / tv))[0] if tv > 0 else 0
        return DatasetSplit(rest[:n_train], rest[n_train:], test, mode, seed, ratios)

    raise ValueError(f"unknown split mode {mode!r}; use 'random' or 'holdout'")


@dataclass
class ClassStat:
    count: int = 0
    presence: int = 0
    coverage: float = 0.0


def class_stats(targets: Iterable) -> dict[str, ClassStat]:
    """Cell count (4-connected components), patches containing the class, pixel coverage."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    presence = np.zeros(NUM_CLASSES, dtype=np.int64)
    pixels = np.zeros(NUM_CLASSES, dtype=np.int64)
    for t in targets:
        t = t.target if isinstance(t, PatchPair) else np.asarray(t)
        pixels += np.bincount(t.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
        for c in range(NUM_CLASSES):
            n = ndimage.label(t == c)[1]
            counts[c] += n
            presence[c] += n > 0
    total = pixels.sum()
    return {
        name: ClassStat(int(counts[c]), int(presence[c]), float(pixels[c] / total) if total else 0.0)
        for c, name in enumerate(CLASS_NAMES)
    }


def format_class_stats(stats: dict[str, ClassStat]) -> str:
    names = list(stats)
    rows = [
        ["", *names],
        ["Count", *(str(stats[n].count) for n in names)],
        ["Presence", *(str(stats[n].presence) for n in names)],
        ["Coverage", *(f"{100 * stats[n].coverage:.1f}%" for n in names)],
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(" | ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows)
