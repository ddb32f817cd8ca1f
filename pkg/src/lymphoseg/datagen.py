"""Seeded synthetic slides standing in for Hoechst + mIF scans.

Each nucleus is an ellipse filled with band-limited noise whose frequency band
and contrast depend on the cell class, so the class is recoverable from the
nuclear channel alone. Three marker channels carry per-cell intensities that
sit well clear of the labelling thresholds, which lets the intensity
classifier reproduce the ground truth exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage

from .labels import CD3, CD8_CD3HI, CD8_CD3LO, CD20, CLASS_NAMES, NUM_CLASSES, OTHER

MAX_INTENSITY = 65535
DEFAULT_THRESHOLDS = (5000.0, 4000.0, 2200.0)  # CD20, CD8, CD3
THRESHOLD_MARGIN = 0.10


@dataclass(frozen=True)
class Texture:
    """Band-pass noise: fine scale ``sigma`` to coarse scale ``2 * sigma``."""

    sigma: float
    contrast: float


# two scales x two contrasts for the lymphocytes; Other is nearly flat
DEFAULT_TEXTURES = {
    CD3: Texture(sigma=0.6, contrast=0.20),
    CD8_CD3LO: Texture(sigma=0.6, contrast=0.45),
    CD8_CD3HI: Texture(sigma=1.8, contrast=0.25),
    CD20: Texture(sigma=1.8, contrast=0.70),
    OTHER: Texture(sigma=1.0, contrast=0.08),
}

DEFAULT_COUNTS = {CD3: 8, CD8_CD3LO: 8, CD8_CD3HI: 6, CD20: 6, OTHER: 10}


@dataclass
class SlideSpec:
    width: int = 320
    height: int = 320
    counts: Mapping[int, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    radius_range: tuple = (6.0, 9.0)
    textures: Mapping[int, Texture] = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    seed: int = 0
    thresholds: tuple = DEFAULT_THRESHOLDS
    hi_cd3_cutoff: Optional[float] = None
    gap: float = 3.0
    max_tries: int = 2000

    def __post_init__(self):
        self.counts = {_as_class(k): int(v) for k, v in self.counts.items()}
        if any(v < 0 for v in self.counts.values()):
            raise ValueError(f"cell counts must be >= 0; got {self.counts}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        if self.width < 2 * hi + 4 or self.height < 2 * hi + 4:
            raise ValueError(f"slide {self.width}x{self.height} too small for radius {hi}")

    @property
    def cd3_high(self) -> float:
        return 2.0 * self.thresholds[2] if self.hi_cd3_cutoff is None else self.hi_cd3_cutoff


@dataclass
class ChannelStack:
    """Nuclear stain plus fluorescein (CD20), Cy3 (CD8) and AF750 (CD3) surrogates, all uint16."""

    nuclear: np.ndarray
    cd20: np.ndarray
    cd8: np.ndarray
    cd3: np.ndarray

    def as_dict(self) -> dict:
        return {"nuclear": self.nuclear, "cd20": self.cd20, "cd8": self.cd8, "cd3": self.cd3}


def _as_class(key) -> int:
    if isinstance(key, str):
        return CLASS_NAMES.index(key)
    key = int(key)
    if not 0 <= key < NUM_CLASSES:
        raise ValueError(f"class index {key} out of range")
    return key


def _marker_levels(cls: int, rng: np.random.Generator, thresholds, cd3_high) -> tuple:
    """Per-cell (cd20, cd8, cd3) intensities consistent with the labelling rule."""
    t20, t8, t3 = thresholds

    def above(t, lo=1.3, hi=2.5):
        return t * rng.uniform(lo, hi)

    def below(t):
        return t * rng.uniform(0.05, 0.7)

    if cls == CD20:
        return above(t20), below(t8), below(t3)
    if cls == CD8_CD3HI:
        return below(t20), above(t8), cd3_high * rng.uniform(1.2, 2.0)
    if cls == CD8_CD3LO:
        # low but present CD3: above t_cd3, below the high cutoff
        lo, hi = 1.15 * t3, 0.88 * cd3_high
        return below(t20), above(t8), rng.uniform(min(lo, hi), hi)
    if cls == CD3:
        return below(t20), below(t8), above(t3)
    return below(t20), below(t8), below(t3)


def _place(spec: SlideSpec, rng: np.random.Generator) -> list:
    classes = [c for c in sorted(spec.counts) for _ in range(spec.counts[c])]
    classes = [classes[i] for i in rng.permutation(len(classes))]
    lo, hi = spec.radius_range
    placed = []
    tries = 0
    for cls in classes:
        while True:
            tries += 1
            if tries > spec.max_tries * max(1, len(classes)):
                raise ValueError(
                    f"could not place {len(classes)} nuclei on a {spec.width}x{spec.height} slide "
                    f"(placed {len(placed)}); lower the cell density"
                )
            a = rng.uniform(lo, hi)
            b = a * rng.uniform(0.75, 1.0)
            margin = a + 2
            cy = rng.uniform(margin, spec.height - 1 - margin)
            cx = rng.uniform(margin, spec.width - 1 - margin)
            if all((cx - px) ** 2 + (cy - py) ** 2 >= (a + pa + spec.gap) ** 2 for px, py, pa, *_ in placed):
                placed.append((cx, cy, a, b, rng.uniform(0, np.pi), cls))
                break
    return placed


def _interior(mask: np.ndarray) -> np.ndarray:
    core = ndimage.binary_erosion(mask, iterations=2)
    return core if core.sum() >= 4 else mask


def _band_noise(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(shape)
    return ndimage.gaussian_filter(white, sigma) - ndimage.gaussian_filter(white, 2 * sigma)


def generate_slide(spec: SlideSpec) -> tuple[ChannelStack, np.ndarray]:
    """Render one synthetic slide; returns the channel stack and its label map."""
    stack, labels, _ = render_slide(spec)
    return stack, labels


def render_slide(spec: SlideSpec) -> tuple[ChannelStack, np.ndarray, np.ndarray]:
    """Like :func:`generate_slide` but also returns an instance map.

    Instance ``k`` (1-based) is the k-th placed nucleus; 0 is background.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    nuclear = 2000.0 + ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0) * 400.0
    markers = np.zeros((3, h, w))
    for ch, t in enumerate(spec.thresholds):
        markers[ch] = t * rng.uniform(0.0, 0.3, size=(h, w))
    labels = np.full((h, w), OTHER, dtype=np.uint8)
    instances = np.zeros((h, w), dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]

    for k, (cx, cy, a, b, theta, cls) in enumerate(_place(spec, rng), start=1):
        tex = spec.textures[cls]
        x0, x1 = int(cx - a - 2), int(cx + a + 3)
        y0, y1 = int(cy - a - 2), int(cy + a + 3)
        dx = xx[y0:y1, x0:x1] - cx
        dy = yy[y0:y1, x0:x1] - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        rad = np.sqrt(u * u + v * v)
        inside = rad <= 1.0
        # intensity falls off over roughly one pixel at the rim
        soft = np.clip((1.0 - rad) * b + 0.5, 0.0, 1.0)

        core = _interior(inside)
        field_ = _band_noise(inside.shape, tex.sigma, rng)
        field_ = (field_ - field_[core].mean()) / max(field_[core].std(), 1e-9)
        base = 20000.0 * rng.uniform(0.85, 1.15)
        body = base * np.clip(1.0 + tex.contrast * field_, 0.05, None)
        region = nuclear[y0:y1, x0:x1]
        region[...] = region * (1.0 - soft) + body * soft

        labels[y0:y1, x0:x1][inside] = cls
        instances[y0:y1, x0:x1][inside] = k
        levels = _marker_levels(cls, rng, spec.thresholds, spec.cd3_high)
        for ch, level in enumerate(levels):
            jitter = level * rng.uniform(0.97, 1.03, size=int(inside.sum()))
            markers[ch, y0:y1, x0:x1][inside] = _keep_margin(jitter, level, ch, spec)

    nuclear += rng.normal(0.0, 150.0, size=(h, w))
    to16 = lambda a: np.clip(np.rint(a), 0, MAX_INTENSITY).astype(np.uint16)
    stack = ChannelStack(to16(nuclear), to16(markers[0]), to16(markers[1]), to16(markers[2]))
    return stack, labels, instances


def _keep_margin(values: np.ndarray, level: float, ch: int, spec: SlideSpec) -> np.ndarray:
    """Clip jittered marker values so they stay on the same side of every cutoff as ``level``."""
    cutoffs = [spec.thresholds[ch]]
    if ch == 2:
        cutoffs.append(spec.cd3_high)
    lo, hi = 0.0, float(MAX_INTENSITY)
    for c in cutoffs:
        if level > c:
            lo = max(lo, (1 + THRESHOLD_MARGIN) * c)
        else:
            hi = min(hi, (1 - THRESHOLD_MARGIN) * c)
    return np.clip(values, lo, hi)


def threshold_label(channels: ChannelStack, thresholds=DEFAULT_THRESHOLDS, hi_cd3_cutoff: Optional[float] = None) -> np.ndarray:
    """Per-pixel five-way intensity classifier over the marker channels."""
    t20, t8, t3 = thresholds
    if min(thresholds) <= 0:
        raise ValueError(f"thresholds must be positive; got {thresholds}")
    high = 2.0 * t3 if hi_cd3_cutoff is None else hi_cd3_cutoff
    cd20 = channels.cd20.astype(np.float64)
    cd8 = channels.cd8.astype(np.float64)
    cd3 = channels.cd3.astype(np.float64)
    out = np.full(cd20.shape, OTHER, dtype=np.uint8)
    out[cd3 > t3] = CD3
    out[cd8 > t8] = CD8_CD3LO
    out[(cd8 > t8) & (cd3 > high)] = CD8_CD3HI
    out[cd20 > t20] = CD20
    return out


def texture_energy(nuclear: np.ndarray, labels: np.ndarray, instances: np.ndarray) -> dict:
    """Per-nucleus texture energy, grouped by class.

    Energy is the variance of the nuclear channel over the nucleus interior
    (mask eroded by two pixels, so the rim is excluded) divided by the squared
    interior mean. Removing the mean strips the DC term; what remains is the
    class's band-limited chromatin texture plus imaging noise.
    Returns ``{class: array of per-nucleus energies}``.
    """
    img = nuclear.astype(np.float64)
    energies: dict = {}
    for k in range(1, int(instances.max()) + 1):
        mask = instances == k
        core = _interior(mask)
        vals = img[core]
        energies.setdefault(int(labels[mask][0]), []).append(vals.var() / vals.mean() ** 2)
    return {c: np.asarray(v) for c, v in sorted(energies.items())}
