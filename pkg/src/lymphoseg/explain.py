"""Quadrant input optimisation and hierarchical perturbation saliency."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import segnet
from .autodiff import Tensor
from .labels import POSITIVE_CLASSES

QUADRANT_CLASSES = 4


# ------------------------------------------------------------ input optimisation


def mean_training_image(images) -> np.ndarray:
    """Pixel-wise mean of normalised training images, shape ``(1, d, d)``."""
    images = [np.asarray(getattr(im, "image", im), dtype=np.float64) for im in images]
    if not images:
        raise ValueError("mean_training_image needs at least one image")
    return np.mean(np.stack(images), axis=0).astype(np.float32)


@dataclass
class QuadrantMask:
    mu: np.ndarray  # (C, d, d) of {0, 1}
    assignment: tuple  # quadrant (0=TL, 1=TR, 2=BL, 3=BR) for each class position


def quadrant_mask(num_classes: int, d: int, assignment: Optional[Sequence[int]] = None) -> QuadrantMask:
    """One quadrant of ones per class; by default classes fill quadrants in row-major order."""
    if num_classes != QUADRANT_CLASSES:
        raise ValueError(f"quadrant masks need exactly {QUADRANT_CLASSES} classes; got {num_classes}")
    if d <= 0 or d % 2:
        raise ValueError(f"image size must be even and positive; got {d}")
    assignment = tuple(range(QUADRANT_CLASSES)) if assignment is None else tuple(int(a) for a in assignment)
    if sorted(assignment) != list(range(QUADRANT_CLASSES)):
        raise ValueError(f"assignment must be a permutation of 0..3; got {assignment}")
    h = d // 2
    mu = np.zeros((num_classes, d, d), dtype=np.float32)
    for c, q in enumerate(assignment):
        r, col = divmod(q, 2)
        mu[c, r * h:(r + 1) * h, col * h:(col + 1) * h] = 1
    return QuadrantMask(mu, assignment)


def quadrant_terms(rho, mask: QuadrantMask) -> Tensor:
    """Per-class mean of ``relu(rho * |mu - 1|) - mu * rho``, shape ``(C,)``."""
    rho = rho if isinstance(rho, Tensor) else Tensor(np.asarray(rho))
    mu = mask.mu
    if rho.shape != mu.shape:
        raise ad.ShapeError(f"outputs {rho.shape} do not match quadrant mask {mu.shape}")
    off = Tensor(np.abs(mu - 1).astype(rho.dtype))
    on = Tensor(mu.astype(rho.dtype))
    per_pixel = ad.relu(rho * off) - rho * on
    return ad.mean(per_pixel, axis=(1, 2))


def quadrant_loss(rho, mask: QuadrantMask, variance: bool = True) -> Tensor:
    """Mean quadrant term over classes plus the population variance of the per-class terms.

    The variance keeps one class from being pushed much harder than the
    others.
    """
    terms = quadrant_terms(rho, mask)
    avg = ad.mean(terms)
    if not variance:
        return avg
    dev = terms - avg
    return avg + ad.mean(dev * dev)


def _positive_outputs(params: segnet.NetworkParams, image: Tensor, mode: str, classes: Sequence[int]) -> Tensor:
    logits = segnet.forward(params, image)
    if mode == "softmax":
        out = ad.softmax_channels(logits, axis=0)
    elif mode == "logits":
        out = logits
    else:
        raise ValueError(f"unknown output mode {mode!r}; use 'softmax' or 'logits'")
    lo, hi = min(classes), max(classes) + 1
    if tuple(classes) == tuple(range(lo, hi)):
        return out[lo:hi]
    return out[list(classes)]


@dataclass
class OptimizedInput:
    image: np.ndarray
    losses: list = field(default_factory=list)
    steps: int = 0
    lr: float = 0.0


def frozen(params: segnet.NetworkParams) -> segnet.NetworkParams:
    """Same weights, detached from any tape."""
    return segnet.NetworkParams(params.config, type(params.tensors)((k, Tensor(v.data)) for k, v in params.items()))


def optimize_input(params: segnet.NetworkParams, init, steps: int = 1000, lr: float = 0.01, mode: str = "softmax",
                   classes: Sequence[int] = POSITIVE_CLASSES, assignment=None,
                   callback: Optional[Callable[[int, float], None]] = None) -> OptimizedInput:
    """Plain gradient descent on the input image under the quadrant loss; weights stay fixed.

    ``losses[k]`` is the loss of the image before update ``k``.
    """
    img = np.array(init, dtype=np.float32, copy=True)
    if img.ndim == 2:
        img = img[None]
    mask = quadrant_mask(len(classes), img.shape[-1], assignment)
    net = frozen(params)
    losses = []
    for k in range(steps):
        x = Tensor(img, requires_grad=True)
        loss = quadrant_loss(_positive_outputs(net, x, mode, classes), mask)
        ad.backward(loss, [x])
        losses.append(loss.item())
        if callback:
            callback(k, losses[-1])
        img = img - np.float32(lr) * x.grad
    return OptimizedInput(img, losses, steps, lr)


def in_quadrant_means(params: segnet.NetworkParams, image, mode: str = "softmax",
                      classes: Sequence[int] = POSITIVE_CLASSES, assignment=None) -> np.ndarray:
    """Mean output of each class over its own quadrant."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    mask = quadrant_mask(len(classes), img.shape[-1], assignment)
    out = _positive_outputs(frozen(params), Tensor(img), mode, classes).data.astype(np.float64)
    return (out * mask.mu).sum(axis=(1, 2)) / mask.mu.sum(axis=(1, 2))


# ---------------------------------------------------------------- saliency


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W), non-negative
    cls: int
    levels: list = field(default_factory=list)  # (cell size, cells evaluated, threshold) per level


def network_model(params: segnet.NetworkParams, batch_size: int = 32) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap trained weights as a batched ``(N, 1, H, W) -> (N, C, H, W)`` softmax model."""
    net = frozen(params)

    def model(images: np.ndarray) -> np.ndarray:
        outs = []
        for i in range(0, len(images), batch_size):
            logits = segnet.forward(net, images[i:i + batch_size])
            outs.append(ad.softmax_channels(logits).data)
        return np.concatenate(outs)

    return model


def _halves(start: int, length: int) -> list[tuple[int, int]]:
    a = length // 2
    return [(start, a), (start + a, length - a)] if a else [(start, length)]


def _split(cell) -> list:
    y, x, h, w = cell
    return [(yy, xx, hh, ww) for yy, hh in _halves(y, h) for xx, ww in _halves(x, w)]


def hipe_saliency(model: Callable[[np.ndarray], np.ndarray], image, cls: int, min_cell: int = 1,
                  threshold: str = "mean") -> SaliencyMap:
    """Coarse-to-fine fade-occlusion saliency for one output class.

    Starts from four cells (a 2x2 grid). Each cell's contribution is the drop
    in total class output when the cell is set to zero, clipped at zero; the
    contribution divided by the cell area is added to every pixel of the cell,
    so levels of different resolution add on a common per-pixel scale. Cells
    whose contribution is positive and at least the level threshold are split
    2x2, down to ``min_cell`` pixels. ``threshold`` is ``"mean"`` or
    ``"mid-range"`` of the level's contributions, or ``"none"`` to refine
    every cell.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    if min_cell < 1 or min_cell > min(h, w) // 2:
        raise ValueError(f"min_cell must be in [1, {min(h, w) // 2}]; got {min_cell}")
    if threshold not in ("mean", "mid-range", "none"):
        raise ValueError(f"unknown threshold policy {threshold!r}")

    def mass(batch):
        return np.asarray(model(batch), dtype=np.float64)[:, cls].sum(axis=(1, 2))

    baseline = mass(img[None])[0]
    sal = np.zeros((h, w), dtype=np.float64)
    cells = _split((0, 0, h, w))
    levels = []
    while cells:
        batch = np.repeat(img[None], len(cells), axis=0)
        for i, (y, x, ch, cw) in enumerate(cells):
            batch[i, :, y:y + ch, x:x + cw] = 0
        contrib = np.maximum(0.0, baseline - mass(batch))
        for (y, x, ch, cw), c in zip(cells, contrib):
            sal[y:y + ch, x:x + cw] += c / (ch * cw)
        if threshold == "mean":
            thr = float(contrib.mean())
        elif threshold == "mid-range":
            thr = float(contrib.min() + (contrib.max() - contrib.min()) / 2)
        else:
            thr = -np.inf
        levels.append((max(max(c[2], c[3]) for c in cells), len(cells), thr))
        nxt = []
        for cell, c in zip(cells, contrib):
            if (c > 0 or thr == -np.inf) and c >= thr and min(cell[2], cell[3]) // 2 >= min_cell:
                nxt.extend(_split(cell))
        cells = nxt
    return SaliencyMap(sal, cls, levels)


def occlusion_map(model: Callable[[np.ndarray], np.ndarray], image, cls: int) -> np.ndarray:
    """Exhaustive single-pixel fade occlusion (reference for HiPe)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    batch = np.repeat(img[None], h * w + 1, axis=0)
    for k in range(h * w):
        batch[k + 1, :, k // w, k % w] = 0
    m = np.asarray(model(batch), dtype=np.float64)[:, cls].sum(axis=(1, 2))
    return np.maximum(0.0, m[0] - m[1:]).reshape(h, w)
