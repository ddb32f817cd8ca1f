"""Mini-batch AdamW training, batched inference and dataset assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import segnet
from .datagen import SlideSpec, generate_slide
from .metrics import MetricReport, evaluate
from .pipeline import PatchPair, extract_patches, normalize_patch

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: segnet.NetworkParams  # best-validation parameters
    best_epoch: int
    history: list = field(default_factory=list)


def _stack(patches: Sequence[PatchPair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.image for p in patches]), np.stack([p.target for p in patches])


def batch_loss(params: segnet.NetworkParams, images: np.ndarray, targets: np.ndarray) -> ad.Tensor:
    probs = ad.softmax_channels(segnet.forward(params, images))
    return ad.cross_entropy(probs, targets)


def mean_loss(params: segnet.NetworkParams, patches: Sequence[PatchPair], batch_size: int = 32) -> float:
    if not patches:
        return float("nan")
    total = 0.0
    for i in range(0, len(patches), batch_size):
        x, y = _stack(patches[i:i + batch_size])
        total += batch_loss(params, x, y).item() * len(x)
    return total / len(patches)


def train(
    params: segnet.NetworkParams,
    train_set: Sequence[PatchPair],
    val_set: Sequence[PatchPair],
    epochs: int = 100,
    batch_size: int = 32,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    seed: int = 0,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train in place with a constant learning rate; keep the lowest-val-loss weights.

    The reported train loss is the mean over the epoch's mini-batches.
    """
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    state = ad.OptimState(lr=lr, weight_decay=weight_decay)
    best = params.copy()
    best_val, best_epoch = np.inf, 0
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_set))
        losses, counts = [], []
        for i in range(0, len(order), batch_size):
            x, y = _stack([train_set[j] for j in order[i:i + batch_size]])
            loss = batch_loss(params, x, y)
            ad.backward(loss, params.tensors.values())
            ad.adamw_step(params.tensors, state)
            losses.append(loss.item())
            counts.append(len(x))
        train_loss = float(np.average(losses, weights=counts))
        val_loss = mean_loss(params, val_set, batch_size) if val_set else train_loss
        rec = EpochRecord(epoch, train_loss, val_loss)
        history.append(rec)
        log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if on_epoch:
            on_epoch(rec)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best = params.copy()
    return TrainResult(best, best_epoch, history)


def predict_probs(params: segnet.NetworkParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax outputs ``(N, C, H, W)`` for a stack of ``(N, 1, H, W)`` images."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(ad.softmax_channels(segnet.forward(params, images[i:i + batch_size])).data)
    return np.concatenate(out)


def evaluate_patches(params: segnet.NetworkParams, patches: Sequence[PatchPair], split: str = "test",
                     hard: bool = False) -> tuple[MetricReport, MetricReport]:
    images, targets = _stack(patches)
    probs = predict_probs(params, images)
    return evaluate(targets, probs, split=split, hard=hard)


def synthetic_dataset(n_slides: int = 6, patch_size: int = 64, overlap: float = 0.5, seed: int = 0,
                      **spec_kwargs) -> list[PatchPair]:
    """Generate ``n_slides`` slides and return their normalised patches (slide ids 0..n-1)."""
    patches = []
    for s in range(n_slides):
        stack, labels = generate_slide(SlideSpec(seed=seed * 1000 + s, **spec_kwargs))
        for p in extract_patches(stack.nuclear, labels, patch_size, overlap, slide_id=s):
            patches.append(normalize_patch(p))
    return patches
