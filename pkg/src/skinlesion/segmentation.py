"""Lesion masks: a deterministic threshold segmenter and a small U-Net."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import models as M
from .errors import EmptyMaskError, ShapeError, ValidationError
from .imaging import PiecewiseParams, as_image, image_to_array, piecewise_linear, to_grayscale
from .ops import add, binary_cross_entropy, dice_loss
from .tensor import no_grad, seeded_rng
from .training import AdamState, train_epoch

log = logging.getLogger(__name__)

DEFAULT_SEG_THRESHOLD = 128


def largest_component(mask) -> np.ndarray:
    """Keep the largest 4-connected component (lowest label wins ties)."""
    labels, n = ndimage.label(np.asarray(mask) != 0)
    if n == 0:
        return np.zeros(labels.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    return (labels == int(np.argmax(sizes)) + 1).astype(np.uint8)


def threshold_segment(img, params: PiecewiseParams = PiecewiseParams(),
                      threshold: int = DEFAULT_SEG_THRESHOLD) -> np.ndarray:
    """Brighten, grayscale, threshold and keep the largest blob."""
    gray = to_grayscale(piecewise_linear(as_image(img), params))[:, :, 0]
    raw = gray >= threshold
    if not raw.any():
        raise EmptyMaskError(f"no pixel reaches threshold {threshold} after brightening")
    return largest_component(raw)


def dice_score(pred, truth) -> float:
    """``2|A and B| / (|A| + |B|)``; two empty masks count as a perfect match."""
    a, b = np.asarray(pred) != 0, np.asarray(truth) != 0
    if a.shape != b.shape:
        raise ShapeError("dice operands", a.shape, b.shape)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else float(2.0 * np.logical_and(a, b).sum() / total)


# --- U-Net -------------------------------------------------------------------


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    input_size: int = 64
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError(f"U-Net depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValidationError("base_channels must be >= 1")
        if self.input_size % (2 ** self.depth):
            raise ValidationError(f"input_size {self.input_size} not divisible by 2^{self.depth}")


def build_unet(cfg: UNetConfig = UNetConfig()) -> M.NetworkSpec:
    """Same-padded encoder/decoder with channel-concat skips and a 1x1 sigmoid head."""

    def double(ch, tag):
        return [M.LayerSpec("conv", units=ch, padding="same", name=f"{tag}a"), M.LayerSpec("relu", name=f"{tag}a_relu"),
                M.LayerSpec("conv", units=ch, padding="same", name=f"{tag}b"), M.LayerSpec("relu", name=f"{tag}b_relu")]

    layers: list[M.LayerSpec] = []
    for i in range(cfg.depth):
        layers += double(cfg.base_channels * 2 ** i, f"enc{i}")
        layers += [M.save(f"enc{i}"), M.LayerSpec("maxpool2", name=f"pool{i}")]
    layers += double(cfg.base_channels * 2 ** cfg.depth, "mid")
    for i in reversed(range(cfg.depth)):
        layers += [M.LayerSpec("upsample2", name=f"up{i}"), M.LayerSpec("concat_saved", key=f"enc{i}", name=f"skip{i}")]
        layers += double(cfg.base_channels * 2 ** i, f"dec{i}")
    layers += [M.LayerSpec("conv", units=1, kernel=1, name="out"), M.LayerSpec("sigmoid", name="out_sigmoid")]
    shape = (cfg.in_channels, cfg.input_size, cfg.input_size)
    return M.build_network("unet", [shape], [layers], task="segment", config=cfg)


def segmentation_loss(pred, target):
    """Dice loss plus pixel-wise binary cross-entropy, weighted 1:1."""
    return add(dice_loss(pred, target), binary_cross_entropy(pred, target))


def _stack_images(images: Sequence, size: int) -> np.ndarray:
    arrs = []
    for img in images:
        a = as_image(img)
        if a.shape[:2] != (size, size):
            raise ShapeError("U-Net input image", (size, size), a.shape[:2])
        arrs.append(image_to_array(a))
    return np.stack(arrs)


def _stack_masks(masks: Sequence) -> np.ndarray:
    return np.stack([(np.asarray(m) != 0).astype(np.float32)[None] for m in masks])


@dataclass
class UNetTrainResult:
    weights: dict[str, np.ndarray]
    dice_history: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)


def mean_dice(spec: M.NetworkSpec, weights, images, masks) -> float:
    preds = predict_masks(spec, weights, images)
    return float(np.mean([dice_score(p, m) for p, m in zip(preds, masks)]))


def train_unet(spec: M.NetworkSpec, train: tuple[Sequence, Sequence], epochs: int, seed: int = 0,
               val: tuple[Sequence, Sequence] | None = None, lr: float = 3e-3, batch_size: int = 8) -> UNetTrainResult:
    """Adam on Dice + BCE; ``dice_history[0]`` is the untrained network.

    Dice is measured after every epoch on ``val`` (the training set when no
    held-out set is given).
    """
    images, masks = train
    if len(images) == 0:
        raise ValidationError("empty segmentation training set")
    if len(images) != len(masks):
        raise ShapeError("images vs masks", len(images), len(masks))
    cfg: UNetConfig = spec.meta["config"]
    for img, m in zip(images, masks):
        if np.asarray(m).shape != as_image(img).shape[:2]:
            raise ShapeError("mask dims", as_image(img).shape[:2], np.asarray(m).shape)
    x = _stack_images(images, cfg.input_size)
    y = _stack_masks(masks)
    val_images, val_masks = val if val is not None else train

    weights = M.init_weights(spec, seeded_rng(seed, "unet-init"))
    state = AdamState(lr=lr)
    order = seeded_rng(seed, "unet-order")
    result = UNetTrainResult(weights, [mean_dice(spec, weights, val_images, val_masks)])
    for epoch in range(1, epochs + 1):
        losses = train_epoch(spec, weights, state, x, y, batch_size, order, loss_fn=segmentation_loss)
        result.loss_history.append(float(np.mean(losses)))
        result.dice_history.append(mean_dice(spec, weights, val_images, val_masks))
        log.info("unet epoch %d/%d loss=%.4f dice=%.4f", epoch, epochs, result.loss_history[-1],
                 result.dice_history[-1])
    return result


def predict_probabilities(spec: M.NetworkSpec, weights, images, batch_size: int = 16) -> np.ndarray:
    """Sigmoid maps ``[N, H, W]`` before binarisation."""
    cfg: UNetConfig = spec.meta["config"]
    x = _stack_images(images, cfg.input_size)
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(M.forward(spec, weights, x[s : s + batch_size]).data[:, 0])
    return np.concatenate(out)


def predict_masks(spec: M.NetworkSpec, weights, images) -> list[np.ndarray]:
    probs = predict_probabilities(spec, weights, images)
    return [(p > 0.5).astype(np.uint8) for p in probs]


def predict_mask(spec: M.NetworkSpec, weights, img) -> np.ndarray:
    return predict_masks(spec, weights, [img])[0]
