"""Grad-CAM heatmaps from a convolutional layer of a DenseNet."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from . import functional as F
from .data import resize_bilinear
from .tensor import Tensor, backward, get_default_dtype

# Final BN-ReLU output of the last dense block: the map the classifier pools.
# Any tapped conv (e.g. "block2.layer2.conv2") can be named instead.
DEFAULT_LAYER = "features"


@dataclass
class Heatmap:
    values: np.ndarray  # H x W in [0, 1]
    target_class: int
    predicted_class: int
    source_layer: str
    peak: Tuple[int, int]  # (row, col)
    is_zero: bool
    raw: np.ndarray  # pre-upsampling, pre-normalization map


def capture(model, x, layer: Optional[str] = None):
    """Forward ``x`` (N x C x H x W) keeping the named feature map in the graph.

    Returns ``(activations, logits)``; ``activations`` retains its gradient
    on the next backward pass.
    """
    layer = layer or DEFAULT_LAYER
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=get_default_dtype()))
    taps = {}
    logits = model.forward(x, taps=taps)
    if layer not in taps:
        raise ValueError(f"layer {layer!r} is not a convolutional output of this model "
                         f"(available: {sorted(taps)})")
    return taps[layer].retain_grad(), logits


def cam(activations: np.ndarray, gradients: np.ndarray, clip: bool = True) -> np.ndarray:
    """ReLU of the activation maps weighted by their spatially averaged gradients."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ValueError(f"activations {a.shape} and gradients {g.shape} must both be C x h x w")
    weights = g.mean(axis=(1, 2))
    raw = np.tensordot(weights, a, axes=(0, 0))
    return np.maximum(raw, 0.0) if clip else raw


def normalize_map(raw: np.ndarray, out_hw) -> Tuple[np.ndarray, bool]:
    up = resize_bilinear(raw[None], int(out_hw[0]), int(out_hw[1]))[0]
    up = np.maximum(up, 0.0)
    peak = up.max()
    if peak <= 0.0:
        return np.zeros_like(up), True
    return up / peak, False


def peak_location(raw: np.ndarray, out_hw) -> Tuple[int, int]:
    """Pixel under the centre of the strongest raw cell.

    A bilinear upsample attains its maximum at a source sample, but clamped
    borders turn corner cells into flat plateaus, so a plain argmax over the
    upsampled map would snap to the image corner.
    """
    h, w = raw.shape
    r, c = np.unravel_index(int(np.argmax(raw)), raw.shape)
    H, W = int(out_hw[0]), int(out_hw[1])
    return min(H - 1, int((r + 0.5) * H / h)), min(W - 1, int((c + 0.5) * W / w))


def explain(model, image, target="predicted", layer: Optional[str] = None,
            signal: str = "logit") -> Heatmap:
    """Grad-CAM for one ``C x H x W`` (already normalized) image.

    ``target`` is ``"predicted"`` or a class index. ``signal="logit"`` back-
    propagates the pre-softmax class score; ``signal="loss"`` uses the
    negated cross-entropy of the target class, so supporting evidence stays
    positive in both cases.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a C x H x W image, got {image.shape}")
    was = model.training
    model.eval()
    try:
        acts, logits = capture(model, image[None].astype(get_default_dtype()), layer)
        k = logits.shape[1]
        predicted = int(np.argmax(logits.data[0]))
        cls = predicted if target in (None, "predicted") else int(target)
        if not 0 <= cls < k:
            raise ValueError(f"target class {cls} out of range [0, {k})")
        if signal == "logit":
            score = logits[0, cls]
        elif signal == "loss":
            loss, _ = F.softmax_cross_entropy(logits, [cls])
            score = -loss
        else:
            raise ValueError("signal must be 'logit' or 'loss'")
        backward(score)
        grads = acts.grad if acts.grad is not None else np.zeros_like(acts.data)
        raw = cam(acts.data[0], grads[0])
    finally:
        model.zero_grad()
        model.train(was)
    values, is_zero = normalize_map(raw, image.shape[1:])
    return Heatmap(values, cls, predicted, layer or DEFAULT_LAYER,
                   peak_location(raw, values.shape), is_zero, raw)


def colorize(values: np.ndarray, colormap: str = "hot") -> np.ndarray:
    """H x W in [0, 1] -> H x W x 3 in [0, 1]; 0 maps to black."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if colormap == "hot":
        return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    if colormap == "gray":
        return np.stack([v, v, v], axis=-1)
    raise ValueError(f"unknown colormap {colormap!r}")


def blend_overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5,
                  colormap: str = "hot") -> np.ndarray:
    """Alpha-blend a colourised heatmap over an H x W x 3 image in [0, 1]; returns uint8."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != np.shape(heatmap):
        raise ValueError(f"image {img.shape[:2]} and heatmap {np.shape(heatmap)} resolutions differ")
    out = (1.0 - alpha) * img + alpha * colorize(heatmap, colormap)
    return (np.clip(out, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_overlay(image: np.ndarray, heatmap, path, alpha: float = 0.5,
                   colormap: str = "hot") -> None:
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    Image.fromarray(blend_overlay(image, values, alpha, colormap), "RGB").save(path, format="PNG")


def save_heatmap(heatmap, path) -> None:
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    Image.fromarray((np.clip(values, 0, 1) * 255 + 0.5).astype(np.uint8), "L").save(path, format="PNG")
