"""Gradient-weighted class activation maps.

Backpropagates a single target logit to a named 4-D activation, weights
each channel by its spatially averaged gradient, rectifies the weighted
sum, upsamples bilinearly to the input resolution and normalizes by the
maximum (when positive). Maps are written as single-channel tile files
with an 8-bit PGM sidecar for quick eyeballing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import save_tile
from .errors import ConfigError, ContractError
from .model import Model
from .tensor import Tensor

__all__ = ["HeatMap", "grad_cam", "cam_from_activations",
           "bilinear_resize", "save_heatmap_pgm"]


@dataclass
class HeatMap:
    values: np.ndarray        # (H, W) in [0, 1] at input resolution
    layer_name: str
    target_class: int


def bilinear_resize(arr: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear upsampling with half-pixel centers (align_corners=False)."""
    h, w = arr.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return arr.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - wx) + arr[np.ix_(y0, x1)] * wx
    bot = arr[np.ix_(y1, x0)] * (1 - wx) + arr[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def grad_cam(model: Model, image: np.ndarray, target_class: int,
             layer_name: str = "stage5") -> HeatMap:
    """Heat map of the named layer's contribution to one class logit.

    ``image`` is a single (C, H, W) tile; the model runs in eval mode
    with the tape enabled so the intermediate activation keeps its
    gradient.
    """
    if image.ndim != 3:
        raise ContractError(f"grad_cam expects one (C,H,W) image, got {image.shape}")
    num_classes = model.config.num_classes
    if not 0 <= target_class < num_classes:
        raise ConfigError(f"target class {target_class} outside 0..{num_classes - 1}")
    prev_mode = model.mode
    model.eval()
    try:
        capture: dict = {}
        x = Tensor(image[None].astype(model.dtype), requires_grad=True)
        logits = model.forward(x, capture=capture)
        if layer_name not in capture:
            raise ConfigError(
                f"unknown layer {layer_name!r}; available: {sorted(capture)}"
            )
        act = capture[layer_name]
        if act.ndim != 4:
            raise ConfigError(f"layer {layer_name!r} is not a 4-D activation")
        target = T.reduce_sum(T.index_last(logits, target_class))
        target.backward()
    finally:
        model.mode = prev_mode

    activations = act.data[0]
    grads = act.grad[0] if act.grad is not None else np.zeros_like(activations)
    cam = cam_from_activations(activations, grads, image.shape[1:])
    return HeatMap(values=cam, layer_name=layer_name,
                   target_class=target_class)


def cam_from_activations(activations: np.ndarray, grads: np.ndarray,
                         out_hw) -> np.ndarray:
    """Rectified gradient-weighted channel sum, upsampled and normalized
    by the max when any activation survives the rectification."""
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * activations).sum(axis=0), 0.0)
    cam = bilinear_resize(cam, out_hw)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.astype(np.float64)


def save_heatmap_pgm(heat: HeatMap, path) -> None:
    """8-bit binary PGM (P5) rendering of the map."""
    gray = np.clip(np.round(heat.values * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def save_heatmap_tile(heat: HeatMap, path) -> None:
    """Heat map as a single-channel tile record (label = target class)."""
    save_tile(path, heat.values[None, :, :].astype(np.float32),
              heat.target_class)
