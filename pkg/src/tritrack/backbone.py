"""Shared feature extractor: a small stride-16 CNN plus input preprocessing.

Five 3x3 conv stages with strides (2, 2, 2, 2, 1) give a total stride of
16, so a 666x400 input maps to a 42x25-cell feature grid (ceil division at
each stage). A final 1x1 projection sets the output channel count. All
stages except the last can be frozen for training; frozen stages then cost
no backward work because their outputs never require gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box
from .ndops import Tensor, conv2d, relu
from .nn import Module, he_conv, zeros_param

STAGE_STRIDES = (2, 2, 2, 2, 1)
TOTAL_STRIDE = 16

# Fixed network canvas (width, height); aspect is preserved by padding
# right/bottom, so boxes map back with a pure scale factor.
CANVAS_W = 666
CANVAS_H = 400


@dataclass
class BackboneConfig:
    out_channels: int = 64
    stage_widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    total_stride: int = TOTAL_STRIDE
    freeze_except_last: bool = True

    def __post_init__(self):
        if self.total_stride != TOTAL_STRIDE:
            raise ValueError("total stride is fixed at 16")
        if len(self.stage_widths) != len(STAGE_STRIDES):
            raise ValueError(f"expected {len(STAGE_STRIDES)} stage widths")
        if self.out_channels < 8:
            raise ValueError("out_channels must be >= 8")


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        ci = 3
        for k, co in enumerate(widths):
            setattr(self, f"w{k}", he_conv(rng, co, ci, 3, 3))
            setattr(self, f"b{k}", zeros_param(co))
            ci = co
        self.wproj = he_conv(rng, cfg.out_channels, ci, 1, 1)
        self.bproj = zeros_param(cfg.out_channels)
        self.set_freeze(cfg.freeze_except_last)

    def set_freeze(self, freeze: bool) -> None:
        """Freeze every conv stage except the last (projection stays live)."""
        n = len(self.cfg.stage_widths)
        for k in range(n - 1):
            self._params[f"w{k}"].requires_grad = not freeze
            self._params[f"b{k}"].requires_grad = not freeze

    def frozen_parameter_names(self) -> list[str]:
        return [name for name, p in self.named_parameters() if not p.requires_grad]

    def extract(self, image: np.ndarray) -> Tensor:
        """RGB (h, w, 3) in [0, 1] -> feature map (c, ceil(h/16), ceil(w/16))."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"extract expects (h, w, 3) RGB, got {image.shape}")
        x = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)) - 0.5)
        for k, stride in enumerate(STAGE_STRIDES):
            x = relu(
                conv2d(x, self._params[f"w{k}"], self._params[f"b{k}"], stride=stride, pad=1)
            )
        return conv2d(x, self.wproj, self.bproj)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resize of an (h, w, 3) float image."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(frozen=True)
class PreprocessInfo:
    scale: float
    pad_right: int
    pad_bottom: int

    def box_to_network(self, box: Box) -> Box:
        return box.scaled(self.scale)

    def box_to_original(self, box: Box) -> Box:
        return box.scaled(1.0 / self.scale)


def preprocess(image: np.ndarray) -> tuple[np.ndarray, PreprocessInfo]:
    """Resize into the 666x400 canvas, preserving aspect, zero-padding
    right/bottom. Returns the canvas image and the box mapping info."""
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ValueError(f"preprocess expects non-empty (h, w, 3) RGB, got {image.shape}")
    h, w = image.shape[:2]
    scale = min(CANVAS_W / w, CANVAS_H / h)
    new_w = min(CANVAS_W, max(1, round(w * scale)))
    new_h = min(CANVAS_H, max(1, round(h * scale)))
    resized = resize_bilinear(image.astype(np.float64), new_h, new_w)
    canvas = np.zeros((CANVAS_H, CANVAS_W, 3), dtype=np.float64)
    canvas[:new_h, :new_w] = resized
    return canvas, PreprocessInfo(scale, CANVAS_W - new_w, CANVAS_H - new_h)
