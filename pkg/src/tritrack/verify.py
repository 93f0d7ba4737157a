"""Independent oracles and finite-difference machinery for self-verification.

Everything here is deliberately written without reusing the vectorized
production code paths: convolutions are 6-deep loops, ROI pooling is
re-derived from scratch, NMS is a quadratic scan over a full IoU matrix.
The `run_checks` registry at the bottom powers the `verify` CLI subcommand;
the test suite calls the same oracles directly.
"""

from __future__ import annotations

import math
import time
from typing import Callable, Sequence

import numpy as np

from . import ndops
from .geometry import Box, iou
from .ndops import Tensor, backward


# ---------------------------------------------------------------------------
# oracles


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Direct 6-loop convolution used as the conv2d oracle."""
    ci, h, win = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (win + 2 * pad - kw) // stride + 1
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def naive_depthwise_xcorr(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-channel sliding-window correlation with zero padding."""
    c, h, w = x.shape
    _, kh, kw = z.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                s = 0.0
                for u in range(kh):
                    for v in range(kw):
                        s += xp[ch, i + u, j + v] * z[ch, u, v]
                out[ch, i, j] = s
    return out


def _bilinear_at(plane: np.ndarray, py: float, px: float) -> float:
    """Scalar bilinear lookup with zero padding, independent of ndops."""
    h, w = plane.shape
    if px < -1.0 or px > w or py < -1.0 or py > h:
        return 0.0
    x0, y0 = math.floor(px), math.floor(py)
    val = 0.0
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                wy = 1.0 - abs(py - yy)
                wx = 1.0 - abs(px - xx)
                val += plane[yy, xx] * wy * wx
    return val


def reference_roi_align(
    fm: np.ndarray, box: tuple[float, float, float, float], out_size: int, samples: int = 2
) -> np.ndarray:
    """Independent ROI pooling with the production sampling grid.

    Same convention, separate derivation: out_size x out_size bins over the
    box, `samples` x `samples` points per bin at fractions (k + 0.5) /
    samples of the bin, each bilinearly interpolated in index space
    (continuous coordinate minus half a cell), then averaged.
    """
    c, h, w = fm.shape
    x1, y1, x2, y2 = box
    bw = (x2 - x1) / out_size
    bh = (y2 - y1) / out_size
    out = np.zeros((c, out_size, out_size))
    for ch in range(c):
        for r in range(out_size):
            for col in range(out_size):
                acc = 0.0
                for sy in range(samples):
                    for sx in range(samples):
                        cy = y1 + (r + (sy + 0.5) / samples) * bh
                        cx = x1 + (col + (sx + 0.5) / samples) * bw
                        acc += _bilinear_at(fm[ch], cy - 0.5, cx - 0.5)
                out[ch, r, col] = acc / (samples * samples)
    return out


def dense_roi_align(
    fm: np.ndarray, box: tuple[float, float, float, float], out_size: int, grid: int = 100
) -> np.ndarray:
    """Dense-sampling pooling oracle: grid x grid bilinear samples per bin.

    Converges to the true bin average of the bilinear surface, so the
    production 2x2-sample pooling should agree to a few percent.
    """
    c, h, w = fm.shape
    x1, y1, x2, y2 = box
    bw = (x2 - x1) / out_size
    bh = (y2 - y1) / out_size
    fr = (np.arange(grid) + 0.5) / grid
    out = np.zeros((c, out_size, out_size))
    for r in range(out_size):
        for col in range(out_size):
            cy = y1 + (r + fr) * bh - 0.5
            cx = x1 + (col + fr) * bw - 0.5
            vals = _bilinear_grid(fm, cy, cx)
            out[:, r, col] = vals.mean(axis=(1, 2))
    return out


def _bilinear_grid(fm: np.ndarray, cy: np.ndarray, cx: np.ndarray) -> np.ndarray:
    """Vectorized zero-padded bilinear lookup on a mesh (for the dense oracle)."""
    c, h, w = fm.shape
    py = cy[:, None]
    px = cx[None, :]
    inside = (px >= -1.0) & (px <= w) & (py >= -1.0) & (py <= h)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    out = np.zeros((c, cy.size, cx.size))
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            ok = inside & (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = (1.0 - np.abs(py - yy)) * (1.0 - np.abs(px - xx)) * ok
            out += fm[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)] * wgt
    return out


def smooth_random_map(
    rng: np.random.Generator, c: int, h: int, w: int, factor: int = 32
) -> np.ndarray:
    """Random low-frequency field: coarse noise bilinearly upsampled.

    The dense-sampling oracle measures how well the fixed 2x2-per-bin rule
    approximates the true bin average. On white noise the quadrature error
    of any fixed low-order rule is tens of percent, so that comparison is
    run on smooth fields (the class real feature maps belong to), where
    alignment or weighting bugs still show up but quadrature error does
    not. Exact grid correctness is pinned separately by
    `reference_roi_align` at 1e-12.
    """
    coarse = rng.standard_normal((c, h // factor + 2, w // factor + 2))
    ys = np.linspace(0.0, coarse.shape[1] - 1.001, h)
    xs = np.linspace(0.0, coarse.shape[2] - 1.001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    return (
        coarse[:, y0][:, :, x0] * (1 - fy) * (1 - fx)
        + coarse[:, y0][:, :, x0 + 1] * (1 - fy) * fx
        + coarse[:, y0 + 1][:, :, x0] * fy * (1 - fx)
        + coarse[:, y0 + 1][:, :, x0 + 1] * fy * fx
    )


def brute_force_nms(
    scored_boxes: Sequence[tuple[Box, float]], iou_threshold: float, top_n: int
) -> list[int]:
    """Quadratic greedy NMS over scalar IoUs; returns kept input indices."""
    n = len(scored_boxes)
    order = sorted(range(n), key=lambda k: (-scored_boxes[k][1], k))
    kept: list[int] = []
    for k in order:
        if len(kept) >= top_n:
            break
        ok = True
        for j in kept:
            if iou(scored_boxes[k][0], scored_boxes[j][0]) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(k)
    return kept


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(
    build: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    max_coords: int = 8,
    step: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-6,
) -> float:
    """Compare analytic gradients of a scalar `build(*tensors)` to central
    finite differences.

    Checks every coordinate of small tensors and a random sample of
    `max_coords` for larger ones. A mismatch is retried at smaller steps
    before failing: piecewise-linear operators (relu, min/max) have
    subgradient kinks that a fixed central step can straddle, while a
    genuinely wrong backward disagrees at every step. Raises
    AssertionError on the first real mismatch; returns the worst absolute
    deviation seen.
    """
    loss = build(*tensors)
    grads = backward(loss)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        g = grads.get(t)
        if g is None:
            g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        for k in coords:
            an = float(g.reshape(-1)[k])
            ok = False
            for h in (step, step / 8.0, step / 64.0):
                orig = flat[k]
                flat[k] = orig + h
                up = float(build(*tensors).data)
                flat[k] = orig - h
                dn = float(build(*tensors).data)
                flat[k] = orig
                fd = (up - dn) / (2.0 * h)
                err = abs(an - fd)
                if err <= max(rtol * abs(fd), atol):
                    ok = True
                    worst = max(worst, err)
                    break
            if not ok:
                raise AssertionError(
                    f"gradient mismatch at coord {k}: analytic {an!r} vs "
                    f"finite-difference {fd!r} (|err|={err:.3e})"
                )
    return worst
