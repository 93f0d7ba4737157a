"""Stage 1: multi-scale template pooling, per-scale depth-wise
cross-correlation, attention fusion, and an anchor-free proposal head.

The target region of the query feature map is pooled into K square
templates (default 3x3, 5x5, 9x9). Each template is correlated channel by
channel against the search feature map with zero padding, the K response
maps are concatenated, refined by channel/spatial attention plus an
embedded-Gaussian self-attention block, and a two-branch conv head emits
per-cell objectness logits and positive ltrb distances (via exp). Greedy
NMS over the decoded cells yields at most `top_n` proposals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, map_cell_to_image, nms_arrays
from .ndops import (
    Tensor,
    _node,
    add,
    concat,
    conv2d,
    div,
    exp,
    global_avg_pool,
    global_max_pool,
    linear,
    matmul,
    maximum,
    minimum,
    mul,
    pow_const,
    reduce_max,
    reduce_mean,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sub,
    sum_all,
    take,
    transpose,
)
from .nn import Module, const_param, he_conv, he_linear, zeros_param

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


# ---------------------------------------------------------------------------
# pooling and correlation primitives


def _roi_sample_grid(box: tuple[float, float, float, float], out_size: int, samples: int):
    """Continuous sample coordinates for ROI pooling: `samples`^2 points per
    bin at fractions (k + 0.5)/samples, returned in index space."""
    x1, y1, x2, y2 = box
    bw = (x2 - x1) / out_size
    bh = (y2 - y1) / out_size
    fr = (np.arange(samples) + 0.5) / samples
    cx = x1 + (np.arange(out_size)[:, None] + fr[None, :]) * bw - 0.5
    cy = y1 + (np.arange(out_size)[:, None] + fr[None, :]) * bh - 0.5
    return cy.reshape(-1), cx.reshape(-1)


def roi_align(
    fm: Tensor, box: tuple[float, float, float, float], out_size: int, samples: int = 2
) -> Tensor:
    """Average-pool a feature-coordinate box to (c, out_size, out_size).

    Each output bin averages a fixed samples x samples grid of bilinear
    lookups (zero-padded outside the map). Differentiable w.r.t. the map.
    """
    c, h, w = fm.data.shape
    py, px = _roi_sample_grid(box, out_size, samples)
    gy = py[:, None]
    gx = px[None, :]
    inside = (gx >= -1.0) & (gx <= w) & (gy >= -1.0) & (gy <= h)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)

    corner_idx = []
    corner_w = []
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            ok = inside & (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = (1.0 - np.abs(gy - yy)) * (1.0 - np.abs(gx - xx)) * ok
            flat = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
            corner_idx.append(np.broadcast_to(flat, wgt.shape).reshape(-1))
            corner_w.append(wgt.reshape(-1))

    flat_fm = fm.data.reshape(c, h * w)
    n = py.size
    vals = np.zeros((c, n * n), dtype=fm.data.dtype)
    for idx, wgt in zip(corner_idx, corner_w):
        vals += flat_fm[:, idx] * wgt
    data = (
        vals.reshape(c, out_size, samples, out_size, samples).mean(axis=(2, 4))
    )

    def bw():
        def run(g):
            # spread the bin average back over its samples, then scatter
            gsamp = np.repeat(
                np.repeat(g, samples, axis=1), samples, axis=2
            ).reshape(c, n * n) / (samples * samples)
            acc = np.zeros((h * w, c), dtype=g.dtype)
            for idx, wgt in zip(corner_idx, corner_w):
                np.add.at(acc, idx, (gsamp * wgt).T)
            return (acc.T.reshape(c, h, w),)

        return run

    return _node(data, (fm,), bw)


def trident_align(
    z: Tensor, target_box: Box, stride: int, scales: tuple[int, ...]
) -> list[Tensor]:
    """Pool one image-coordinate box into a pyramid of square templates."""
    fb = (
        target_box.x1 / stride,
        target_box.y1 / stride,
        target_box.x2 / stride,
        target_box.y2 / stride,
    )
    return [roi_align(z, fb, s) for s in scales]


def depthwise_xcorr(x: Tensor, z: Tensor) -> Tensor:
    """Per-channel 2-D cross-correlation with zero padding (same dims as x)."""
    c, h, w = x.data.shape
    cz, kh, kw = z.data.shape
    if cz != c:
        raise ValueError(f"channel mismatch: search {c} vs template {cz}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("template spatial dims must be odd")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(x.data)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, u : u + h, v : v + w] * z.data[:, u, v][:, None, None]

    def bw():
        xp_saved = xp

        def run(g):
            gx = np.zeros_like(xp_saved)
            gz = np.zeros_like(z.data)
            for u in range(kh):
                for v in range(kw):
                    gx[:, u : u + h, v : v + w] += g * z.data[:, u, v][:, None, None]
                    gz[:, u, v] = (xp_saved[:, u : u + h, v : v + w] * g).sum(axis=(1, 2))
            return gx[:, ph : ph + h, pw : pw + w], gz

        return run

    return _node(out, (x, z), bw)


# ---------------------------------------------------------------------------
# fusion blocks


class ChannelGate(Module):
    """Sigmoid-gated MLP over global avg+max pooled vectors (shared MLP)."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.w1 = he_linear(rng, hidden, channels)
        self.b1 = zeros_param(hidden)
        self.w2 = he_linear(rng, channels, hidden)
        self.b2 = zeros_param(channels)

    def forward(self, x: Tensor) -> Tensor:
        def mlp(v):
            return linear(relu(linear(v, self.w1, self.b1)), self.w2, self.b2)

        gate = sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))))
        return mul(x, reshape(gate, (x.data.shape[0], 1, 1)))


class SpatialGate(Module):
    """Sigmoid-gated conv over channel-pooled (mean, max) maps."""

    def __init__(self, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.w = he_conv(rng, 1, 2, kernel, kernel)
        self.b = zeros_param(1)
        self.kernel = kernel

    def forward(self, x: Tensor) -> Tensor:
        pooled = concat(
            [reduce_mean(x, axis=0, keepdims=True), reduce_max(x, axis=0, keepdims=True)],
            axis=0,
        )
        gate = sigmoid(conv2d(pooled, self.w, self.b, pad=self.kernel // 2))
        return mul(x, gate)


class NonLocalBlock(Module):
    """Embedded-Gaussian self-attention over spatial positions, residual."""

    def __init__(self, channels: int, inter: int, rng: np.random.Generator):
        super().__init__()
        self.theta = he_conv(rng, inter, channels, 1, 1)
        self.phi = he_conv(rng, inter, channels, 1, 1)
        self.g = he_conv(rng, inter, channels, 1, 1)
        self.out_w = he_conv(rng, channels, inter, 1, 1)
        self.out_b = zeros_param(channels)
        self.inter = inter

    def forward(self, x: Tensor) -> Tensor:
        c, h, w = x.data.shape
        n = h * w
        th = reshape(conv2d(x, self.theta, None), (self.inter, n))
        ph = reshape(conv2d(x, self.phi, None), (self.inter, n))
        gg = reshape(conv2d(x, self.g, None), (self.inter, n))
        attn = softmax(matmul(transpose(th, (1, 0)), ph), axis=1)  # (n, n)
        y = transpose(matmul(attn, transpose(gg, (1, 0))), (1, 0))  # (inter, n)
        y = conv2d(reshape(y, (self.inter, h, w)), self.out_w, self.out_b)
        return add(x, y)


class FuseRefine(Module):
    """Concatenate the K correlation maps, apply channel then spatial
    attention, project back to c channels, and run the non-local block."""

    def __init__(
        self,
        channels: int,
        num_scales: int,
        rng: np.random.Generator,
        reduction: int = 8,
        spatial_kernel: int = 7,
        nonlocal_inter: int | None = None,
    ):
        super().__init__()
        kc = channels * num_scales
        self.channel_gate = ChannelGate(kc, reduction, rng)
        self.spatial_gate = SpatialGate(spatial_kernel, rng)
        self.wproj = he_conv(rng, channels, kc, 1, 1)
        self.bproj = zeros_param(channels)
        self.nonlocal_block = NonLocalBlock(
            channels, nonlocal_inter or max(channels // 4, 4), rng
        )

    def forward(self, corr_maps: list[Tensor]) -> Tensor:
        dims = {m.data.shape for m in corr_maps}
        if len(dims) != 1:
            raise ValueError(f"correlation maps disagree on dims: {dims}")
        x = concat(corr_maps, axis=0)
        x = self.channel_gate.forward(x)
        x = self.spatial_gate.forward(x)
        x = conv2d(x, self.wproj, self.bproj)
        return self.nonlocal_block.forward(x)


@dataclass
class RpnOutput:
    cls: Tensor  # (1, h, w) logits
    reg: Tensor  # (4, h, w) strictly positive ltrb distances, image pixels


class RpnHead(Module):
    """Two conv branches (cls, reg); regression is made positive via exp."""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        width: int = 32,
        depth: int = 2,
        reg_bias_init: float = np.log(16.0),
    ):
        super().__init__()
        for branch in ("cls", "reg"):
            ci = channels
            for k in range(depth):
                setattr(self, f"{branch}_w{k}", he_conv(rng, width, ci, 3, 3))
                setattr(self, f"{branch}_b{k}", zeros_param(width))
                ci = width
        self.cls_out_w = he_conv(rng, 1, width, 3, 3)
        self.cls_out_b = zeros_param(1)
        self.reg_out_w = he_conv(rng, 4, width, 3, 3)
        # exp(bias) sets the starting box size to about one stride cell
        self.reg_out_b = const_param(reg_bias_init, 4)
        self.depth = depth

    def forward(self, x: Tensor) -> RpnOutput:
        def branch(name: str, t: Tensor) -> Tensor:
            for k in range(self.depth):
                t = relu(
                    conv2d(t, self._params[f"{name}_w{k}"], self._params[f"{name}_b{k}"], pad=1)
                )
            return t

        cls = conv2d(branch("cls", x), self.cls_out_w, self.cls_out_b, pad=1)
        reg = exp(conv2d(branch("reg", x), self.reg_out_w, self.reg_out_b, pad=1))
        return RpnOutput(cls=cls, reg=reg)


class TridentRpn(Module):
    def __init__(
        self,
        channels: int,
        scales: tuple[int, ...],
        rng: np.random.Generator,
        head_width: int = 32,
        head_depth: int = 2,
        attn_reduction: int = 8,
        spatial_kernel: int = 7,
        nonlocal_inter: int | None = None,
    ):
        super().__init__()
        self.scales = tuple(scales)
        self.fuse = FuseRefine(
            channels, len(scales), rng, attn_reduction, spatial_kernel, nonlocal_inter
        )
        self.head = RpnHead(channels, rng, width=head_width, depth=head_depth)

    def build_pyramid(self, z: Tensor, target_box: Box, stride: int) -> list[Tensor]:
        return trident_align(z, target_box, stride, self.scales)

    def forward(self, pyramid: list[Tensor], x: Tensor) -> RpnOutput:
        corr = [depthwise_xcorr(x, zi) for zi in pyramid]
        return self.head.forward(self.fuse.forward(corr))


# ---------------------------------------------------------------------------
# targets, loss, proposals


def assign_rpn_targets(
    gt: Box, map_shape: tuple[int, int], stride: int
) -> tuple[np.ndarray, np.ndarray, int]:
    """Label every feature cell by whether its image point is strictly
    inside gt; ltrb targets are defined on the positives only.

    Returns (labels (h, w) in {0, 1}, targets (4, h, w), n_pos).
    """
    h, w = map_shape
    px = (np.arange(w) + 0.5) * stride
    py = (np.arange(h) + 0.5) * stride
    inside_x = (px > gt.x1) & (px < gt.x2)
    inside_y = (py > gt.y1) & (py < gt.y2)
    labels = (inside_y[:, None] & inside_x[None, :]).astype(np.float64)
    targets = np.zeros((4, h, w))
    targets[0] = px[None, :] - gt.x1
    targets[1] = py[:, None] - gt.y1
    targets[2] = gt.x2 - px[None, :]
    targets[3] = gt.y2 - py[:, None]
    targets *= labels[None]
    return labels, targets, int(labels.sum())


def sigmoid_focal_sum(
    logits: Tensor, pos_mask: np.ndarray, neg_mask: np.ndarray
) -> Tensor:
    """Sum of focal terms over masked positions, computed stably from logits.

    Positive cells contribute alpha * (1-p)^gamma * -log(p); negatives
    contribute (1-alpha) * p^gamma * -log(1-p), with p = sigmoid(logit).
    """
    p = sigmoid(logits)
    pos = mul(
        mul(pow_const(sub(Tensor(np.float64(1.0)), p), FOCAL_GAMMA), softplus(mul(logits, -1.0))),
        Tensor(pos_mask * FOCAL_ALPHA),
    )
    neg = mul(
        mul(pow_const(p, FOCAL_GAMMA), softplus(logits)),
        Tensor(neg_mask * (1.0 - FOCAL_ALPHA)),
    )
    return add(sum_all(pos), sum_all(neg))


def iou_loss_sum(pred: tuple, gt: tuple) -> Tensor:
    """Sum over samples of (1 - IoU) between corner-form boxes.

    `pred` is four 1-D tensors (x1, y1, x2, y2); `gt` is four constant
    arrays. Differentiable almost everywhere via min/max subgradients.
    """
    px1, py1, px2, py2 = pred
    gx1, gy1, gx2, gy2 = (Tensor(np.asarray(v, dtype=np.float64)) for v in gt)
    zero = Tensor(np.float64(0.0))
    iw = maximum(sub(minimum(px2, gx2), maximum(px1, gx1)), zero)
    ih = maximum(sub(minimum(py2, gy2), maximum(py1, gy1)), zero)
    inter = mul(iw, ih)
    area_p = mul(sub(px2, px1), sub(py2, py1))
    area_g = mul(sub(gx2, gx1), sub(gy2, gy1))
    union = sub(add(area_p, area_g), inter)
    iou = div(inter, union)
    return sum_all(sub(Tensor(np.float64(1.0)), iou))


def rpn_loss(
    out: RpnOutput,
    labels: np.ndarray,
    targets: np.ndarray,
    stride: int,
    lam: float = 1.0,
) -> Tensor:
    """Focal classification over all cells plus linear IoU regression over
    positives, both normalized by the positive count."""
    n_pos = int(labels.sum())
    if n_pos < 1:
        raise ValueError("rpn_loss requires at least one positive cell")
    h, w = labels.shape
    flat_logits = reshape(out.cls, (h * w,))
    cls_sum = sigmoid_focal_sum(flat_logits, labels.reshape(-1), 1.0 - labels.reshape(-1))

    pos_idx = np.flatnonzero(labels.reshape(-1))
    reg_pos = take(reshape(out.reg, (4, h * w)), pos_idx, axis=1)  # (4, n_pos)
    px = ((pos_idx % w) + 0.5) * stride
    py = ((pos_idx // w) + 0.5) * stride
    rows = [
        reshape(take(reg_pos, np.array([k]), axis=0), (n_pos,)) for k in range(4)
    ]
    pred = (
        sub(Tensor(px), rows[0]),
        sub(Tensor(py), rows[1]),
        add(Tensor(px), rows[2]),
        add(Tensor(py), rows[3]),
    )
    tgt = targets.reshape(4, h * w)[:, pos_idx]
    gt = (px - tgt[0], py - tgt[1], px + tgt[2], py + tgt[3])
    reg_sum = iou_loss_sum(pred, gt)
    return mul(add(cls_sum, mul(reg_sum, lam)), 1.0 / n_pos)


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float
    cell: tuple[int, int]


def propose(
    cls_map: np.ndarray,
    reg_map: np.ndarray,
    stride: int,
    iou_threshold: float = 0.9,
    top_n: int = 64,
    canvas: tuple[float, float] = (666.0, 400.0),
    min_area: float = 1.0,
) -> list[Proposal]:
    """Decode every cell to a scored box, clip to the canvas, drop
    degenerate boxes (area <= min_area), and run greedy NMS."""
    _, h, w = cls_map.shape
    scores = _sigmoid_np(cls_map.reshape(-1))
    px = ((np.arange(w) + 0.5) * stride)[None, :].repeat(h, axis=0).reshape(-1)
    py = ((np.arange(h) + 0.5) * stride)[:, None].repeat(w, axis=1).reshape(-1)
    reg = reg_map.reshape(4, -1)
    boxes = np.stack(
        [px - reg[0], py - reg[1], px + reg[2], py + reg[3]], axis=1
    )
    boxes[:, 0::2] = boxes[:, 0::2].clip(0.0, canvas[0])
    boxes[:, 1::2] = boxes[:, 1::2].clip(0.0, canvas[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    valid = np.flatnonzero(areas > min_area)
    if valid.size == 0:
        return []
    kept = nms_arrays(boxes[valid], scores[valid], iou_threshold, top_n)
    out = []
    for k in kept:
        idx = int(valid[k])
        out.append(
            Proposal(
                box=Box(*boxes[idx].tolist()),
                score=float(scores[idx]),
                cell=(idx // w, idx % w),
            )
        )
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
