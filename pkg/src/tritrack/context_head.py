"""Stage 2: candidate pooling, global context summarization, context
embedding (four variants), elementwise matching, and the detection loss.

Every proposal box is pooled to a (c, 5, 5) candidate feature. The frame's
global context is the channel concatenation of the elementwise max and
mean over all candidates. A generator network turns that summary into a
modulation which is applied to each candidate (and, at init time, to the
target feature); the modulated candidate is compared against the
context-embedded target by elementwise product and scored by a small
fully connected head that also regresses a bounded box refinement.
"""

from __future__ import annotations

import numpy as np

from .geometry import Box, iou
from .ndops import (
    Tensor,
    add,
    concat,
    conv2d,
    linear,
    mul,
    relu,
    reshape,
    sigmoid,
    stack_max,
    stack_mean,
    sub,
    take,
    tanh,
)
from .nn import Module, const_param, he_conv, he_linear, zeros_param
from .trident_rpn import Proposal, iou_loss_sum, roi_align, sigmoid_focal_sum

EMBED_VARIANTS = ("simple_concat", "simple_add", "cbam", "film")


def pool_candidates(
    x: Tensor, proposals: list[Proposal], stride: int, out_size: int = 5
) -> list[Tensor]:
    """Pool each proposal box on the search feature map to (c, s, s)."""
    if not proposals:
        raise ValueError("pool_candidates requires at least one proposal")
    feats = []
    for p in proposals:
        fb = (p.box.x1 / stride, p.box.y1 / stride, p.box.x2 / stride, p.box.y2 / stride)
        feats.append(roi_align(x, fb, out_size))
    return feats


def context_pool(candidates: list[Tensor]) -> Tensor:
    """(max over candidates, mean over candidates) concatenated to (2c, s, s)."""
    if not candidates:
        raise ValueError("context_pool requires a non-empty candidate set")
    return concat([stack_max(candidates), stack_mean(candidates)], axis=0)


class ContextEmbed(Module):
    """Context generator + embedder; `kind` selects one of the four variants.

    Generator trunks are 1x1 conv stacks with ReLU between layers. The
    modulation heads are initialized so that the module starts out as an
    identity on the candidate (zero delta / unit gates / gamma=1, beta=0),
    except for simple_concat which replaces the feature outright.
    """

    def __init__(self, kind: str, channels: int, rng: np.random.Generator):
        super().__init__()
        if kind not in EMBED_VARIANTS:
            raise ValueError(f"unknown embed variant {kind!r}")
        self.kind = kind
        self.channels = channels
        c = channels
        if kind == "simple_concat":
            # g1 = identity; g2 is a 3-layer CNN on [x_i, x_cxt] (3c -> c)
            self.g2_w0 = he_conv(rng, c, 3 * c, 1, 1)
            self.g2_b0 = zeros_param(c)
            self.g2_w1 = he_conv(rng, c, c, 1, 1)
            self.g2_b1 = zeros_param(c)
            self.g2_w2 = he_conv(rng, c, c, 1, 1)
            self.g2_b2 = zeros_param(c)
        else:
            # shared 2-layer trunk on x_cxt (2c -> c -> c), variant heads on top
            self.g1_w0 = he_conv(rng, c, 2 * c, 1, 1)
            self.g1_b0 = zeros_param(c)
            self.g1_w1 = he_conv(rng, c, c, 1, 1)
            self.g1_b1 = zeros_param(c)
            if kind == "simple_add":
                self.delta_w = zeros_param(c, c, 1, 1)
                self.delta_b = zeros_param(c)
            elif kind == "cbam":
                self.mc_w = zeros_param(c, c)
                self.mc_b = const_param(4.0, c)  # sigmoid(4) ~ 1: near-identity start
                self.ms_w = zeros_param(1, c, 1, 1)
                self.ms_b = const_param(4.0, 1)
            elif kind == "film":
                self.gamma_w = zeros_param(c, c, 1, 1)
                self.gamma_b = const_param(1.0, c)
                self.beta_w = zeros_param(c, c, 1, 1)
                self.beta_b = zeros_param(c)

    def _trunk(self, x_cxt: Tensor) -> Tensor:
        h = relu(conv2d(x_cxt, self.g1_w0, self.g1_b0))
        return relu(conv2d(h, self.g1_w1, self.g1_b1))

    def forward(self, x_cxt: Tensor, xi: Tensor) -> Tensor:
        c, s, _ = xi.data.shape
        if x_cxt.data.shape != (2 * c, s, s):
            raise ValueError(
                f"context shape {x_cxt.data.shape} does not match candidate {xi.data.shape}"
            )
        if self.kind == "simple_concat":
            h = relu(conv2d(concat([xi, x_cxt], axis=0), self.g2_w0, self.g2_b0))
            h = relu(conv2d(h, self.g2_w1, self.g2_b1))
            return conv2d(h, self.g2_w2, self.g2_b2)
        t = self._trunk(x_cxt)
        if self.kind == "simple_add":
            return add(xi, conv2d(t, self.delta_w, self.delta_b))
        if self.kind == "cbam":
            from .ndops import global_avg_pool

            mc = sigmoid(linear(global_avg_pool(t), self.mc_w, self.mc_b))
            gated = mul(xi, reshape(mc, (c, 1, 1)))
            ms = sigmoid(conv2d(t, self.ms_w, self.ms_b))
            return mul(gated, ms)
        gamma = conv2d(t, self.gamma_w, self.gamma_b)
        beta = conv2d(t, self.beta_w, self.beta_b)
        return add(mul(gamma, xi), beta)


def embed_target(embed: ContextEmbed, x_cxt_init: Tensor, z0: Tensor) -> Tensor:
    """Embed the GT-pooled target feature with the initial frame's context."""
    return embed.forward(x_cxt_init, z0)


class MatchHead(Module):
    """Elementwise product of candidate and target, then an MLP emitting one
    classification logit and four bounded refinement values per candidate."""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        pooled_size: int = 5,
        hidden: tuple[int, ...] = (256,),
    ):
        super().__init__()
        self.pooled_size = pooled_size
        in_dim = channels * pooled_size * pooled_size
        self.hidden = tuple(hidden)
        for k, width in enumerate(self.hidden):
            setattr(self, f"w{k}", he_linear(rng, width, in_dim))
            setattr(self, f"b{k}", zeros_param(width))
            in_dim = width
        self.out_w = he_linear(rng, 5, in_dim)
        self.out_b = zeros_param(5)

    def forward(self, candidates: list[Tensor], z_tilde: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (logits (n,), raw deltas (n, 4))."""
        d = int(np.prod(candidates[0].data.shape))
        rows = [reshape(mul(xi, z_tilde), (1, d)) for xi in candidates]
        h = concat(rows, axis=0)
        for k in range(len(self.hidden)):
            h = relu(linear(h, self._params[f"w{k}"], self._params[f"b{k}"]))
        out = linear(h, self.out_w, self.out_b)
        n = len(candidates)
        logits = reshape(take(out, np.array([0]), axis=1), (n,))
        deltas = take(out, np.array([1, 2, 3, 4]), axis=1)
        return logits, deltas


def refine_corners(
    deltas: Tensor, proposals: list[Proposal], bound: float = 0.5
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Decode bounded per-side refinements around each proposal box.

    Each raw delta passes through tanh and is scaled to at most `bound` of
    the proposal's width/height; positive values grow the box outward.
    Returns differentiable (x1, y1, x2, y2) tensors of shape (n,).
    """
    n = len(proposals)
    px1 = np.array([p.box.x1 for p in proposals])
    py1 = np.array([p.box.y1 for p in proposals])
    px2 = np.array([p.box.x2 for p in proposals])
    py2 = np.array([p.box.y2 for p in proposals])
    w = px2 - px1
    h = py2 - py1
    t = tanh(deltas)  # (n, 4)

    def col(k):
        return reshape(take(t, np.array([k]), axis=1), (n,))

    return (
        sub(Tensor(px1), mul(col(0), Tensor(w * bound))),
        sub(Tensor(py1), mul(col(1), Tensor(h * bound))),
        add(Tensor(px2), mul(col(2), Tensor(w * bound))),
        add(Tensor(py2), mul(col(3), Tensor(h * bound))),
    )


def refined_boxes_np(
    deltas: np.ndarray, proposals: list[Proposal], bound: float = 0.5
) -> list[Box]:
    """Numpy twin of refine_corners for inference."""
    out = []
    for d, p in zip(deltas, proposals):
        w, h = p.box.width, p.box.height
        dl, dt, dr, db = np.tanh(d) * bound
        out.append(
            Box(p.box.x1 - dl * w, p.box.y1 - dt * h, p.box.x2 + dr * w, p.box.y2 + db * h)
        )
    return out


def assign_det_targets(
    proposals: list[Proposal], gt: Box, tau_p: float = 0.5, tau_n: float = 0.4
) -> np.ndarray:
    """Label proposals by IoU with gt: 1 above tau_p, 0 below tau_n,
    -1 (ignored) in between."""
    labels = np.empty(len(proposals), dtype=np.int64)
    for k, p in enumerate(proposals):
        v = iou(p.box, gt)
        if v > tau_p:
            labels[k] = 1
        elif v < tau_n:
            labels[k] = 0
        else:
            labels[k] = -1
    return labels


def det_loss(
    logits: Tensor,
    deltas: Tensor,
    proposals: list[Proposal],
    labels: np.ndarray,
    gt: Box,
    lam: float = 1.0,
    bound: float = 0.5,
) -> Tensor:
    """Focal classification over labeled candidates plus linear IoU loss of
    the refined positives against gt, both normalized by the positive count."""
    pos = labels == 1
    n_pos = int(pos.sum())
    if n_pos < 1:
        raise ValueError("det_loss requires at least one positive candidate")
    pos_mask = pos.astype(np.float64)
    neg_mask = (labels == 0).astype(np.float64)
    cls_sum = sigmoid_focal_sum(logits, pos_mask, neg_mask)

    pos_idx = np.flatnonzero(pos)
    cx1, cy1, cx2, cy2 = refine_corners(deltas, proposals, bound)
    pred = tuple(take(c, pos_idx) for c in (cx1, cy1, cx2, cy2))
    gt_arrays = (
        np.full(n_pos, gt.x1),
        np.full(n_pos, gt.y1),
        np.full(n_pos, gt.x2),
        np.full(n_pos, gt.y2),
    )
    reg_sum = iou_loss_sum(pred, gt_arrays)
    return mul(add(cls_sum, mul(reg_sum, lam)), 1.0 / n_pos)
