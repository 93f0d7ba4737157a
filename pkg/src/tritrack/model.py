"""The assembled two-stage network and its configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, CANVAS_H, CANVAS_W, TOTAL_STRIDE
from .context_head import ContextEmbed, MatchHead, context_pool, pool_candidates
from .geometry import Box
from .ndops import Tensor
from .nn import Module
from .trident_rpn import Proposal, RpnOutput, TridentRpn, propose
from .weights import load_weights, save_weights


@dataclass
class ModelConfig:
    channels: int = 64
    scales: tuple[int, ...] = (3, 5, 9)
    stage_widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    head_width: int = 32
    head_depth: int = 2
    attn_reduction: int = 8
    spatial_kernel: int = 7
    nonlocal_inter: int = 16
    embed_variant: str = "film"
    candidate_size: int = 5
    match_hidden: tuple[int, ...] = (256,)
    nms_iou_threshold: float = 0.9
    proposal_count: int = 64
    refine_bound: float = 0.5
    presence_threshold: float = 0.95
    freeze_backbone_except_last: bool = True
    init_seed: int = 7

    @property
    def stride(self) -> int:
        return TOTAL_STRIDE

    @property
    def canvas(self) -> tuple[float, float]:
        return (float(CANVAS_W), float(CANVAS_H))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["stage_widths"] = list(self.stage_widths)
        d["match_hidden"] = list(self.match_hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        kwargs = dict(d)
        for key in ("scales", "stage_widths", "match_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return ModelConfig(**kwargs)


class TrackerNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.backbone = Backbone(
            BackboneConfig(
                out_channels=cfg.channels,
                stage_widths=cfg.stage_widths,
                freeze_except_last=cfg.freeze_backbone_except_last,
            ),
            rng,
        )
        self.rpn = TridentRpn(
            cfg.channels,
            cfg.scales,
            rng,
            head_width=cfg.head_width,
            head_depth=cfg.head_depth,
            attn_reduction=cfg.attn_reduction,
            spatial_kernel=cfg.spatial_kernel,
            nonlocal_inter=cfg.nonlocal_inter,
        )
        self.embed = ContextEmbed(cfg.embed_variant, cfg.channels, rng)
        self.match = MatchHead(
            cfg.channels, rng, pooled_size=cfg.candidate_size, hidden=cfg.match_hidden
        )

    # -- forward pieces -----------------------------------------------------

    def features(self, canvas_image: np.ndarray) -> Tensor:
        return self.backbone.extract(canvas_image)

    def build_pyramid(self, z: Tensor, box: Box) -> list[Tensor]:
        return self.rpn.build_pyramid(z, box, self.cfg.stride)

    def rpn_forward(self, pyramid: list[Tensor], x: Tensor) -> RpnOutput:
        return self.rpn.forward(pyramid, x)

    def propose_from(self, out: RpnOutput) -> list[Proposal]:
        return propose(
            out.cls.data,
            out.reg.data,
            self.cfg.stride,
            iou_threshold=self.cfg.nms_iou_threshold,
            top_n=self.cfg.proposal_count,
            canvas=self.cfg.canvas,
        )

    def pool(self, x: Tensor, proposals: list[Proposal]) -> list[Tensor]:
        return pool_candidates(x, proposals, self.cfg.stride, self.cfg.candidate_size)

    def pool_box(self, x: Tensor, box: Box) -> Tensor:
        from .trident_rpn import roi_align

        s = self.cfg.stride
        fb = (box.x1 / s, box.y1 / s, box.x2 / s, box.y2 / s)
        return roi_align(x, fb, self.cfg.candidate_size)

    def embed_all(
        self, candidates: list[Tensor], use_context: bool
    ) -> tuple[list[Tensor], Tensor | None]:
        """Embed every candidate with the frame context; with use_context
        off this is the identity pass-through used before the context
        module is enabled (and by the no-context ablation)."""
        if not use_context:
            return candidates, None
        x_cxt = context_pool(candidates)
        return [self.embed.forward(x_cxt, c) for c in candidates], x_cxt

    def match_candidates(
        self, embedded: list[Tensor], z_tilde: Tensor
    ) -> tuple[Tensor, Tensor]:
        return self.match.forward(embedded, z_tilde)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        save_weights(path, dict(self.named_parameters_data()))

    def named_parameters_data(self):
        for name, p in self.named_parameters():
            yield name, p.data

    def load(self, path: str | Path) -> None:
        self.load_state(load_weights(path))


def build_model(cfg: ModelConfig | None = None) -> TrackerNet:
    return TrackerNet(cfg or ModelConfig())
