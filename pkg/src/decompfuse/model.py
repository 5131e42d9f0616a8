"""The full trainable network: shared backbone, task-indicated cross
attention, MFM encoder/decoder and projector heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .backbone import PRESETS, BackboneConfig, FrozenEncoder, ViTEncoder, frozen_config
from .decomposition import CrossAttention, DecomposedFeatures, DecompMode, decompose
from .errors import ConfigurationError
from .imaging import GridGeometry
from .mfm import (
    LatentProjector,
    MFMEncoder,
    PixelDecoder,
    PixelProjector,
    SamplePlan,
    interpolate_and_decode,
    mfm_encode,
    project_to_image,
    project_to_latent,
)
from .objectives import LossReport, Regime, loss_m_com, loss_m_uni, loss_mfm, loss_s_cud, loss_total


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=lambda: PRESETS["micro"])
    ca_heads: int = 4
    ca_shared: bool = True
    ca_depth: int = 1
    ca_tie_tasks: bool = False
    mfm_depth: int = 2
    decoder_depth: int = 2
    projector_depth: int = 2
    latent_dim: int | None = None  # width of the frozen encoder; default 2 * dim

    @property
    def d_fix(self) -> int:
        return self.latent_dim or frozen_config(self.backbone).dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        bb = data.pop("backbone", None)
        if isinstance(bb, str):
            if bb not in PRESETS:
                raise ConfigurationError(f"unknown backbone preset {bb!r}; choose from {sorted(PRESETS)}")
            bb = PRESETS[bb]
        elif isinstance(bb, dict):
            bb = BackboneConfig(**bb)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(backbone=bb or PRESETS["micro"], **data)


class FusionNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        d, p = bb.dim, bb.patch_size
        self.backbone = ViTEncoder(bb)
        self.ca = CrossAttention(d, cfg.ca_heads, cfg.ca_shared, cfg.ca_depth, bb.mlp_ratio, cfg.ca_tie_tasks)
        self.mfm_encoder = MFMEncoder(d, cfg.mfm_depth, bb.heads, bb.base_grid, bb.mlp_ratio)
        self.decoder = PixelDecoder(d, p, cfg.decoder_depth, bb.heads, bb.base_grid)
        self.ph_common = PixelProjector(d, p, cfg.projector_depth, bb.heads)
        self.ph_unique = PixelProjector(d, p, cfg.projector_depth, bb.heads)
        self.ph_fused = PixelProjector(d, p, cfg.projector_depth, bb.heads)
        self.latent_heads = nn.ModuleList(LatentProjector(d, cfg.d_fix) for _ in range(2))

    def geometry(self, x: torch.Tensor) -> GridGeometry:
        return GridGeometry.for_image(x.shape[-2], x.shape[-1], self.cfg.backbone.patch_size)

    def decompose(self, x1: torch.Tensor, x2: torch.Tensor, mode: DecompMode | str) -> DecomposedFeatures:
        geom = self.geometry(x1)
        return decompose(self.backbone(x1), self.backbone(x2), self.ca, mode, (geom.grid_h, geom.grid_w))

    def fused_features(self, x1: torch.Tensor, x2: torch.Tensor, mode: DecompMode | str = DecompMode.CUD):
        feats = self.decompose(x1, x2, mode)
        fused, _ = mfm_encode(feats, self.mfm_encoder, self.geometry(x1))
        return feats, fused

    def fuse(self, x1: torch.Tensor, x2: torch.Tensor, mode: DecompMode | str = DecompMode.CUD) -> torch.Tensor:
        _, fused = self.fused_features(x1, x2, mode)
        return project_to_image(fused, self.ph_fused, self.geometry(x1), clamp=not self.training)

    def single_modal_loss(
        self,
        x: torch.Tensor,
        x1: torch.Tensor,
        x2: torch.Tensor,
        targets: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        alpha: float,
        plan: SamplePlan | None,
    ) -> LossReport:
        """Decomposition + reconstruction losses; the MFM term is computed
        only when ``alpha > 0`` and a sample plan is given."""
        geom = self.geometry(x)
        feats = self.decompose(x1, x2, DecompMode.CUD)
        fused, _ = mfm_encode(feats, self.mfm_encoder, geom)
        components = loss_s_cud(
            project_to_image(feats.f_c, self.ph_common, geom),
            project_to_image(feats.f_u1, self.ph_unique, geom),
            project_to_image(feats.f_u2, self.ph_unique, geom),
            project_to_image(fused, self.ph_fused, geom),
            *targets,
            x,
        )
        if alpha > 0 and plan is not None:
            subset, present = mfm_encode(feats, self.mfm_encoder, geom, plan)
            components["mfm"] = loss_mfm(interpolate_and_decode(subset, present, self.decoder, geom), x)
        return loss_total(Regime.SINGLE_MODAL, components, alpha)

    def multi_modal_loss(
        self, x1: torch.Tensor, x2: torch.Tensor, frozen: tuple[FrozenEncoder, FrozenEncoder], norm: str = "l2"
    ) -> LossReport:
        feats = self.decompose(x1, x2, DecompMode.MCUD)
        f_c = feats.common
        lat1 = project_to_latent(feats.f_u1, f_c, self.latent_heads[0], frozen[0].dim)
        lat2 = project_to_latent(feats.f_u2, f_c, self.latent_heads[1], frozen[1].dim)
        ref1, ref2 = frozen[0](x1), frozen[1](x2)
        components = {
            "m_com": loss_m_com(feats.c12, feats.c21, norm),
            "m_uni": loss_m_uni(lat1, lat2, ref1, ref2, norm),
        }
        return loss_total(Regime.MULTI_MODAL, components)
