"""Masked feature modeling: category-balanced token sampling, the encoder
that merges common/unique streams into one fused grid, the interpolation
layer + pixel decoder, and the projector heads (tokens -> pixels, tokens ->
frozen-encoder latent space)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import Block, TokenGrid, init_weights, interpolate_pos
from .decomposition import DecomposedFeatures
from .errors import ConfigurationError, ContractError, ParameterError
from .imaging import GridGeometry

CATEGORIES = ("common", "unique1", "unique2")


@dataclass(frozen=True)
class SamplePlan:
    """Kept token indices per category, each an int array of shape (B, k)."""

    kept: tuple[np.ndarray, np.ndarray, np.ndarray]
    mask_ratio: float
    num_tokens: int
    seed: int

    @property
    def keep_count(self) -> int:
        return self.kept[0].shape[1]

    @property
    def batch(self) -> int:
        return self.kept[0].shape[0]


def keep_count(num_tokens: int, mask_ratio: float) -> int:
    # round first so float error in (1 - rho) * N cannot push ceil up by one
    return math.ceil(round((1.0 - mask_ratio) * num_tokens, 9))


def sample_tokens(feats: DecomposedFeatures | int, mask_ratio: float, seed: int, batch: int | None = None) -> SamplePlan:
    """Draw the same number of kept tokens, uniformly without replacement,
    from each of the three categories (independently per batch element)."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ParameterError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    if isinstance(feats, DecomposedFeatures):
        t = feats.f_u1
        n = t.shape[-2]
        batch = t.shape[0] if t.ndim == 3 else 1
    else:
        n = int(feats)
        batch = batch or 1
    k = keep_count(n, mask_ratio)
    rng = np.random.default_rng(seed)
    kept = []
    for _ in CATEGORIES:
        if k == n:
            idx = np.broadcast_to(np.arange(n), (batch, n)).copy()
        else:
            idx = np.sort(rng.random((batch, n)).argsort(axis=1)[:, :k], axis=1)
        kept.append(idx)
    return SamplePlan(tuple(kept), float(mask_ratio), n, seed)


class MFMEncoder(nn.Module):
    """Encodes the concatenated (kept) category tokens and sums the three
    category streams back onto one token per grid site."""

    def __init__(self, dim: int, depth: int = 2, heads: int = 2, base_grid: int = 8, mlp_ratio: float = 4.0):
        super().__init__()
        self.base_grid = base_grid
        self.category_embed = nn.Parameter(torch.zeros(len(CATEGORIES), dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, base_grid**2, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        nn.init.trunc_normal_(self.category_embed, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(init_weights)

    def forward(
        self, streams: list[torch.Tensor], geom: GridGeometry, plan: SamplePlan | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(fused, present)``: fused (B, N, d) and a (B, N) bool map of
        sites that received at least one kept token."""
        b, n, d = streams[0].shape
        if n != geom.num_tokens:
            raise ContractError(f"{n} tokens do not match grid {geom.grid_h}x{geom.grid_w}")
        pos = interpolate_pos(self.pos_embed, self.base_grid, geom.grid_h, geom.grid_w).expand(b, -1, -1)
        if plan is None:
            index = [torch.arange(n).expand(b, n) for _ in CATEGORIES]
        else:
            if plan.num_tokens != n or plan.batch != b:
                raise ContractError("sample plan does not match the feature batch")
            index = [torch.from_numpy(k).long() for k in plan.kept]

        parts = []
        for c, (stream, idx) in enumerate(zip(streams, index)):
            gidx = idx[..., None].expand(-1, -1, d)
            parts.append(torch.gather(stream + pos, 1, gidx) + self.category_embed[c])
        x = torch.cat(parts, dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)

        fused = x.new_zeros(b, n, d)
        present = torch.zeros(b, n, dtype=torch.bool)
        offset = 0
        for idx in index:
            k = idx.shape[1]
            fused = fused.scatter_add(1, idx[..., None].expand(-1, -1, d), x[:, offset : offset + k])
            present[torch.arange(b)[:, None], idx] = True
            offset += k
        return fused, present


def unpatchify(patches: torch.Tensor, geom: GridGeometry, channels: int = 3) -> torch.Tensor:
    """(B, N, p*p*C) -> (B, C, grid_h*p, grid_w*p)."""
    b = patches.shape[0]
    p = geom.patch_size
    x = patches.reshape(b, geom.grid_h, geom.grid_w, p, p, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, channels, geom.grid_h * p, geom.grid_w * p)


class PixelDecoder(nn.Module):
    """Interpolation layer (learned mask token at empty sites + positions)
    followed by transformer blocks and a linear pixel head."""

    def __init__(self, dim: int, patch_size: int, depth: int = 2, heads: int = 2, base_grid: int = 8):
        super().__init__()
        self.base_grid = base_grid
        self.patch_size = patch_size
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, base_grid**2, dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.pred = nn.Linear(dim, patch_size**2 * 3)
        nn.init.normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(init_weights)

    def interpolate(self, fused: torch.Tensor, present: torch.Tensor, geom: GridGeometry) -> torch.Tensor:
        x = torch.where(present[..., None], fused, self.mask_token.to(fused.dtype).expand_as(fused))
        return x + interpolate_pos(self.pos_embed, self.base_grid, geom.grid_h, geom.grid_w)

    def forward(self, fused: torch.Tensor, present: torch.Tensor, geom: GridGeometry) -> torch.Tensor:
        x = self.interpolate(fused, present, geom)
        for blk in self.blocks:
            x = blk(x)
        return unpatchify(self.pred(self.norm(x)), geom)


class PixelProjector(nn.Module):
    """Shallow tokens -> image head: ``depth`` transformer blocks then a
    linear map to each token's patch of pixels.  ``depth=0`` is a plain
    affine probe."""

    def __init__(self, dim: int, patch_size: int, depth: int = 2, heads: int = 2):
        super().__init__()
        self.patch_size = patch_size
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim) if depth else nn.Identity()
        self.pred = nn.Linear(dim, patch_size**2 * 3)
        self.apply(init_weights)

    def forward(self, tokens: torch.Tensor, geom: GridGeometry) -> torch.Tensor:
        x = tokens
        for blk in self.blocks:
            x = blk(x)
        return unpatchify(self.pred(self.norm(x)), geom)


class LatentProjector(nn.Module):
    """Linear head from concat(unique, common) to the frozen encoder's width."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.in_dim = dim
        self.out_dim = out_dim
        self.linear = nn.Linear(2 * dim, out_dim)
        self.apply(init_weights)

    def forward(self, f_u: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        return self.linear(torch.cat([f_u, f_c], dim=-1))


def _unwrap(t):
    return t.tokens if isinstance(t, TokenGrid) else t


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.ndim == 2 else t


def mfm_encode(
    feats: DecomposedFeatures, encoder: MFMEncoder, geom: GridGeometry, plan: SamplePlan | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fuse (f_c, f_u1, f_u2) into one (B, N, d) grid.  ``plan=None`` keeps
    every token (the fusion path)."""
    streams = [_batched(feats.common), _batched(feats.f_u1), _batched(feats.f_u2)]
    return encoder(streams, geom, plan)


def interpolate_and_decode(
    fused: torch.Tensor, present: torch.Tensor, decoder: PixelDecoder, geom: GridGeometry
) -> torch.Tensor:
    if fused.shape[1] != geom.num_tokens or present.shape != fused.shape[:2]:
        raise ContractError("fused features, presence map and grid geometry disagree")
    return decoder(fused, present, geom)


def project_to_image(tokens, head: PixelProjector, geom: GridGeometry, clamp: bool = False) -> torch.Tensor:
    """Token grid -> (B, 3, H_pad, W_pad) image.  Clamp only at inference."""
    out = head(_batched(_unwrap(tokens)), geom)
    return out.clamp(0.0, 1.0) if clamp else out


def project_to_latent(f_u, f_c, head: LatentProjector, d_fix: int | None = None) -> torch.Tensor:
    if d_fix is not None and head.out_dim != d_fix:
        raise ConfigurationError(f"latent head emits {head.out_dim} dims but the frozen encoder has {d_fix}")
    return head(_unwrap(f_u), _unwrap(f_c))
