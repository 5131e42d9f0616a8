"""Vision-transformer encoder shared by both views, and the larger frozen
encoder used as a feature-reconstruction target for multi-modal training."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_container, write_container
from .errors import CheckpointError, ConfigurationError, ContractError, DataError
from .imaging import GridGeometry, ensure_3ch, pad_to_patch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    in_chans: int = 3
    base_grid: int = 8  # positional table side; other grids are interpolated

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} is not divisible by heads {self.heads}")


PRESETS = {
    "tiny": BackboneConfig(patch_size=16, dim=192, depth=4, heads=3, base_grid=14),
    "micro": BackboneConfig(patch_size=8, dim=64, depth=2, heads=2, base_grid=8),
}


def frozen_config(cfg: BackboneConfig) -> BackboneConfig:
    """Config for the frozen target encoder: twice the width, two more blocks."""
    return replace(cfg, dim=2 * cfg.dim, depth=cfg.depth + 2, heads=2 * cfg.heads)


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (N, d) or (B, N, d)
    geometry: GridGeometry

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def interpolate_pos(table: torch.Tensor, base_grid: int, grid_h: int, grid_w: int) -> torch.Tensor:
    """Resize a (1, base_grid**2, d) positional table to (1, grid_h*grid_w, d)."""
    if (grid_h, grid_w) == (base_grid, base_grid):
        return table
    d = table.shape[-1]
    grid = table.reshape(1, base_grid, base_grid, d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(grid_h, grid_w), mode="bilinear", align_corners=False)
    return grid.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, d)


class ViTEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(cfg.in_chans, cfg.dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.base_grid**2, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(init_weights)

    def embed(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        p = self.cfg.patch_size
        if x.shape[-2] % p or x.shape[-1] % p:
            raise ContractError(f"input {tuple(x.shape[-2:])} is not a multiple of patch {p}; pad first")
        tokens = self.patch_embed(x)
        gh, gw = tokens.shape[-2:]
        tokens = tokens.flatten(2).transpose(1, 2)
        return tokens + interpolate_pos(self.pos_embed, self.cfg.base_grid, gh, gw), gh, gw

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) with H, W multiples of the patch -> (B, N, d)."""
        tokens, _, _ = self.embed(x)
        return self.forward_tokens(tokens)


def image_to_tensor(img: np.ndarray | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """H x W x C array -> (1, C, H, W) tensor; tensors pass through."""
    if isinstance(img, torch.Tensor):
        return img if img.ndim == 4 else img.unsqueeze(0)
    return torch.from_numpy(np.ascontiguousarray(ensure_3ch(img).transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def encode(img: np.ndarray | torch.Tensor, model: ViTEncoder) -> TokenGrid:
    """Encode one image into a token grid.

    Arrays are edge-padded to the patch multiple first; tensors (1, C, H, W)
    must already be padded and keep their autograd graph.
    """
    p = model.cfg.patch_size
    if isinstance(img, np.ndarray):
        padded, geom = pad_to_patch(ensure_3ch(img), p)
        x = image_to_tensor(padded, dtype=next(model.parameters()).dtype)
    else:
        x = image_to_tensor(img)
        geom = GridGeometry.for_image(x.shape[-2], x.shape[-1], p)
    tokens = model(x)[0]
    return TokenGrid(tokens, geom)


def output_shape(h: int, w: int, patch_size: int, dim: int) -> tuple[int, int]:
    geom = GridGeometry.for_image(h, w, patch_size)
    return geom.num_tokens, dim


def weights_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Frozen target encoder


class MaskedAutoencoder(nn.Module):
    """Encoder + light decoder trained by masked-patch pixel reconstruction."""

    def __init__(self, cfg: BackboneConfig, decoder_dim: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg)
        dd = decoder_dim or max(cfg.dim // 2, 16)
        self.decoder_embed = nn.Linear(cfg.dim, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.decoder_pos = nn.Parameter(torch.zeros(1, cfg.base_grid**2, dd))
        self.decoder_block = Block(dd, 1)
        self.decoder_norm = nn.LayerNorm(dd)
        self.decoder_pred = nn.Linear(dd, cfg.patch_size**2 * cfg.in_chans)
        nn.init.trunc_normal_(self.decoder_pos, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)
        self.decoder_embed.apply(init_weights)
        self.decoder_block.apply(init_weights)
        self.decoder_pred.apply(init_weights)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_size
        b, c, h, w = x.shape
        x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def forward_loss(self, x: torch.Tensor, mask_ratio: float, generator: torch.Generator) -> torch.Tensor:
        tokens, gh, gw = self.encoder.embed(x)
        b, n, d = tokens.shape
        keep = max(1, int(round(n * (1 - mask_ratio))))
        noise = torch.rand(b, n, generator=generator)
        shuffle = noise.argsort(dim=1)
        restore = shuffle.argsort(dim=1)
        kept_idx = shuffle[:, :keep]
        visible = torch.gather(tokens, 1, kept_idx[..., None].expand(-1, -1, d))
        latent = self.encoder.forward_tokens(visible)

        dec = self.decoder_embed(latent)
        dd = dec.shape[-1]
        full = torch.cat([dec, self.mask_token.expand(b, n - keep, dd)], dim=1)
        full = torch.gather(full, 1, restore[..., None].expand(-1, -1, dd))
        full = full + interpolate_pos(self.decoder_pos, self.cfg.base_grid, gh, gw)
        pred = self.decoder_pred(self.decoder_norm(self.decoder_block(full)))

        mask = torch.ones(b, n)
        mask[:, :keep] = 0
        mask = torch.gather(mask, 1, restore)
        per_patch = ((pred - self.patchify(x)) ** 2).mean(dim=-1)
        return (per_patch * mask).sum() / mask.sum()


class FrozenEncoder(nn.Module):
    """An encoder whose weights never change after construction or load."""

    def __init__(self, cfg: BackboneConfig, modality: str = "rgb"):
        super().__init__()
        self.cfg = cfg
        self.modality = modality
        self.encoder = ViTEncoder(cfg)
        self.history: list[float] = []
        self.freeze()

    def freeze(self) -> "FrozenEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True) -> "FrozenEncoder":
        # always eval: there is no dropout or batch statistics to update
        return super().train(False)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def checksum(self) -> str:
        return weights_checksum(self)

    def save(self, path: str | Path) -> str:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"config": asdict(self.cfg), "modality": self.modality, "history": self.history}
        return write_container(path, "frozen_encoder", meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "FrozenEncoder":
        if not Path(path).exists():
            raise ConfigurationError(f"frozen encoder checkpoint {path} does not exist")
        header, arrays = read_container(path, expect_kind="frozen_encoder")
        meta = header["meta"]
        enc = cls(BackboneConfig(**meta["config"]), meta.get("modality", "rgb"))
        load_arrays(enc, arrays)
        enc.history = list(meta.get("history", []))
        return enc.freeze()


def load_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks weights: {sorted(missing)[:5]}")
    for name, tensor in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(f"weight {name}: checkpoint shape {arr.shape} != model shape {tuple(tensor.shape)}")
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(arr))


def encode_frozen(img: np.ndarray | torch.Tensor, enc: FrozenEncoder) -> TokenGrid:
    with torch.no_grad():
        return encode(img, enc.encoder)


def random_crops(
    images: Sequence[np.ndarray], size: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """``count`` random ``size`` x ``size`` crops (with flips), as (count, 3, s, s)."""
    out = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        img = ensure_3ch(images[rng.integers(len(images))])
        if img.shape[0] < size or img.shape[1] < size:
            img, _ = pad_to_patch(img, size)
        y = rng.integers(img.shape[0] - size + 1)
        x = rng.integers(img.shape[1] - size + 1)
        crop = img[y : y + size, x : x + size]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = crop.transpose(2, 0, 1)
    return out


def pretrain_frozen(
    corpus: Sequence[np.ndarray],
    steps: int,
    cfg: BackboneConfig,
    *,
    modality: str = "rgb",
    mask_ratio: float = 0.75,
    batch_size: int = 4,
    crop: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> FrozenEncoder:
    """Masked-autoencoder pretraining on one modality, then freeze.

    ``steps == 0`` returns the randomly initialised encoder (ablation mode).
    The per-step masked-pixel loss is kept in ``.history``.
    """
    if len(corpus) == 0:
        raise DataError("pretraining corpus is empty")
    torch.manual_seed(seed)
    mae = MaskedAutoencoder(cfg)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    history: list[float] = []
    if steps > 0:
        opt = torch.optim.AdamW(mae.parameters(), lr=lr, weight_decay=0.05)
        mae.train()
        for step in range(steps):
            batch = torch.from_numpy(random_crops(corpus, crop, batch_size, rng))
            loss = mae.forward_loss(batch, mask_ratio, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
            if step % 100 == 0:
                log.info("pretrain-frozen %s step %d loss %.5f", modality, step, history[-1])
    frozen = FrozenEncoder(cfg, modality)
    frozen.encoder.load_state_dict(mae.encoder.state_dict())
    frozen.history = history
    return frozen.freeze()
