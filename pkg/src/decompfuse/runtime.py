"""Inference from a trained bundle: fused images, decomposition visuals and
fused-feature export.

Only the backbone, cross attention, MFM encoder and projector heads run
here; the interpolation layer, pixel decoder, latent heads and frozen
encoders are training-time parts and stay idle (see :func:`audit_calls`).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_container, write_container
from .decomposition import DecompMode
from .errors import CheckpointError, ContractError, ExportError, ParameterError
from .imaging import GridGeometry, crop_back, ensure_3ch, pad_to_patch, save_image
from .mfm import mfm_encode, project_to_image
from .trainer import CheckpointBundle

FEATURE_KIND = "fused_feature"
MODES = {"single_modal": DecompMode.CUD, "multi_modal": DecompMode.MCUD}
HEAT_ALPHA = 0.5


@dataclass
class FusionRequest:
    img1: np.ndarray
    img2: np.ndarray
    mode: str = "single_modal"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.img1.shape[:2] != self.img2.shape[:2]:
            raise ContractError(f"source images differ in size: {self.img1.shape[:2]} vs {self.img2.shape[:2]}")


@dataclass
class DecompositionVisual:
    heatmaps: dict[str, np.ndarray]  # normalized H x W maps in [0, 1]
    overlays: dict[str, np.ndarray]  # heatmaps blended onto the sources
    projections: dict[str, np.ndarray]  # PH images of each component

    def files(self, stem: str) -> dict[str, np.ndarray]:
        out = {f"{stem}_{k}_heat.png": v for k, v in self.overlays.items()}
        out.update({f"{stem}_{k}.png": v for k, v in self.projections.items()})
        return out

    def save(self, out_dir: str | Path, stem: str) -> list[Path]:
        paths = []
        for name, img in self.files(stem).items():
            path = Path(out_dir) / name
            save_image(path, img)
            paths.append(path)
        return paths


def _to_image(t: torch.Tensor, geom: GridGeometry) -> np.ndarray:
    return crop_back(t, geom)[0].permute(1, 2, 0).detach().numpy().astype(np.float64)


def token_norm_map(tokens: torch.Tensor, geom: GridGeometry) -> np.ndarray:
    """Per-token L2 norm, bilinearly upsampled to pixels, cropped and
    min-max normalized to [0, 1] (all zeros for a constant map)."""
    norms = tokens.reshape(-1, geom.num_tokens, tokens.shape[-1])[0].norm(dim=-1)
    if norms.max() == norms.min():
        # decided on tokens: interpolation roundoff would otherwise be stretched to [0, 1]
        return np.zeros((geom.image_h, geom.image_w))
    grid = norms.reshape(1, 1, geom.grid_h, geom.grid_w)
    up = F.interpolate(grid, size=(geom.padded_h, geom.padded_w), mode="bilinear", align_corners=False)
    m = up[0, 0, : geom.image_h, : geom.image_w].detach().double().numpy()
    span = m.max() - m.min()
    return (m - m.min()) / span if span > 0 else np.zeros_like(m)


def colorize(heat: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp."""
    return np.clip(np.stack([3 * heat, 3 * heat - 1, 3 * heat - 2], axis=-1), 0.0, 1.0)


def overlay(heat: np.ndarray, source: np.ndarray, alpha: float = HEAT_ALPHA) -> np.ndarray:
    return (1 - alpha) * ensure_3ch(source) + alpha * colorize(heat)


class FusionRuntime:
    def __init__(self, bundle: CheckpointBundle):
        self.bundle = bundle
        self.model = bundle.model.eval()
        self.checkpoint_hash = bundle.sha256 or ""

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "FusionRuntime":
        return cls(CheckpointBundle.load(path))

    @property
    def patch_size(self) -> int:
        return self.model.cfg.backbone.patch_size

    def _inputs(self, req: FusionRequest) -> tuple[torch.Tensor, torch.Tensor, GridGeometry]:
        tensors = []
        for img in (req.img1, req.img2):
            padded, geom = pad_to_patch(ensure_3ch(np.asarray(img, dtype=np.float64)), self.patch_size)
            tensors.append(torch.from_numpy(padded.transpose(2, 0, 1).copy()).float()[None])
        return tensors[0], tensors[1], geom

    @torch.no_grad()
    def features(self, req: FusionRequest):
        x1, x2, geom = self._inputs(req)
        feats = self.model.decompose(x1, x2, MODES[req.mode])
        fused, _ = mfm_encode(feats, self.model.mfm_encoder, self.model.geometry(x1))
        return feats, fused, geom

    @torch.no_grad()
    def fuse(self, req: FusionRequest) -> np.ndarray:
        _, fused, geom = self.features(req)
        out = _to_image(project_to_image(fused, self.model.ph_fused, geom, clamp=True), geom)
        if req.img1.shape[2] == 1 and req.img2.shape[2] == 1:
            out = out.mean(axis=2, keepdims=True)
        return out

    @torch.no_grad()
    def decompose_visualize(self, req: FusionRequest) -> DecompositionVisual:
        feats, _, geom = self.features(req)
        comps = {"fu1": feats.f_u1, "fu2": feats.f_u2, "fc": feats.common}
        heads = {"fu1": self.model.ph_unique, "fu2": self.model.ph_unique, "fc": self.model.ph_common}
        backdrop = {
            "fu1": ensure_3ch(req.img1),
            "fu2": ensure_3ch(req.img2),
            "fc": 0.5 * (ensure_3ch(req.img1) + ensure_3ch(req.img2)),
        }
        heat = {k: token_norm_map(t, geom) for k, t in comps.items()}
        return DecompositionVisual(
            heatmaps=heat,
            overlays={k: overlay(heat[k], backdrop[k]) for k in comps},
            projections={k: _to_image(project_to_image(t, heads[k], geom, clamp=True), geom) for k, t in comps.items()},
        )

    @torch.no_grad()
    def export_features(self, req: FusionRequest, path: str | Path) -> str:
        """Write the fused tokens (N x d float32) with geometry and the
        producing checkpoint's hash; returns the file's sha256."""
        _, fused, geom = self.features(req)
        tokens = fused[0].numpy().astype(np.float32)
        meta = {
            "geometry": geom.to_dict(),
            "checkpoint_sha256": self.checkpoint_hash,
            "num_tokens": int(tokens.shape[0]),
            "dim": int(tokens.shape[1]),
            "mode": req.mode,
        }
        try:
            return write_container(path, FEATURE_KIND, meta, {"tokens": tokens})
        except CheckpointError as exc:
            raise ExportError(str(exc)) from exc


def load_features(path: str | Path) -> tuple[np.ndarray, GridGeometry, dict]:
    header, arrays = read_container(path, expect_kind=FEATURE_KIND)
    meta = header["meta"]
    return arrays["tokens"], GridGeometry(**meta["geometry"]), meta


@dataclass
class CallLog:
    calls: list[str] = field(default_factory=list)

    def touched(self, name: str) -> bool:
        return name in self.calls


@contextlib.contextmanager
def audit_calls(modules: dict[str, nn.Module]):
    """Record every forward call into the named modules (and, for a pixel
    decoder, its interpolation layer) while the context is open."""
    log = CallLog()
    handles = []
    patched = []
    for name, module in modules.items():
        handles.append(module.register_forward_pre_hook(lambda _m, _a, name=name: log.calls.append(name)))
        if hasattr(module, "interpolate"):
            original = module.interpolate

            def wrapped(*args, _orig=original, _name=name, **kwargs):
                log.calls.append(f"{_name}.interpolate")
                return _orig(*args, **kwargs)

            module.interpolate = wrapped
            patched.append(module)
    try:
        yield log
    finally:
        for h in handles:
            h.remove()
        for module in patched:
            del module.interpolate
