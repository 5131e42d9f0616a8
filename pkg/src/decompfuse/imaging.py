"""Image arrays, disk IO and patch-grid geometry.

Images are plain ``numpy`` arrays laid out H x W x C (channel-last), float,
with values in [0, 1].  C is 1 for gray and 3 for RGB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DecodeError, FormatError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

_EIGHT_BIT_MODES = {"1", "L", "LA", "P", "RGB", "RGBA", "CMYK", "YCbCr"}
_SIXTEEN_BIT_MODES = {"I;16", "I;16B", "I;16L", "I;16N", "I"}


@dataclass(frozen=True)
class GridGeometry:
    """Token <-> pixel bookkeeping for a padded image."""

    patch_size: int
    grid_h: int
    grid_w: int
    image_h: int
    image_w: int

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def padded_h(self) -> int:
        return self.grid_h * self.patch_size

    @property
    def padded_w(self) -> int:
        return self.grid_w * self.patch_size

    @classmethod
    def for_image(cls, h: int, w: int, patch_size: int) -> "GridGeometry":
        if patch_size < 1:
            raise ContractError(f"patch_size must be >= 1, got {patch_size}")
        return cls(patch_size, math.ceil(h / patch_size), math.ceil(w / patch_size), h, w)

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "image_h": self.image_h,
            "image_w": self.image_w,
        }


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the H x W x C float-in-[0,1] contract and return ``img``."""
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ContractError(f"{name} must be H x W x C with C in (1, 3), got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ContractError(f"{name} contains non-finite values")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ContractError(f"{name} values must lie in [0, 1]")
    return img


def load_image(path: str | Path, mode: str = "rgb") -> np.ndarray:
    """Read an 8- or 16-bit raster and scale it to [0, 1].

    ``mode`` is ``"rgb"`` (3 channels) or ``"gray"`` (1 channel).
    """
    if mode not in ("rgb", "gray"):
        raise ContractError(f"mode must be 'rgb' or 'gray', got {mode!r}")
    path = Path(path)
    try:
        pil = Image.open(path)
        pil.load()
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc

    if pil.mode in _SIXTEEN_BIT_MODES:
        raw = np.asarray(pil).astype(np.float64)
        if raw.min() < 0 or raw.max() > 65535:
            raise FormatError(f"{path}: integer image outside 16-bit range")
        gray = raw / 65535.0
        arr = gray[..., None] if mode == "gray" else np.repeat(gray[..., None], 3, axis=2)
    elif pil.mode in _EIGHT_BIT_MODES:
        target = "L" if mode == "gray" else "RGB"
        raw = np.asarray(pil.convert(target)).astype(np.float64) / 255.0
        arr = raw[..., None] if raw.ndim == 2 else raw
    else:
        raise FormatError(f"{path}: unsupported pixel format {pil.mode!r}")
    return arr


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write ``img`` as an 8-bit raster (format from the suffix)."""
    check_image(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        data = data[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def gray_to_3ch(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 1:
        raise ContractError(f"gray_to_3ch expects a single-channel image, got shape {img.shape}")
    return np.repeat(img, 3, axis=2)


def ensure_3ch(img: np.ndarray) -> np.ndarray:
    return gray_to_3ch(img) if img.shape[2] == 1 else img


def pad_to_patch(img: np.ndarray, patch_size: int) -> tuple[np.ndarray, GridGeometry]:
    """Edge-replicate ``img`` up to the next multiple of ``patch_size``."""
    h, w = img.shape[:2]
    geom = GridGeometry.for_image(h, w, patch_size)
    pad_h, pad_w = geom.padded_h - h, geom.padded_w - w
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return img, geom


def crop_back(img, geom: GridGeometry):
    """Undo :func:`pad_to_patch`.  Works on H x W x C arrays and on tensors
    whose last two axes are spatial when ``img.ndim == 4``."""
    if img.ndim == 4:
        return img[..., : geom.image_h, : geom.image_w]
    return img[: geom.image_h, : geom.image_w]


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an H x W x C image as an H x W float64 array."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def list_images(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
