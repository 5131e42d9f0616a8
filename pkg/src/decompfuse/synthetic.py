"""Procedural scenes for demos, smoke tests and desk-scale experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import save_image


def smooth_scene(h: int, w: int, rng: np.random.Generator, n_shapes: int = 4) -> np.ndarray:
    """A colored gradient background with a few soft-edged ellipses."""
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    c0, c1, c2 = rng.uniform(0.1, 0.9, size=(3, 3))
    img = c0 + 0.5 * (c1 - c0) * yy[..., None] + 0.5 * (c2 - c0) * xx[..., None]
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        inside = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) < 1.0
        soft = ndimage.gaussian_filter(inside.astype(float), sigma=1.0)[..., None]
        img = img * (1 - soft) + rng.uniform(0, 1, 3) * soft
    return np.clip(img, 0.0, 1.0)


def thermal_view(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A single-channel 'infrared' rendering: inverted-ish luminance with a
    couple of hot spots absent from the visible image."""
    h, w = rgb.shape[:2]
    base = 1.0 - (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(2):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        base = base + 0.6 * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.08 * h) ** 2)))
    return np.clip(ndimage.gaussian_filter(base, 1.0), 0.0, 1.0)[..., None]


def exposure_pair(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Under- and over-exposed renderings of ``img``."""
    return np.clip(img**2.2 * 0.6, 0, 1), np.clip(1 - (1 - img) ** 2.2 * 0.6 + 0.15, 0, 1)


def focus_pair(img: np.ndarray, sigma: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Left-sharp/right-blurred and the reverse."""
    blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
    w = img.shape[1]
    left = np.zeros(img.shape[:2], bool)
    left[:, : w // 2] = True
    near = np.where(left[..., None], img, blurred)
    far = np.where(left[..., None], blurred, img)
    return near, far


def make_corpus(root: str | Path, n: int = 8, size: int = 64, seed: int = 0, multi_modal: bool = True) -> Path:
    """Write a toy corpus: ``single/``, ``multi/{vis,ir}/`` and evaluation
    folders ``eval/{mef/{under,over},mff/{near,far,gt},ivf/{vis,ir}}``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(n):
        stem = f"scene{i:03d}"
        img = smooth_scene(size, size, rng)
        save_image(root / "single" / f"{stem}.png", img)
        under, over = exposure_pair(img)
        save_image(root / "eval" / "mef" / "under" / f"{stem}.png", under)
        save_image(root / "eval" / "mef" / "over" / f"{stem}.png", over)
        near, far = focus_pair(img)
        save_image(root / "eval" / "mff" / "near" / f"{stem}.png", near)
        save_image(root / "eval" / "mff" / "far" / f"{stem}.png", far)
        save_image(root / "eval" / "mff" / "gt" / f"{stem}.png", img)
        if multi_modal:
            ir = thermal_view(img, rng)
            save_image(root / "multi" / "vis" / f"{stem}.png", img)
            save_image(root / "multi" / "ir" / f"{stem}.png", ir)
            save_image(root / "eval" / "ivf" / "vis" / f"{stem}.png", img)
            save_image(root / "eval" / "ivf" / "ir" / f"{stem}.png", ir)
    return root
