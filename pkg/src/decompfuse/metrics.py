"""Fusion quality metrics: SSIM, PSNR, CC, NCIE, N^{AB/F} and MEF-SSIM.

Every metric works on BT.601 luminance in [0, 1].  The test suite checks
each one against a slow direct-definition loop.  Windowed statistics use
reflect padding, so maps cover every pixel and the score is the map mean.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, ParameterError
from .imaging import luminance

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
PSNR_CAP = 99.0
NCIE_BINS = 256

# Petrovic edge-preservation constants (Kumar's artifact measure)
NABF_TD = 2.0
NABF_LG = 1.5
NABF_NRG, NABF_KG, NABF_SG = 0.9999, 19.0, 0.5
NABF_NRA, NABF_KA, NABF_SA = 0.9995, 22.0, 0.5
SOBEL_V = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
SOBEL_H = SOBEL_V.T.copy()

MEF_WIN = 11
MEF_P_MAX = 10.0
VAR_EPS = 1e-12

HIGHER_IS_BETTER = {
    "ssim": True,
    "psnr": True,
    "cc": True,
    "ncie": True,
    "nabf": False,
    "mef_ssim": True,
    "psnr_gt": True,
    "ssim_gt": True,
}

TASK_METRICS = {
    "mef": ("ncie", "nabf", "ssim", "cc", "mef_ssim"),
    "mff": ("psnr", "ssim"),
    "ivf": ("nabf", "ssim", "cc"),
}


def _luma(img) -> np.ndarray:
    return luminance(np.asarray(img, dtype=np.float64))


def _same_dims(*imgs: np.ndarray) -> None:
    shapes = {np.shape(i)[:2] for i in imgs}
    if len(shapes) != 1:
        raise ContractError(f"images differ in size: {sorted(shapes)}")


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _gauss(x: np.ndarray) -> np.ndarray:
    # truncate picks radius 5, i.e. the 11 x 11 window
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=(SSIM_WIN // 2) / SSIM_SIGMA, mode="reflect")


def ssim_map(a, b) -> np.ndarray:
    _same_dims(a, b)
    x, y = _luma(a), _luma(b)
    c1, c2 = K1**2, K2**2
    mx, my = _gauss(x), _gauss(y)
    sxx = _gauss(x * x) - mx * mx
    syy = _gauss(y * y) - my * my
    sxy = _gauss(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b) -> float:
    """Windowed SSIM between two images (Gaussian 11x11, sigma 1.5, range 1)."""
    return float(ssim_map(a, b).mean())


def fusion_ssim(fused, src1, src2) -> float:
    """Mean of SSIM(fused, src1) and SSIM(fused, src2)."""
    return 0.5 * (ssim(fused, src1) + ssim(fused, src2))


def psnr(a, b) -> float:
    _same_dims(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def fusion_psnr(fused, src1, src2) -> float:
    return 0.5 * (psnr(fused, src1) + psnr(fused, src2))


def pearson(a, b) -> float:
    x, y = _luma(a).ravel(), _luma(b).ravel()
    # exact test: mean subtraction leaves a roundoff offset on constant images
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        warnings.warn("zero-variance image in correlation; defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    x = x - x.mean()
    y = y - y.mean()
    return float(x @ y) / math.sqrt(float(x @ x) * float(y @ y))


def cc(fused, src1, src2) -> float:
    _same_dims(fused, src1, src2)
    return 0.5 * (pearson(fused, src1) + pearson(fused, src2))


def rank_bins(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-count rank binning; ties are broken by position (stable sort)."""
    x = np.asarray(x).ravel()
    n = x.size
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(x, kind="stable")] = np.arange(n)
    return ranks * bins // n


def _entropy(p: np.ndarray, base: float) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / math.log(base))


def nonlinear_cc(a, b, bins: int = NCIE_BINS) -> float:
    """Nonlinear correlation coefficient H(X) + H(Y) - H(X, Y) on rank grids,
    logs in base ``b = min(bins, N)``.  Identical inputs give 1; a constant
    input carries no information and gives 0."""
    x, y = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    if x.size != y.size:
        raise ContractError("nonlinear_cc inputs differ in size")
    if np.array_equal(x, y):
        return 1.0
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    n = x.size
    b = min(bins, n)
    bx, by = rank_bins(x, b), rank_bins(y, b)
    joint = np.bincount(bx * b + by, minlength=b * b) / n
    hx = _entropy(np.bincount(bx, minlength=b) / n, b)
    hy = _entropy(np.bincount(by, minlength=b) / n, b)
    return hx + hy - _entropy(joint, b)


def ncc_matrix(fused, src1, src2, bins: int = NCIE_BINS) -> np.ndarray:
    imgs = [_luma(src1), _luma(src2), _luma(fused)]
    r = np.eye(3)
    for i in range(3):
        for j in range(i + 1, 3):
            r[i, j] = r[j, i] = nonlinear_cc(imgs[i], imgs[j], bins)
    return r


def ncie(fused, src1, src2, bins: int = NCIE_BINS) -> float:
    """1 + sum (l/3) log_b (l/3) over eigenvalues l of the 3x3 nonlinear
    correlation matrix of (src1, src2, fused)."""
    _same_dims(fused, src1, src2)
    r = ncc_matrix(fused, src1, src2, bins)
    lam = np.clip(np.linalg.eigvalsh(r), 0.0, None)
    b = min(bins, _luma(fused).size)
    q = lam[lam > 0] / 3.0
    return float(1.0 + (q * np.log(q)).sum() / math.log(b))


def sobel(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(vertical-edge, horizontal-edge) responses, reflect-padded."""
    return (
        ndimage.convolve(x, SOBEL_V, mode="reflect"),
        ndimage.convolve(x, SOBEL_H, mode="reflect"),
    )


def _edge_terms(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gv, gh = sobel(x * 255.0)
    g = np.hypot(gv, gh)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where((gv == 0) & (gh == 0), 0.0, np.arctan(gv / gh))
    return g, a


def _preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_src > g_f, g_f / g_src, g_src / g_f)
    ratio = np.where((g_src == 0) | (g_f == 0), 0.0, ratio)
    orient = np.abs(np.abs(a_src - a_f) - np.pi / 2) * 2 / np.pi
    qg = NABF_NRG / (1 + np.exp(-NABF_KG * (ratio - NABF_SG)))
    qa = NABF_NRA / (1 + np.exp(-NABF_KA * (orient - NABF_SA)))
    return np.sqrt(qg * qa)


def nabf(fused, src1, src2) -> float:
    """Fusion-artifact measure: loss of edge preservation at pixels where the
    fused edge is stronger than both sources, weighted by source edge
    strength and normalized by the total weight.  Lower is better."""
    _same_dims(fused, src1, src2)
    ga, aa = _edge_terms(_luma(src1))
    gb, ab = _edge_terms(_luma(src2))
    gf, af = _edge_terms(_luma(fused))
    qa = _preservation(ga, aa, gf, af)
    qb = _preservation(gb, ab, gf, af)
    wa = np.where(ga >= NABF_TD, ga**NABF_LG, 0.0)
    wb = np.where(gb >= NABF_TD, gb**NABF_LG, 0.0)
    total = float((wa + wb).sum())
    if total == 0.0:
        return 0.0
    artifact = (gf > ga) & (gf > gb)
    return float((artifact * ((1 - qa) * wa + (1 - qb) * wb)).sum() / total)


def _box(x: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(x, MEF_WIN, mode="reflect")


def mef_ssim_map(fused, stack) -> np.ndarray:
    """Single-scale MEF-SSIM quality map.

    Per window: each exposure patch is split into mean, contrast c_k (norm
    of the mean-removed patch) and structure.  The desired patch has the
    largest contrast and the structure average weighted by c_k**p, with
    p = tan(pi R / 2) driven by the structural consistency R of the stack.
    It is compared to the fused patch with the SSIM structure/contrast term.
    """
    if len(stack) < 2:
        raise ContractError(f"MEF-SSIM needs at least 2 exposures, got {len(stack)}")
    _same_dims(fused, *stack)
    xs = [_luma(s) for s in stack]
    y = _luma(fused)
    k = len(xs)
    n = MEF_WIN * MEF_WIN
    c2 = K2**2 / 2
    mu = [_box(x) for x in xs]
    mu_y = _box(y)
    cov = np.empty((k, k) + y.shape)
    for i in range(k):
        for j in range(i, k):
            cov[i, j] = cov[j, i] = _box(xs[i] * xs[j]) - mu[i] * mu[j]
    cov_y = np.stack([_box(xs[i] * y) - mu[i] * mu_y for i in range(k)])
    var_y = np.clip(_box(y * y) - mu_y**2, 0.0, None)

    var = np.clip(np.stack([cov[i, i] for i in range(k)]), 0.0, None)
    live = var > VAR_EPS
    c = np.sqrt(n * var) * live
    c_hat = c.max(axis=0)
    norm_sum = np.sqrt(np.clip(n * cov.sum(axis=(0, 1)), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(c.sum(axis=0) > 0, norm_sum / c.sum(axis=0), 0.0)
        p = np.minimum(np.tan(np.pi / 2 * np.clip(r, 0.0, 1.0 - 1e-12)), MEF_P_MAX)
        w = np.where(live, c**p, 0.0)
        a = np.where(live, w / (np.where(live, c, 1.0) * w.sum(axis=0)), 0.0)
    a = np.nan_to_num(a)
    s_norm2 = n * np.einsum("i...,ij...,j...->...", a, cov, a)
    s_norm = np.sqrt(np.clip(s_norm2, 0.0, None))
    has_structure = s_norm > 0
    scale = np.where(has_structure, c_hat / np.where(has_structure, s_norm, 1.0), 0.0)
    var_hat = np.where(has_structure, c_hat**2 / n, 0.0)
    cov_hat = scale * (a * cov_y).sum(axis=0)
    return (2 * cov_hat + c2) / (var_hat + var_y + c2)


def mef_ssim(fused, stack) -> float:
    return float(mef_ssim_map(fused, stack).mean())


def evaluate(task: str, fused, sources: tuple, gt=None) -> dict[str, float]:
    """Metric set for a task; MFF with a ground truth adds psnr_gt/ssim_gt."""
    if task not in TASK_METRICS:
        raise ParameterError(f"unknown task {task!r}; choose from {sorted(TASK_METRICS)}")
    s1, s2 = sources
    fns = {
        "ssim": lambda: fusion_ssim(fused, s1, s2),
        "psnr": lambda: fusion_psnr(fused, s1, s2),
        "cc": lambda: cc(fused, s1, s2),
        "ncie": lambda: ncie(fused, s1, s2),
        "nabf": lambda: nabf(fused, s1, s2),
        "mef_ssim": lambda: mef_ssim(fused, [s1, s2]),
    }
    out = {name: fns[name]() for name in TASK_METRICS[task]}
    if task == "mff" and gt is not None:
        out["psnr_gt"] = psnr(fused, gt)
        out["ssim_gt"] = ssim(fused, gt)
    return out


@dataclass
class MetricReport:
    task: str
    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)

    def add(self, stem: str, values: dict[str, float]) -> None:
        self.rows[stem] = values

    def fail(self, stem: str, reason: str) -> None:
        self.failed[stem] = reason

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for values in self.rows.values():
            cols += [c for c in values if c not in cols]
        return cols

    def aggregate(self) -> dict[str, float]:
        return {c: float(np.mean([r[c] for r in self.rows.values() if c in r])) for c in self.columns}

    def summary(self) -> dict:
        return {
            "task": self.task,
            "count": len(self.rows),
            "failed": sorted(self.failed),
            "mean": self.aggregate(),
            "higher_is_better": {c: HIGHER_IS_BETTER[c] for c in self.columns},
        }

    def write(self, csv_path: str | Path, json_path: str | Path) -> None:
        cols = self.columns
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "status", *cols])
            for stem, values in self.rows.items():
                writer.writerow([stem, "ok", *(repr(values.get(c, float("nan"))) for c in cols)])
            for stem, reason in self.failed.items():
                writer.writerow([stem, f"failed: {reason}", *([""] * len(cols))])
        Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True), encoding="utf-8")
