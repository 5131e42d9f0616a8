"""Training losses and the regime-switched total.

Single-modal batches:  L = (common + unique1 + unique2 + recon L1 terms) + alpha * L_mfm
Multi-modal batches:   L = L_m-com + L_m-uni

All reductions are means.  The two multi-modal terms default to mean
squared error; ``norm="l1"`` switches them to mean absolute error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import torch

from .errors import ConfigurationError, ContractError, NumericError

ALPHA = 0.1

S_CUD_KEYS = ("s_cud_common", "s_cud_unique1", "s_cud_unique2", "s_cud_recon")
MCUD_KEYS = ("m_com", "m_uni")


class Regime(str, Enum):
    SINGLE_MODAL = "single_modal"
    MULTI_MODAL = "multi_modal"


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, torch.Tensor]
    regime: Regime
    extra: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.components.items()}

    def to_record(self, **context) -> dict:
        return {**context, "regime": self.regime.value, "total": float(self.total), "components": self.as_floats()}

    def to_json(self, **context) -> str:
        return json.dumps(self.to_record(**context), sort_keys=True)


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def _dist(a: torch.Tensor, b: torch.Tensor, norm: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if norm == "l2":
        return ((a - b) ** 2).mean()
    if norm == "l1":
        return (a - b).abs().mean()
    raise ConfigurationError(f"unknown norm {norm!r}")


def loss_s_cud(
    pred_common: torch.Tensor,
    pred_unique1: torch.Tensor,
    pred_unique2: torch.Tensor,
    pred_recon: torch.Tensor,
    common_gt: torch.Tensor,
    unique1_gt: torch.Tensor,
    unique2_gt: torch.Tensor,
    x: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Four mean-L1 terms: each decomposition head against its pixel
    intersection target, and the full reconstruction against the clean scene."""
    return {
        "s_cud_common": _l1(pred_common, common_gt),
        "s_cud_unique1": _l1(pred_unique1, unique1_gt),
        "s_cud_unique2": _l1(pred_unique2, unique2_gt),
        "s_cud_recon": _l1(pred_recon, x),
    }


def loss_m_com(c12, c21, norm: str = "l2") -> torch.Tensor:
    c12 = getattr(c12, "tokens", c12)
    c21 = getattr(c21, "tokens", c21)
    return _dist(c12, c21, norm)


def loss_m_uni(lat1, lat2, ref1, ref2, norm: str = "l2") -> torch.Tensor:
    lat1, lat2, ref1, ref2 = (getattr(t, "tokens", t) for t in (lat1, lat2, ref1, ref2))
    for lat, ref in ((lat1, ref1), (lat2, ref2)):
        if lat.shape[-1] != ref.shape[-1]:
            raise ConfigurationError(f"latent width {lat.shape[-1]} != frozen width {ref.shape[-1]}")
    return _dist(lat1, ref1.detach(), norm) + _dist(lat2, ref2.detach(), norm)


def loss_mfm(decoded: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return _l1(decoded, x)


def loss_total(regime: Regime | str, components: dict[str, torch.Tensor], alpha: float = ALPHA) -> LossReport:
    regime = Regime(regime)
    keys = set(components)
    if regime is Regime.MULTI_MODAL:
        if keys != set(MCUD_KEYS):
            raise ContractError(f"multi-modal total needs {MCUD_KEYS}, got {sorted(keys)}")
        total = components["m_com"] + components["m_uni"]
    else:
        if not set(S_CUD_KEYS) <= keys or keys - set(S_CUD_KEYS) - {"mfm"}:
            raise ContractError(f"single-modal total needs {S_CUD_KEYS} (+ optional mfm), got {sorted(keys)}")
        total = sum(components[k] for k in S_CUD_KEYS)
        if "mfm" in components:
            total = total + alpha * components["mfm"]
    return LossReport(total=total, components=dict(components), regime=regime)


def check_finite(report: LossReport) -> None:
    for name, value in report.components.items():
        if not math.isfinite(float(value.detach())):
            raise NumericError(f"non-finite loss component {name!r} = {float(value)}")
    if not math.isfinite(float(report.total.detach())):
        raise NumericError(f"non-finite total loss {float(report.total)}")
