"""Task-indicated cross attention: splits two token grids into a common
stream and one unique stream per input.

For the *common* task the attention map comes from one input and the values
from the other, so the result carries no modality-specific weighting:

    common(1<-2) = FFN(softmax(Q2 K2^T / sqrt(d)) V1)
    common(2<-1) = FFN(softmax(Q1 K1^T / sqrt(d)) V2)

For the *unique* task queries and keys come from different inputs:

    unique1 = FFN(softmax(Q2 K1^T / sqrt(d)) V1)
    unique2 = FFN(softmax(Q1 K2^T / sqrt(d)) V2)
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Mlp, TokenGrid
from .errors import ContractError


class TaskIndicator(str, Enum):
    COMMON = "common"
    UNIQUE = "unique"


class DecompMode(str, Enum):
    CUD = "cud"
    MCUD = "mcud"


LOCAL_INIT, GLOBAL_INIT = 1.0, -8.0


def default_locality(heads: int) -> list[float]:
    """First half of the heads start local, the rest effectively global
    (softplus(-8) ~ 3e-4 per squared grid step)."""
    n_local = (heads + 1) // 2
    return [LOCAL_INIT] * n_local + [GLOBAL_INIT] * (heads - n_local)


class CrossAttentionParams(nn.Module):
    """One set of Q/K/V projections plus the feed-forward network."""

    def __init__(self, dim: int, heads: int = 1, mlp_ratio: float = 4.0, locality_init=None):
        super().__init__()
        if dim % heads:
            raise ContractError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.ffn = Mlp(dim, int(dim * mlp_ratio))
        # per-head locality strength; logits get -softplus(s) * squared grid distance
        if locality_init is None:
            locality_init = default_locality(heads)
        init = torch.as_tensor(locality_init, dtype=torch.float32)
        self.locality = nn.Parameter(init.expand(heads).clone() if init.ndim == 0 else init.clone())
        # PyTorch's default (fan-in scaled) linear init; the small truncated
        # normal used elsewhere starves this residual-free layer of signal

    def logit_bias(self, n: int, grid: tuple[int, int] | None) -> torch.Tensor | None:
        if grid is None or n != grid[0] * grid[1]:
            return None
        ys, xs = torch.meshgrid(torch.arange(grid[0]), torch.arange(grid[1]), indexing="ij")
        pos = torch.stack([ys.flatten(), xs.flatten()], dim=1).to(self.locality.dtype)
        dist2 = torch.cdist(pos, pos) ** 2
        return -F.softplus(self.locality)[:, None, None] * dist2

    def attention_map(
        self, q_src: torch.Tensor, k_src: torch.Tensor, grid: tuple[int, int] | None = None
    ) -> torch.Tensor:
        """(B, heads, N, N) row-stochastic attention weights."""
        b, n, d = q_src.shape
        dh = d // self.heads
        q = self.w_q(q_src).reshape(b, n, self.heads, dh).transpose(1, 2)
        k = self.w_k(k_src).reshape(b, n, self.heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / dh**0.5
        bias = self.logit_bias(n, grid)
        if bias is not None:
            logits = logits + bias
        return logits.softmax(dim=-1)

    def forward(
        self, q_src: torch.Tensor, k_src: torch.Tensor, v_src: torch.Tensor, grid: tuple[int, int] | None = None
    ) -> torch.Tensor:
        b, n, d = v_src.shape
        attn = self.attention_map(q_src, k_src, grid)
        v = self.w_v(v_src).reshape(b, n, self.heads, d // self.heads).transpose(1, 2)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.ffn(mixed)


class CrossAttention(nn.Module):
    """Cross-attention layer holding separate weights per task indicator.

    With ``shared=True`` both call directions read the same parameters;
    otherwise each direction has its own set.  ``tie_tasks=True`` makes the
    common and unique tasks read one parameter set too, so only the Q/K/V
    wiring tells them apart.  ``depth`` stacks layers, each re-applied to the
    previous layer's pair of outputs.
    """

    def __init__(
        self,
        dim: int,
        heads: int = 1,
        shared: bool = True,
        depth: int = 1,
        mlp_ratio: float = 4.0,
        tie_tasks: bool = False,
    ):
        super().__init__()
        self.dim = dim
        self.shared = shared
        self.depth = depth
        self.tie_tasks = tie_tasks
        n_dir = 1 if shared else 2

        def stack():
            return nn.ModuleList(
                nn.ModuleList(CrossAttentionParams(dim, heads, mlp_ratio) for _ in range(n_dir)) for _ in range(depth)
            )

        self.common = stack()
        self.unique = self.common if tie_tasks else stack()

    def params_for(self, task: TaskIndicator, layer: int = 0) -> tuple[CrossAttentionParams, CrossAttentionParams]:
        sets = (self.common if TaskIndicator(task) is TaskIndicator.COMMON else self.unique)[layer]
        return sets[0], sets[-1]

    def forward(
        self, h1: torch.Tensor, h2: torch.Tensor, task: TaskIndicator, grid: tuple[int, int] | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        task = TaskIndicator(task)
        a, b = h1, h2
        for layer in range(self.depth):
            p12, p21 = self.params_for(task, layer)
            if task is TaskIndicator.COMMON:
                a, b = p12(b, b, a, grid), p21(a, a, b, grid)
            else:
                a, b = p12(b, a, a, grid), p21(a, b, b, grid)
        return a, b


def _tensor(h) -> torch.Tensor:
    t = h.tokens if isinstance(h, TokenGrid) else h
    return t.unsqueeze(0) if t.ndim == 2 else t


def _like(h, t: torch.Tensor):
    if isinstance(h, TokenGrid):
        return TokenGrid(t[0] if h.tokens.ndim == 2 else t, h.geometry)
    return t[0] if h.ndim == 2 else t


def _check_pair(h1, h2) -> tuple[torch.Tensor, torch.Tensor]:
    t1, t2 = _tensor(h1), _tensor(h2)
    if t1.shape != t2.shape:
        raise ContractError(f"token grids differ in shape: {tuple(t1.shape)} vs {tuple(t2.shape)}")
    return t1, t2


def _grid_of(h, grid):
    if grid is None and isinstance(h, TokenGrid):
        return (h.geometry.grid_h, h.geometry.grid_w)
    return grid


def ca_common(h1, h2, params: CrossAttention, grid: tuple[int, int] | None = None):
    """Directional commons ``(common(1<-2), common(2<-1))``.  ``grid`` (or a
    TokenGrid's geometry) enables the locality bias."""
    t1, t2 = _check_pair(h1, h2)
    c12, c21 = params(t1, t2, TaskIndicator.COMMON, _grid_of(h1, grid))
    return _like(h1, c12), _like(h2, c21)


def ca_unique(h1, h2, params: CrossAttention, grid: tuple[int, int] | None = None):
    t1, t2 = _check_pair(h1, h2)
    u1, u2 = params(t1, t2, TaskIndicator.UNIQUE, _grid_of(h1, grid))
    return _like(h1, u1), _like(h2, u2)


@dataclass
class DecomposedFeatures:
    """Common and unique token streams.

    In ``mcud`` mode ``f_c`` is ``None`` and the two directional commons are
    kept in ``c12``/``c21`` for the consistency loss; :attr:`common` averages
    them wherever one common stream is needed.
    """

    f_u1: torch.Tensor
    f_u2: torch.Tensor
    f_c: torch.Tensor | None = None
    c12: torch.Tensor | None = None
    c21: torch.Tensor | None = None

    @property
    def common(self) -> torch.Tensor:
        if self.f_c is not None:
            return self.f_c
        return 0.5 * (self.c12 + self.c21)

    @property
    def mode(self) -> DecompMode:
        return DecompMode.CUD if self.f_c is not None else DecompMode.MCUD

    def grids(self) -> list[torch.Tensor]:
        if self.mode is DecompMode.CUD:
            return [self.f_c, self.f_u1, self.f_u2]
        return [self.c12, self.c21, self.f_u1, self.f_u2]


def decompose(
    h1, h2, ca: CrossAttention, mode: DecompMode | str = DecompMode.CUD, grid: tuple[int, int] | None = None
) -> DecomposedFeatures:
    mode = DecompMode(mode)
    grid = _grid_of(h1, grid)
    t1, t2 = _check_pair(h1, h2)
    c12, c21 = ca(t1, t2, TaskIndicator.COMMON, grid)
    u1, u2 = ca(t1, t2, TaskIndicator.UNIQUE, grid)
    if mode is DecompMode.CUD:
        return DecomposedFeatures(f_u1=u1, f_u2=u2, f_c=0.5 * (c12 + c21))
    return DecomposedFeatures(f_u1=u1, f_u2=u2, c12=c12, c21=c21)
