"""Joint training over single-modal (degraded pair) and multi-modal
(visible/infrared) batches, with checkpoint bundles and resumable runs.

Randomness is keyed on ``(seed, global_step)``: batch ``s`` of a run is the
same whether the run started at step 0 or was resumed from a checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .backbone import FrozenEncoder, load_arrays
from .container import read_container, write_container
from .degradation import DEFAULT_COVER_FRAC, DEFAULT_NOISE_SIGMA, apply_degradation, decomposition_targets, sample_mask_pair
from .errors import CheckpointError, ConfigurationError, DataError, DecompFuseError, NumericError
from .imaging import ensure_3ch
from .mfm import sample_tokens
from .model import FusionNetwork, ModelConfig
from .objectives import ALPHA, LossReport, Regime, check_finite

log = logging.getLogger(__name__)

ABLATIONS = ("no-mfm", "cud-only", "no-shared-ca")
BUNDLE_KIND = "fusion_bundle"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr0: float = 1e-4
    lr_decay_epoch: int = 20  # halve once, from this (0-based) epoch on
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    crop: int = 64
    alpha: float = ALPHA
    mask_ratio: float = 0.5
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    cover_frac: float = DEFAULT_COVER_FRAC
    seed: int = 0
    modality_mix: float | None = None  # None: 0.5 with a multi-modal corpus, else 0
    steps_per_epoch: int | None = None  # None: one pass over the pooled images
    grad_clip: float = 1.0
    jitter: float = 0.1
    flip: bool = True
    loss_norm: str = "l2"
    checkpoint_every: int = 1  # epochs; 0 disables periodic checkpoints
    ablate: tuple[str, ...] = ()
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop % self.model.backbone.patch_size:
            raise ConfigurationError(
                f"crop {self.crop} is not a multiple of patch size {self.model.backbone.patch_size}"
            )
        if self.modality_mix is not None and not 0.0 <= self.modality_mix <= 1.0:
            raise ConfigurationError(f"modality_mix must be in [0, 1], got {self.modality_mix}")
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise ConfigurationError(f"unknown ablation(s) {sorted(unknown)}; choose from {list(ABLATIONS)}")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * (0.5 if epoch >= self.lr_decay_epoch else 1.0)

    def with_ablations(self) -> "TrainConfig":
        """Fold the ablation flags into the ordinary fields."""
        cfg = self
        if "no-mfm" in self.ablate:
            cfg = replace(cfg, alpha=0.0)
        if "cud-only" in self.ablate:
            cfg = replace(cfg, modality_mix=0.0)
        if "no-shared-ca" in self.ablate:
            cfg = replace(cfg, model=replace(cfg.model, ca_shared=False))
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["ablate"] = list(self.ablate)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = data.pop("model", None)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        if "ablate" in data:
            ab = data["ablate"]
            data["ablate"] = (ab,) if isinstance(ab, str) else tuple(ab)
        if isinstance(model, dict):
            model = ModelConfig.from_dict(model)
        return cls(model=model or ModelConfig(), **data)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Corpora:
    """In-memory training images: single-modal scenes and aligned
    (visible, infrared) pairs."""

    single: list[np.ndarray]
    multi: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def pooled(self) -> list[np.ndarray]:
        """Single-modal pool with every multi-modal image added as its own scene."""
        return self.single + [ensure_3ch(img) for pair in self.multi for img in pair]


@dataclass
class Batch:
    regime: Regime
    step: int
    arrays: dict[str, np.ndarray]  # each (B, 3, s, s) float32
    plan_seed: int = 0

    def checksum(self) -> str:
        h = hashlib.sha256(self.regime.value.encode())
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v) for k, v in self.arrays.items()}


def _crop_window(shape: tuple[int, int], size: int, rng: np.random.Generator) -> tuple[int, int]:
    return int(rng.integers(shape[0] - size + 1)), int(rng.integers(shape[1] - size + 1))


def _jitter_params(rng: np.random.Generator, amount: float) -> tuple[float, float, float]:
    if amount <= 0:
        return 1.0, 1.0, 1.0
    return tuple(float(v) for v in rng.uniform(1 - amount, 1 + amount, 3))


def _at_least(img: np.ndarray, size: int) -> np.ndarray:
    """Edge-pad so both sides are at least ``size``."""
    pad_h, pad_w = max(0, size - img.shape[0]), max(0, size - img.shape[1])
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return img


def _augment(img: np.ndarray, window, size, flips, jit) -> np.ndarray:
    """Crop, flip and color-jitter one 3-channel image with given parameters."""
    y, x = window
    out = img[y : y + size, x : x + size]
    if flips[0]:
        out = out[:, ::-1]
    if flips[1]:
        out = out[::-1]
    brightness, contrast, saturation = jit
    out = out * brightness
    out = (out - out.mean()) * contrast + out.mean()
    gray = (0.299 * out[..., 0] + 0.587 * out[..., 1] + 0.114 * out[..., 2])[..., None]
    out = (out - gray) * saturation + gray
    return np.clip(out, 0.0, 1.0)


def _chw(images: list[np.ndarray]) -> np.ndarray:
    return np.stack([im.transpose(2, 0, 1) for im in images]).astype(np.float32)


def single_modal_batch(images: Sequence[np.ndarray], cfg: TrainConfig, step: int) -> Batch:
    rng = np.random.default_rng([cfg.seed, step, 1])
    s, patch = cfg.crop, cfg.model.backbone.patch_size
    cols = {k: [] for k in ("x", "x1", "x2", "common", "unique1", "unique2")}
    for _ in range(cfg.batch_size):
        img = _at_least(ensure_3ch(images[int(rng.integers(len(images)))]), s)
        window = _crop_window(img.shape[:2], s, rng)
        flips = (rng.random(2) < 0.5) & cfg.flip
        x = _augment(img, window, s, flips, _jitter_params(rng, cfg.jitter))
        masks = sample_mask_pair(s, s, patch, cfg.cover_frac, int(rng.integers(2**31)), cfg.noise_sigma)
        pair = apply_degradation(x, masks)
        t = decomposition_targets(pair)
        for key, arr in zip(cols, (x, pair.x1, pair.x2, t.common_gt, t.unique1_gt, t.unique2_gt)):
            cols[key].append(arr)
    arrays = {k: _chw(v) for k, v in cols.items()}
    return Batch(Regime.SINGLE_MODAL, step, arrays, int(rng.integers(2**31)))


def multi_modal_batch(pairs: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig, step: int) -> Batch:
    """Aligned crops: both images of a pair share window, flips and jitter."""
    rng = np.random.default_rng([cfg.seed, step, 2])
    s = cfg.crop
    vis, ir = [], []
    for _ in range(cfg.batch_size):
        a, b = pairs[int(rng.integers(len(pairs)))]
        if a.shape[:2] != b.shape[:2]:
            raise DataError(f"multi-modal pair is not aligned: {a.shape} vs {b.shape}")
        a, b = _at_least(ensure_3ch(a), s), _at_least(ensure_3ch(b), s)
        window = _crop_window(a.shape[:2], s, rng)
        flips = (rng.random(2) < 0.5) & cfg.flip
        jit = _jitter_params(rng, cfg.jitter)
        vis.append(_augment(a, window, s, flips, jit))
        ir.append(_augment(b, window, s, flips, jit))
    return Batch(Regime.MULTI_MODAL, step, {"vis": _chw(vis), "ir": _chw(ir)})


def effective_mix(corpora: Corpora, cfg: TrainConfig) -> float:
    if not corpora.multi:
        return 0.0
    return 0.5 if cfg.modality_mix is None else cfg.modality_mix


def make_batches(corpora: Corpora, cfg: TrainConfig, start_step: int = 0) -> Iterator[Batch]:
    """Endless batch stream; each step draws Bernoulli(modality_mix) for its regime."""
    single = corpora.pooled() if "cud-only" in cfg.ablate else list(corpora.single)
    if not single:
        raise DataError("single-modal corpus is empty")
    mix = 0.0 if "cud-only" in cfg.ablate else effective_mix(corpora, cfg)
    step = start_step
    while True:
        coin = np.random.default_rng([cfg.seed, step, 0]).random()
        if coin < mix:
            yield multi_modal_batch(corpora.multi, cfg, step)
        else:
            yield single_modal_batch(single, cfg, step)
        step += 1


def compute_loss(
    batch: Batch, model: FusionNetwork, cfg: TrainConfig, frozen: tuple[FrozenEncoder, FrozenEncoder] | None = None
) -> LossReport:
    t = batch.tensors()
    if batch.regime is Regime.SINGLE_MODAL:
        plan = None
        if cfg.alpha > 0:
            n = model.geometry(t["x"]).num_tokens
            plan = sample_tokens(n, cfg.mask_ratio, batch.plan_seed, batch=t["x"].shape[0])
        targets = (t["common"], t["unique1"], t["unique2"])
        return model.single_modal_loss(t["x"], t["x1"], t["x2"], targets, cfg.alpha, plan)
    if frozen is None:
        raise ConfigurationError("multi-modal batches need the two frozen encoders")
    return model.multi_modal_loss(t["vis"], t["ir"], frozen, cfg.loss_norm)


def train_step(
    batch: Batch,
    model: FusionNetwork,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    frozen: tuple[FrozenEncoder, FrozenEncoder] | None = None,
) -> LossReport:
    """One optimizer update.  Parameters without a gradient path for this
    regime keep their values (their grads are reset to None)."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    report = compute_loss(batch, model, cfg, frozen)
    check_finite(report)
    report.total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossReport(
        report.total.detach(), {k: v.detach() for k, v in report.components.items()}, report.regime
    )


def make_optimizer(model: FusionNetwork, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=tuple(cfg.betas))


def _optimizer_arrays(optimizer: torch.optim.Optimizer) -> tuple[dict, dict[str, np.ndarray]]:
    state = optimizer.state_dict()
    arrays = {}
    for idx, slots in state["state"].items():
        for key, value in slots.items():
            arrays[f"optim.{idx}.{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in state["param_groups"]]
    return {"param_groups": groups}, arrays


def _optimizer_state(meta: dict, arrays: dict[str, np.ndarray]) -> dict:
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


@dataclass
class CheckpointBundle:
    model: FusionNetwork
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    optimizer_state: dict | None = None
    path: Path | None = None
    sha256: str | None = None

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def save(self, path: str | Path, optimizer: torch.optim.Optimizer | None = None) -> str:
        arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        meta = {
            "train_config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "step": self.step,
            "epoch": self.epoch,
        }
        if optimizer is not None:
            opt_meta, opt_arrays = _optimizer_arrays(optimizer)
            meta["optimizer"] = opt_meta
            arrays.update(opt_arrays)
        self.sha256 = write_container(path, BUNDLE_KIND, meta, arrays)
        self.path = Path(path)
        return self.sha256

    @classmethod
    def load(cls, path: str | Path) -> "CheckpointBundle":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"checkpoint {path} does not exist")
        header, arrays = read_container(path, expect_kind=BUNDLE_KIND)
        meta = header["meta"]
        cfg = TrainConfig.from_dict(meta["train_config"])
        if cfg.config_hash() != meta["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch")
        model = FusionNetwork(cfg.with_ablations().model)
        load_arrays(model, {k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})
        model.eval()
        opt_state = _optimizer_state(meta["optimizer"], arrays) if "optimizer" in meta else None
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        return cls(model, cfg, meta["step"], meta["epoch"], opt_state, path, digest)


def steps_per_epoch(corpora: Corpora, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    n = len(corpora.single) + len(corpora.multi)
    return max(1, math.ceil(n / cfg.batch_size))


def fit(
    corpora: Corpora,
    cfg: TrainConfig,
    out_dir: str | Path,
    frozen: tuple[FrozenEncoder, FrozenEncoder] | None = None,
    resume: str | Path | None = None,
) -> CheckpointBundle:
    """Run the epoch loop and return the final bundle (also written to
    ``out_dir/final.dfz``).  One JSON line per step goes to ``out_dir/train_log.jsonl``."""
    out_dir = Path(out_dir)
    eff = cfg.with_ablations()
    if not corpora.single and not ("cud-only" in eff.ablate and corpora.multi):
        raise DataError("single-modal corpus is empty")
    mix = 0.0 if "cud-only" in eff.ablate else effective_mix(corpora, eff)
    if mix > 0 and frozen is None:
        raise ConfigurationError("a multi-modal corpus is in use but no frozen encoders were given")
    frozen_sums = [enc.checksum() for enc in frozen] if frozen else []

    torch.manual_seed(eff.seed)
    model = FusionNetwork(eff.model)
    optimizer = make_optimizer(model, eff)
    start_epoch, step = 0, 0
    if resume is not None:
        prev = CheckpointBundle.load(resume)
        if prev.config_hash != cfg.config_hash():
            log.warning("resuming from a checkpoint trained with a different config")
        model.load_state_dict(prev.model.state_dict())
        if prev.optimizer_state is not None:
            optimizer.load_state_dict(prev.optimizer_state)
        start_epoch, step = prev.epoch, prev.step
        log.info("resumed from %s at epoch %d step %d", resume, start_epoch, step)

    per_epoch = steps_per_epoch(corpora, eff)
    log_path = out_dir / "train_log.jsonl"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "a" if resume else "w", encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot write training log {log_path}: {exc}") from exc

    bundle = CheckpointBundle(model, cfg, step, start_epoch)
    stream = make_batches(corpora, eff, start_step=step)
    with log_fh:
        for epoch in range(start_epoch, eff.epochs):
            lr = eff.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for _ in range(per_epoch):
                batch = next(stream)
                try:
                    report = train_step(batch, model, optimizer, eff, frozen)
                except NumericError as exc:
                    raise NumericError(f"step {step} (epoch {epoch}): {exc}") from exc
                log_fh.write(report.to_json(step=step, epoch=epoch, lr=lr) + "\n")
                step += 1
            log_fh.flush()
            log.info("epoch %d done: step %d, last total %.5f", epoch, step, float(report.total))
            bundle.step, bundle.epoch = step, epoch + 1
            if eff.checkpoint_every and (epoch + 1) % eff.checkpoint_every == 0 and epoch + 1 < eff.epochs:
                bundle.save(out_dir / f"epoch{epoch + 1:03d}.dfz", optimizer)

    bundle.save(out_dir / "final.dfz", optimizer)
    model.eval()
    if frozen and [enc.checksum() for enc in frozen] != frozen_sums:
        raise DecompFuseError("frozen encoder weights changed during training")
    return bundle


def read_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
