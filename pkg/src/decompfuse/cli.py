"""``decompfuse`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric abort.  Logs go to stderr; artifacts only to the given paths.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .backbone import PRESETS, FrozenEncoder, frozen_config, pretrain_frozen
from .errors import ConfigurationError, ContractError, DataError, DecompFuseError
from .imaging import list_images, load_image, save_image
from .metrics import MetricReport, TASK_METRICS, evaluate
from .model import ModelConfig
from .runtime import FusionRequest, FusionRuntime
from .synthetic import make_corpus
from .trainer import ABLATIONS, Corpora, TrainConfig, fit

log = logging.getLogger("decompfuse")

FUSED_SUFFIX = "_fused"


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} does not exist")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))  # JSON is a YAML subset
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {p} must hold a mapping at top level")
    return data


def merged(file_cfg: dict, **flags) -> dict:
    """CLI flag > config file > built-in default (flags left at None defer)."""
    out = dict(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def require_dir(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigurationError(f"{what} {p} does not exist or is not a directory")
    return p


def pair_by_stem(*folders: Path) -> tuple[list[tuple[str, list[Path]]], list[str]]:
    """Match files across folders by filename stem (a trailing ``_fused`` is
    ignored so fuse outputs pair with their sources).  Returns the complete
    groups and the names of files that lack a partner somewhere."""
    maps = [{p.stem.removesuffix(FUSED_SUFFIX): p for p in list_images(f)} for f in folders]
    common = set.intersection(*(set(m) for m in maps))
    pairs = [(stem, [m[stem] for m in maps]) for stem in sorted(common)]
    unpaired = sorted(str(m[s]) for m in maps for s in set(m) - common)
    return pairs, unpaired


def strict_pairs(*folders: Path) -> list[tuple[str, list[Path]]]:
    pairs, unpaired = pair_by_stem(*folders)
    if unpaired:
        raise DataError("unmatched files (pairing is by filename stem): " + ", ".join(unpaired))
    return pairs


def load_folder(folder: Path) -> list[np.ndarray]:
    return [load_image(p) for p in list_images(folder)]


# ---- commands -----------------------------------------------------------------


def cmd_make_synthetic(args, cfg: dict) -> int:
    cfg = merged(cfg, seed=args.seed, n=args.n, size=args.size)
    root = make_corpus(args.out, n=int(cfg.get("n", 8)), size=int(cfg.get("size", 64)), seed=int(cfg.get("seed", 0)))
    log.info("wrote synthetic corpus to %s", root)
    return 0


def cmd_pretrain_frozen(args, cfg: dict) -> int:
    cfg = merged(cfg, steps=args.steps, backbone=args.backbone, batch_size=args.batch_size,
                 crop=args.crop, lr=args.lr, seed=args.seed)
    log.info("effective config: %s", json.dumps(cfg, sort_keys=True))
    corpora = [require_dir(c, "corpus") for c in args.corpus]
    names = args.modality or [c.name for c in corpora]
    if len(names) != len(corpora):
        raise ConfigurationError("give one --modality per --corpus")
    if len(set(names)) != len(names):
        raise ConfigurationError(f"modality names must be distinct, got {names}")
    preset = cfg.get("backbone", "micro")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown backbone preset {preset!r}")
    fcfg = frozen_config(PRESETS[preset])
    out = Path(args.out)
    for folder, name in zip(corpora, names):
        images = load_folder(folder)
        if not images:
            raise DataError(f"corpus {folder} holds no images")
        enc = pretrain_frozen(
            images, int(cfg.get("steps", 500)), fcfg, modality=name,
            batch_size=int(cfg.get("batch_size", 4)), crop=int(cfg.get("crop", 64)),
            lr=float(cfg.get("lr", 1e-3)), seed=int(cfg.get("seed", 0)),
        )
        path = out / f"frozen_{name}.dfz"
        enc.save(path)
        log.info("frozen %s encoder -> %s (checksum %s)", name, path, enc.checksum()[:12])
    return 0


def train_config(args, file_cfg: dict) -> TrainConfig:
    cfg = dict(file_cfg)
    model = cfg.pop("model", {}) or {}
    if args.backbone is not None:
        model = {**model, "backbone": args.backbone}
    flags = dict(epochs=args.epochs, lr0=args.lr, batch_size=args.batch_size, crop=args.crop,
                 steps_per_epoch=args.steps_per_epoch, seed=args.seed, modality_mix=args.modality_mix)
    cfg = merged(cfg, **flags)
    if args.ablate:
        cfg["ablate"] = list(args.ablate)
    tc = TrainConfig.from_dict({**cfg, "model": ModelConfig.from_dict(model) if model else ModelConfig()})
    return tc


def cmd_train(args, file_cfg: dict) -> int:
    tc = train_config(args, file_cfg)
    log.info("effective config: %s", json.dumps(tc.to_dict(), sort_keys=True))
    single = load_folder(require_dir(args.single, "single-modal corpus")) if args.single else []
    multi = []
    if args.vis or args.ir:
        if not (args.vis and args.ir):
            raise ConfigurationError("--vis and --ir must be given together")
        for _stem, (v, i) in strict_pairs(require_dir(args.vis, "visible corpus"), require_dir(args.ir, "infrared corpus")):
            multi.append((load_image(v), load_image(i, mode="gray")))
    corpora = Corpora(single, multi)
    frozen = None
    uses_multi = multi and "cud-only" not in tc.ablate and (tc.modality_mix is None or tc.modality_mix > 0)
    if uses_multi:
        if not (args.frozen_vis and args.frozen_ir):
            raise ConfigurationError("a multi-modal corpus needs --frozen-vis and --frozen-ir (see pretrain-frozen)")
        frozen = (FrozenEncoder.load(args.frozen_vis), FrozenEncoder.load(args.frozen_ir))
    seed_everything(tc.seed)
    bundle = fit(corpora, tc, args.out, frozen=frozen, resume=args.resume)
    log.info("final bundle %s (sha256 %s), step %d", bundle.path, bundle.sha256[:12], bundle.step)
    return 0


def _runtime_pairs(args):
    runtime = FusionRuntime.from_checkpoint(args.ckpt)
    pairs, unpaired = pair_by_stem(require_dir(args.input1, "input folder"), require_dir(args.input2, "input folder"))
    if unpaired:
        if args.strict:
            raise DataError("unpaired inputs: " + ", ".join(unpaired))
        log.warning("skipping unpaired inputs: %s", ", ".join(unpaired))
    gray2 = args.mode == "multi_modal"
    for stem, (p1, p2) in pairs:
        img1 = load_image(p1)
        img2 = load_image(p2, mode="gray" if gray2 else "rgb")
        try:
            req = FusionRequest(img1, img2, args.mode)
        except ContractError as exc:
            if args.strict:
                raise DataError(f"{stem}: {exc}") from exc
            log.warning("skipping %s: %s", stem, exc)
            continue
        yield runtime, stem, req


def cmd_fuse(args, cfg: dict) -> int:
    out = Path(args.out)
    count = 0
    for runtime, stem, req in _runtime_pairs(args):
        save_image(out / f"{stem}{FUSED_SUFFIX}.png", runtime.fuse(req))
        count += 1
    log.info("fused %d pairs into %s", count, out)
    return 0


def cmd_decompose(args, cfg: dict) -> int:
    out = Path(args.out)
    for runtime, stem, req in _runtime_pairs(args):
        runtime.decompose_visualize(req).save(out, stem)
    return 0


def cmd_export(args, cfg: dict) -> int:
    out = Path(args.out)
    for runtime, stem, req in _runtime_pairs(args):
        runtime.export_features(req, out / f"{stem}_features.dfz")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    folders = [require_dir(args.fused, "fused folder"), require_dir(args.src1, "source folder"),
               require_dir(args.src2, "source folder")]
    gt = args.gt if args.task == "mff" else None
    if args.gt and args.task != "mff":
        log.warning("--gt is only used for --task mff; ignoring it")
    if gt:
        folders.append(require_dir(gt, "ground-truth folder"))
    report = MetricReport(args.task)
    for stem, paths in strict_pairs(*folders):
        imgs = [load_image(p) for p in paths]
        try:
            values = evaluate(args.task, imgs[0], (imgs[1], imgs[2]), imgs[3] if gt else None)
        except ContractError as exc:
            log.warning("%s: %s", stem, exc)
            report.fail(stem, str(exc))
            continue
        report.add(stem, values)
    out = Path(args.out)
    report.write(out / "metrics.csv", out / "metrics.json")
    log.info("evaluated %d images (%d failed): %s", len(report.rows), len(report.failed), report.aggregate())
    return 0


# ---- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with option defaults")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="decompfuse", description="Decomposition-based self-supervised image fusion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", parents=[common], help="write a small procedural corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--size", type=int, help="side length in pixels")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("pretrain-frozen", parents=[common], help="pretrain per-modality frozen encoders")
    p.add_argument("--corpus", action="append", required=True, help="image folder; repeat per modality")
    p.add_argument("--modality", action="append", help="name per --corpus (default: folder name)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--backbone", choices=sorted(PRESETS))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_pretrain_frozen)

    p = sub.add_parser("train", parents=[common], help="train the fusion network")
    p.add_argument("--single", help="single-modal image folder")
    p.add_argument("--vis", help="visible folder of the multi-modal corpus")
    p.add_argument("--ir", help="infrared folder of the multi-modal corpus")
    p.add_argument("--frozen-vis")
    p.add_argument("--frozen-ir")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--modality-mix", type=float)
    p.add_argument("--backbone", choices=sorted(PRESETS))
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    p.add_argument("--resume", help="checkpoint bundle to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("fuse", cmd_fuse, "fuse a folder of image pairs"),
        ("decompose", cmd_decompose, "write decomposition heatmaps and projections"),
        ("export", cmd_export, "export fused features"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--input1", required=True)
        p.add_argument("--input2", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--mode", choices=["single_modal", "multi_modal"], default="single_modal")
        p.add_argument("--strict", action="store_true", help="fail on unpaired inputs")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="score fused images")
    p.add_argument("--task", choices=sorted(TASK_METRICS), required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--src1", required=True)
    p.add_argument("--src2", required=True)
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        seed_everything(seed)
        return args.func(args, cfg)
    except DecompFuseError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
