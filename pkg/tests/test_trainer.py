import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from decompfuse.backbone import FrozenEncoder, frozen_config
from decompfuse.errors import CheckpointError, ConfigurationError, DataError
from decompfuse.model import FusionNetwork
from decompfuse.objectives import S_CUD_KEYS, Regime
from decompfuse.trainer import (
    ABLATIONS,
    CheckpointBundle,
    Corpora,
    TrainConfig,
    fit,
    make_batches,
    make_optimizer,
    multi_modal_batch,
    read_log,
    single_modal_batch,
    steps_per_epoch,
    train_step,
)
from conftest import micro_model_config, scenes, to_batch

MICRO = micro_model_config(dim=16, patch=4)


def small_cfg(**kw):
    base = dict(epochs=1, lr0=1e-3, batch_size=2, crop=16, checkpoint_every=0, model=MICRO)
    base.update(kw)
    return TrainConfig(**base)


def pairs(n, size=24, seed=0):
    vis = scenes(n, size, seed)
    return [(v, v.mean(axis=2, keepdims=True) ** 0.5) for v in vis]


def frozen_pair(cfg, seed=0):
    torch.manual_seed(seed)
    bb = frozen_config(cfg.model.backbone)
    return FrozenEncoder(bb, "vis"), FrozenEncoder(bb, "ir")


# ---- config --------------------------------------------------------------------


def test_lr_halves_after_decay_epoch():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == cfg.lr_at(19) == 1e-4
    assert cfg.lr_at(20) == cfg.lr_at(25) == cfg.lr0 / 2


def test_default_schedule_values():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.alpha, cfg.mask_ratio) == (30, 4, 0.1, 0.5)


@pytest.mark.parametrize(
    "kw", [dict(epochs=0), dict(lr0=0.0), dict(batch_size=0), dict(crop=18), dict(modality_mix=1.5), dict(ablate=("x",))]
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigurationError):
        small_cfg(**kw)


def test_ablations_fold_into_fields():
    cfg = small_cfg(ablate=ABLATIONS).with_ablations()
    assert cfg.alpha == 0.0 and cfg.modality_mix == 0.0 and cfg.model.ca_shared is False


def test_config_dict_round_trip_and_hash():
    cfg = small_cfg(ablate=("no-mfm",), betas=(0.8, 0.9))
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert replace(cfg, seed=1).config_hash() != cfg.config_hash()
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epoch": 3})


# ---- batches -------------------------------------------------------------------


def test_mix_zero_stream_is_single_modal():
    corp = Corpora(scenes(3, 20), pairs(3))
    stream = make_batches(corp, small_cfg(modality_mix=0.0))
    assert all(next(stream).regime is Regime.SINGLE_MODAL for _ in range(30))


def test_mix_one_stream_is_multi_modal_and_default_mix_has_both():
    corp = Corpora(scenes(3, 20), pairs(3))
    stream = make_batches(corp, small_cfg(modality_mix=1.0))
    assert all(next(stream).regime is Regime.MULTI_MODAL for _ in range(10))
    stream = make_batches(corp, small_cfg())
    regimes = {next(stream).regime for _ in range(40)}
    assert regimes == {Regime.SINGLE_MODAL, Regime.MULTI_MODAL}


def test_single_corpus_defaults_to_single_modal():
    stream = make_batches(Corpora(scenes(2, 16)), small_cfg())
    assert all(next(stream).regime is Regime.SINGLE_MODAL for _ in range(10))


def test_aligned_pairs_share_crop_and_flips():
    # ir is a pixelwise function of vis, so any misalignment breaks the relation
    vis = scenes(4, 40, seed=2)
    corp = [(v, v[..., ::-1].copy()) for v in vis]
    for step in range(20):
        b = multi_modal_batch(corp, small_cfg(jitter=0.0), step)
        np.testing.assert_array_equal(b.arrays["ir"], b.arrays["vis"][:, ::-1])


def test_flips_happen():
    img = scenes(1, 16, seed=3)[0]
    seen = set()
    for step in range(40):
        x = single_modal_batch([img], small_cfg(jitter=0.0, batch_size=1), step).arrays["x"][0].transpose(1, 2, 0)
        for name, ref in (("none", img), ("h", img[:, ::-1]), ("v", img[::-1]), ("hv", img[::-1, ::-1])):
            if np.allclose(x, ref, atol=1e-6):
                seen.add(name)
    assert seen == {"none", "h", "v", "hv"}


def test_seeded_stream_reproducible():
    corp = Corpora(scenes(3, 24), pairs(2))
    a = [next(s).checksum() for s in [make_batches(corp, small_cfg(seed=5))] for _ in range(6)]
    b = [next(s).checksum() for s in [make_batches(corp, small_cfg(seed=5))] for _ in range(6)]
    c = next(make_batches(corp, small_cfg(seed=6))).checksum()
    assert a == b and c != a[0]


def test_stream_is_keyed_on_global_step():
    corp = Corpora(scenes(3, 24))
    full = make_batches(corp, small_cfg())
    sums = [next(full).checksum() for _ in range(5)]
    assert next(make_batches(corp, small_cfg(), start_step=3)).checksum() == sums[3]


def test_single_modal_batch_contents():
    b = single_modal_batch(scenes(2, 12), small_cfg(), 0)
    assert set(b.arrays) == {"x", "x1", "x2", "common", "unique1", "unique2"}
    assert all(v.shape == (2, 3, 16, 16) and v.dtype == np.float32 for v in b.arrays.values())


def test_empty_corpus():
    with pytest.raises(DataError):
        next(make_batches(Corpora([]), small_cfg()))
    with pytest.raises(DataError):
        fit(Corpora([]), small_cfg(), "unused")


def test_steps_per_epoch():
    assert steps_per_epoch(Corpora(scenes(5, 8)), small_cfg()) == 3
    assert steps_per_epoch(Corpora(scenes(5, 8)), small_cfg(steps_per_epoch=7)) == 7


# ---- steps ---------------------------------------------------------------------


def fresh(cfg, seed=0):
    torch.manual_seed(seed)
    model = FusionNetwork(cfg.model)
    return model, make_optimizer(model, cfg)


def test_identical_steps_identical_reports():
    cfg = small_cfg()
    batch = single_modal_batch(scenes(2, 16), cfg, 0)
    reports = []
    for _ in range(2):
        model, opt = fresh(cfg)
        reports.append([train_step(batch, model, opt, cfg) for _ in range(2)])
    for a, b in zip(*reports):
        assert torch.equal(a.total, b.total)
        assert all(torch.equal(a.components[k], b.components[k]) for k in a.components)


def test_multi_modal_step_parameter_delta_audit():
    cfg = small_cfg(modality_mix=1.0)
    model, opt = fresh(cfg)
    frozen = frozen_pair(cfg)
    frozen_sums = [f.checksum() for f in frozen]
    before = {k: v.clone() for k, v in model.state_dict().items()}
    batch = multi_modal_batch(pairs(2), cfg, 0)
    report = train_step(batch, model, opt, cfg, frozen)
    assert set(report.components) == {"m_com", "m_uni"}

    after = model.state_dict()

    def changed(prefix):
        return any(not torch.equal(before[k], after[k]) for k in before if k.startswith(prefix))

    for prefix in ("backbone.", "ca.", "latent_heads."):
        assert changed(prefix), prefix
    for prefix in ("decoder.", "mfm_encoder.", "ph_common.", "ph_unique.", "ph_fused."):
        assert not changed(prefix), prefix
    assert [f.checksum() for f in frozen] == frozen_sums
    assert all(p.grad is None for f in frozen for p in f.parameters())


def test_single_modal_step_leaves_latent_heads_alone():
    cfg = small_cfg()
    model, opt = fresh(cfg)
    before = {k: v.clone() for k, v in model.state_dict().items() if k.startswith("latent_heads.")}
    train_step(single_modal_batch(scenes(2, 16), cfg, 0), model, opt, cfg)
    assert all(torch.equal(v, model.state_dict()[k]) for k, v in before.items())


def test_multi_modal_needs_frozen():
    cfg = small_cfg(modality_mix=1.0)
    model, opt = fresh(cfg)
    with pytest.raises(ConfigurationError):
        train_step(multi_modal_batch(pairs(1), cfg, 0), model, opt, cfg)
    with pytest.raises(ConfigurationError):
        fit(Corpora(scenes(2, 16), pairs(2)), cfg, "unused")


def test_four_sample_corpus_loss_halves_within_200_steps(tmp_path):
    # calibrated: the mean of the last 10 steps sits at 0.40 of step 0
    cfg = TrainConfig(epochs=1, steps_per_epoch=200, lr0=1e-3, batch_size=4, crop=32, jitter=0.0, flip=False,
                      checkpoint_every=0, seed=0)
    fit(Corpora(scenes(4, 32)), cfg, tmp_path)
    totals = [r["total"] for r in read_log(tmp_path / "train_log.jsonl")]
    assert len(totals) == 200
    assert np.mean(totals[-10:]) <= 0.5 * totals[0]


# ---- fit, checkpoints and resume -----------------------------------------------


def test_one_epoch_smoke_gives_loadable_bundle(tmp_path):
    cfg = small_cfg(batch_size=2)
    bundle = fit(Corpora(scenes(4, 16)), cfg, tmp_path)
    assert (tmp_path / "final.dfz").exists() and bundle.step == 2 and bundle.epoch == 1
    back = CheckpointBundle.load(tmp_path / "final.dfz")
    assert back.config == cfg and back.step == 2 and back.sha256 == bundle.sha256
    log = read_log(tmp_path / "train_log.jsonl")
    assert [r["step"] for r in log] == [0, 1] and all(r["regime"] == "single_modal" for r in log)
    assert set(log[0]["components"]) == {*S_CUD_KEYS, "mfm"}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = small_cfg()
    model, opt = fresh(cfg)
    train_step(single_modal_batch(scenes(2, 16), cfg, 0), model, opt, cfg)
    model.eval()
    probe = to_batch(*scenes(2, 20, seed=9))
    with torch.no_grad():
        want = model.fuse(probe[:1], probe[1:])
    CheckpointBundle(model, cfg, 1, 0).save(tmp_path / "b.dfz", opt)
    back = CheckpointBundle.load(tmp_path / "b.dfz")
    with torch.no_grad():
        got = back.model.fuse(probe[:1], probe[1:])
    assert torch.equal(want, got)
    assert set(back.optimizer_state["state"]) == set(opt.state_dict()["state"])


def test_resume_continues_and_matches_uninterrupted_run(tmp_path):
    corp = Corpora(scenes(4, 16))
    cfg = small_cfg(epochs=2, checkpoint_every=1)
    fit(corp, cfg, tmp_path / "full")
    resumed = fit(corp, cfg, tmp_path / "resumed", resume=tmp_path / "full" / "epoch001.dfz")
    steps = [r["step"] for r in read_log(tmp_path / "resumed" / "train_log.jsonl")]
    assert steps == [2, 3] and resumed.step == 4 and resumed.epoch == 2
    full = read_log(tmp_path / "full" / "train_log.jsonl")
    assert [r["total"] for r in full[2:]] == [r["total"] for r in read_log(tmp_path / "resumed" / "train_log.jsonl")]
    assert full[2]["lr"] == cfg.lr0


def test_alpha_zero_and_cud_only_log_has_no_mfm(tmp_path):
    cfg = small_cfg(ablate=("no-mfm", "cud-only"))
    fit(Corpora(scenes(2, 16), pairs(2)), cfg, tmp_path)
    for rec in read_log(tmp_path / "train_log.jsonl"):
        assert rec["regime"] == "single_modal" and "mfm" not in rec["components"]


def test_no_shared_ca_ablation_round_trips(tmp_path):
    bundle = fit(Corpora(scenes(2, 16)), small_cfg(ablate=("no-shared-ca",)), tmp_path)
    assert bundle.model.cfg.ca_shared is False
    back = CheckpointBundle.load(tmp_path / "final.dfz")
    assert back.model.cfg.ca_shared is False


def test_multi_modal_fit_keeps_frozen_weights(tmp_path):
    cfg = small_cfg(modality_mix=1.0, batch_size=1)
    frozen = frozen_pair(cfg)
    sums = [f.checksum() for f in frozen]
    fit(Corpora(scenes(1, 16), pairs(2)), cfg, tmp_path, frozen=frozen)
    assert [f.checksum() for f in frozen] == sums
    assert {r["regime"] for r in read_log(tmp_path / "train_log.jsonl")} == {"multi_modal"}


def test_unwritable_output_raises_checkpoint_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(CheckpointError, match="file"):
        fit(Corpora(scenes(2, 16)), small_cfg(), blocker / "run")
    model, _ = fresh(small_cfg())
    with pytest.raises(CheckpointError, match="file"):
        CheckpointBundle(model, small_cfg()).save(blocker / "b.dfz")


def test_missing_and_corrupt_checkpoints(tmp_path):
    with pytest.raises(ConfigurationError):
        CheckpointBundle.load(tmp_path / "nope.dfz")
    (tmp_path / "bad.dfz").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        CheckpointBundle.load(tmp_path / "bad.dfz")
