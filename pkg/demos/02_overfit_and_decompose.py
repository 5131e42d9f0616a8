# %% [markdown]
# # Desk-scale training: memorize eight scenes, then look inside
#
# The micro model trains for 500 single-modal steps on eight 64x64
# procedural scenes (about a minute on one CPU core).  Afterwards the fused
# projector should reproduce a scene from its degraded pair, and the first
# unique stream should light up where only the first view saw the scene.

# %%
import tempfile
from pathlib import Path

import numpy as np

from decompfuse.degradation import apply_degradation, sample_mask_pair
from decompfuse.imaging import save_image
from decompfuse.metrics import fusion_ssim, psnr
from decompfuse.runtime import FusionRequest, FusionRuntime
from decompfuse.synthetic import smooth_scene
from decompfuse.trainer import Corpora, TrainConfig, fit, read_log

OUT = Path(__file__).parent / "out"
rng = np.random.default_rng(0)
images = [smooth_scene(64, 64, rng) for _ in range(8)]

cfg = TrainConfig(epochs=5, steps_per_epoch=100, lr0=1e-3, lr_decay_epoch=4, batch_size=8,
                  jitter=0.0, flip=False, checkpoint_every=0, seed=0)

# %%
run = Path(tempfile.mkdtemp(prefix="decompfuse-demo-"))
bundle = fit(Corpora(images), cfg, run)
totals = [rec["total"] for rec in read_log(run / "train_log.jsonl")]
print(f"loss: step 0 {totals[0]:.3f}, last ten steps {np.mean(totals[-10:]):.3f}")

# %% [markdown]
# Fuse a fresh degraded pair of each training scene (masks never seen in
# training) and compare with the clean scene.

# %%
rt = FusionRuntime(bundle)
for i, x in enumerate(images[:4]):
    m = sample_mask_pair(64, 64, 8, cfg.cover_frac, seed=1000 + i)
    p = apply_degradation(x, m)
    fused = rt.fuse(FusionRequest(p.x1, p.x2))
    l1 = np.abs(fused - x).mean()
    print(f"scene {i}: L1 {l1:.4f}, PSNR vs clean {psnr(fused, x):.1f} dB, SSIM vs views {fusion_ssim(fused, p.x1, p.x2):.3f}")

# %% [markdown]
# Where does PH(f_u1) put its mass?  Compare inside and outside the region
# that only the first view covers.

# %%
vis = rt.decompose_visualize(FusionRequest(p.x1, p.x2))
act = np.abs(vis.projections["fu1"]).sum(axis=2)
region = (m.m1 == 1) & (m.m2 == 0)
print(f"mass inside / outside: {act[region].sum() / act[~region].sum():.1f}")
paths = vis.save(OUT, "scene3")
save_image(OUT / "scene3_fused.png", fused)
print("wrote", ", ".join(p.name for p in paths))
