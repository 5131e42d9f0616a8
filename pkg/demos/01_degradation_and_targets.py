# %% [markdown]
# # Masked degradation and its decomposition targets
#
# Two block masks cover a scene jointly.  Each view keeps its own blocks
# and fills the rest with noise.  The targets split the scene three ways:
# pixels both views saw, and pixels only one of them saw.

# %%
from pathlib import Path

import numpy as np

from decompfuse.degradation import apply_degradation, decomposition_targets, sample_mask_pair
from decompfuse.imaging import save_image
from decompfuse.synthetic import smooth_scene

OUT = Path(__file__).parent / "out"
rng = np.random.default_rng(0)
x = smooth_scene(64, 64, rng)

# %% [markdown]
# Each mask switches on 75% of the 8x8 blocks; every block is covered by at
# least one of the two.

# %%
masks = sample_mask_pair(64, 64, patch=8, cover_frac=0.75, seed=0)
both = (masks.m1 & masks.m2).mean()
print(f"m1 cover {masks.m1.mean():.2f}, m2 cover {masks.m2.mean():.2f}, overlap {both:.2f}")
print("min(m1 + m2) =", int((masks.m1.astype(int) + masks.m2).min()))

# %%
pair = apply_degradation(x, masks)
t = decomposition_targets(pair)
np.testing.assert_array_equal(t.common_gt + t.unique1_gt + t.unique2_gt, x)
print("targets partition the scene exactly")

# %% [markdown]
# One strip: scene, two degraded views, then common and the two uniques.

# %%
strip = np.concatenate([x, pair.x1, pair.x2, t.common_gt, t.unique1_gt, t.unique2_gt], axis=1)
save_image(OUT / "degradation_strip.png", strip)
print("wrote", OUT / "degradation_strip.png")
