# %% [markdown]
# # The command line, end to end
#
# Every step below is one `decompfuse` invocation; `main` is called
# in-process so the demo runs anywhere the package is installed.

# %%
import json
import tempfile
from pathlib import Path

from decompfuse.cli import main

root = Path(tempfile.mkdtemp(prefix="decompfuse-cli-"))
data, frozen, run = root / "data", root / "frozen", root / "run"


def sh(*argv):
    print("$ decompfuse", " ".join(str(a) for a in argv))
    code = main([str(a) for a in argv])
    assert code == 0, code


# %% [markdown]
# A procedural corpus: single-modal scenes, aligned visible/infrared pairs
# and small evaluation sets for the three fusion tasks.

# %%
sh("make-synthetic", "--out", data, "--n", 4, "--size", 64)

# %% [markdown]
# Per-modality frozen encoders, the targets of the multi-modal losses.

# %%
sh("pretrain-frozen", "--corpus", data / "multi/vis", "--corpus", data / "multi/ir",
   "--steps", 50, "--out", frozen)

# %% [markdown]
# Joint training: each step is single-modal or multi-modal with equal odds.

# %%
sh("train", "--single", data / "single", "--vis", data / "multi/vis", "--ir", data / "multi/ir",
   "--frozen-vis", frozen / "frozen_vis.dfz", "--frozen-ir", frozen / "frozen_ir.dfz",
   "--epochs", 2, "--steps-per-epoch", 10, "--out", run)

# %% [markdown]
# Inference: fused images, decomposition visuals and exported features.

# %%
mef = data / "eval/mef"
sh("fuse", "--ckpt", run / "final.dfz", "--input1", mef / "under", "--input2", mef / "over", "--out", root / "fused")
sh("decompose", "--ckpt", run / "final.dfz", "--input1", mef / "under", "--input2", mef / "over",
   "--out", root / "visuals")
sh("export", "--ckpt", run / "final.dfz", "--input1", mef / "under", "--input2", mef / "over",
   "--out", root / "features")

# %% [markdown]
# Scores in the shape of a results table: one CSV row per image and a JSON
# block of means.

# %%
sh("eval", "--task", "mef", "--fused", root / "fused", "--src1", mef / "under", "--src2", mef / "over",
   "--out", root / "scores")
print(json.dumps(json.loads((root / "scores/metrics.json").read_text())["mean"], indent=2))
print("artifacts under", root)
