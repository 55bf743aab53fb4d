# coding: utf-8

# # Pre-train, fine-tune, prune, compare
#
# A shortened version of the main experiment: pre-train a sparse encoder and
# its dense twin on the mixture of synthetic subtasks, fine-tune on subtask 0
# with each setting, and time the pruned model. Takes about a minute.

# In[1]:

import numpy as np

from moeprune.bench import bench_inference, pruned_variants
from moeprune.config import RunConfig
from moeprune.model import MoEEncoder
from moeprune.training import finetune, pretrain

cfg = RunConfig().with_overrides(train={"pretrain_steps": 1500, "finetune_steps": 400})

moe_ckpt, m = pretrain(cfg)
print(f"MoE pre-train accuracy   {m.final_accuracy:.3f}")
dense_ckpt, m = pretrain(cfg, dense=True)
print(f"dense pre-train accuracy {m.final_accuracy:.3f}")


# In[2]:

results = {}
for mode, start in [("dense-ft", dense_ckpt), ("moe-ft", moe_ckpt), ("staged", moe_ckpt), ("eager", moe_ckpt)]:
    accs = [finetune(start, cfg, mode, seed)[1].final_accuracy for seed in (1, 2, 3)]
    results[mode] = np.mean(accs)
    print(f"{mode:<9} {100 * np.mean(accs):6.2f} %")


# Shares in the eager run: which expert the schedule kept, per layer.

# In[3]:

ckpt, metrics = finetune(moe_ckpt, cfg, "eager", 1)
for row in metrics.window_rows():
    if row["event"]:
        print(row["step"], "layer", row["layer"], "expert", row["expert"], row["event"], f"share {row['share']:.3f}")
print("survivors:", ckpt.header["masks"])


# Throughput of the MoE against the pruned-and-collapsed model.

# In[4]:

masks = {int(b): np.array(v, bool) for b, v in ckpt.header["masks"].items()}
models = pruned_variants(MoEEncoder(moe_ckpt.model_config, moe_ckpt.params()),
                         MoEEncoder(ckpt.model_config, ckpt.params(), masks),
                         MoEEncoder(dense_ckpt.model_config, dense_ckpt.params()))
report = bench_inference(models, repetitions=50, warmup=5)
for name, t in report.variants.items():
    print(f"{name:<22} {t.tokens_per_sec:>10.0f} tokens/s")
print(report.ratios())
