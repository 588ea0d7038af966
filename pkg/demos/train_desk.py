"""
Learning MAP assignments with budget constraints
================================================

Chains with a cap on how many variables in each window may be on are
easy to label exactly with dynamic programming but hard for plain
max-product. We train a small FGNN on such chains and compare.
"""

import numpy as np

from fgnn.learn import TrainConfig, build_arch, evaluate, map_agreement, train
from fgnn.maxprod import run_max_product
from fgnn.synth import feature_dims, gen_dataset

# Short chains keep the demo quick: length 14, window 4, budget 2.
L, window, k = 14, 4, 2
train_set, val, test = gen_dataset(1, 0, 200, 50, 100, L, window, k)
print(len(train_set), "training chains, first label", train_set[0].label)

# %%
# Baseline: max-product with the best iteration count on the test split.
best = 0.0
for iters in range(1, 2 * L + 1):
    score = np.mean([map_agreement(i.graph, run_max_product(i.graph, iters)[1], i.label) for i in test])
    best = max(best, score)
print(f"max-product best agreement {best:.3f}")

# %%
# A narrower version of the default architecture, trained for a few epochs.
arch = build_arch("desk", feature_dims(1, window), seed=0, width=16)
print(f"untrained agreement {evaluate(arch, test)[0]:.3f}")
cfg = TrainConfig(learning_rate=1e-2, epochs=15)
stack, log = train(train_set, cfg, arch, val=val,
                   on_epoch=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['loss']:.4f}  val {r['val_agreement']:.3f}"))
mean, std = evaluate(stack, test)
print(f"trained agreement {mean:.3f} +- {std:.3f}")
