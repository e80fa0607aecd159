# %% [markdown]
# # Actor-critic training on TSP20
#
# A short run at a desk-friendly size. Set STEPS higher for a real model;
# each step takes a fraction of a second on one core. The wide init keeps
# the attention out of its linear regime (see the README).

# %%
import sys

import numpy as np

from ncopt import grad as G
from ncopt.oracles import held_karp
from ncopt.problems import generate_tsp
from ncopt.search import greedy_search, sample_search
from ncopt.trainer import TrainConfig, Trainer

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 300

trainer = Trainer(TrainConfig(problem="tsp", n=20, d=64, batch_size=64, steps=STEPS, init_range=1.0, seed=0))
trainer.train(log_every=max(STEPS // 10, 1))

# %% [markdown]
# Sampled tour length and critic loss, averaged over windows.

# %%
m = np.array([row[1:3] for row in trainer.metrics], dtype=float)
for lo in range(0, STEPS, max(STEPS // 5, 1)):
    w = m[lo : lo + max(STEPS // 5, 1)]
    print(f"steps {lo:5d}+  length {w[:, 0].mean():.3f}  critic loss {w[:, 1].mean():.3f}")

# %% [markdown]
# Greedy decoding versus sampling at temperature 2 on held-out instances.

# %%
test = generate_tsp(20, 20, seed=99)
opt = np.mean([held_karp(i).objective for i in test])
with G.no_grad():
    greedy = np.mean([greedy_search(i, trainer.policy).objective for i in test])
    sampled = np.mean([sample_search(i, trainer.policy, 1280, 128, temperature=2.0, seed=k).best.objective for k, i in enumerate(test)])
print(f"greedy ratio {greedy / opt:.4f}, sampling ratio {sampled / opt:.4f}")
