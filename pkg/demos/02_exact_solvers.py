# %% [markdown]
# # Reference solvers
#
# Ratios to optimal need optimal values. Held-Karp covers TSP up to 20
# cities; branch-and-bound with the fractional bound covers knapsack.

# %%
import time

import numpy as np

from ncopt.oracles import greedy_ratio, held_karp, knapsack_branch_and_bound, nearest_neighbor, two_opt
from ncopt.problems import generate_knapsack, generate_tsp

# %% [markdown]
# ## TSP20: heuristics against the optimum

# %%
insts = generate_tsp(20, 50, seed=3)
t0 = time.perf_counter()
opt = np.array([held_karp(i).objective for i in insts])
t_hk = time.perf_counter() - t0
nn = np.array([nearest_neighbor(i).objective for i in insts])
nn2 = np.array([two_opt(i, nearest_neighbor(i).solution.indices).objective for i in insts])
print(f"Held-Karp mean {opt.mean():.4f} ({1000 * t_hk / len(insts):.0f} ms per instance)")
print(f"nearest neighbour ratio {nn.mean() / opt.mean():.4f}, after 2-opt {nn2.mean() / opt.mean():.4f}")

# %% [markdown]
# ## KNAP50: value-to-weight greedy against the optimum

# %%
kinsts = generate_knapsack(50, 200, seed=4)
best = np.array([knapsack_branch_and_bound(i).objective for i in kinsts])
greedy = np.array([greedy_ratio(i).objective for i in kinsts])
print(f"optimum {best.mean():.4f}, greedy {greedy.mean():.4f}")
print(f"greedy is optimal on {np.mean(np.isclose(best, greedy)):.0%} of instances")
