# %% [markdown]
# # Active Search from an untrained network
#
# Active Search keeps training on the single instance it is solving and
# remembers the best solution it has seen. Knapsack is a good showcase:
# an untrained model can still find the optimum of a 50-item instance.

# %%
import numpy as np

from ncopt.oracles import greedy_ratio, knapsack_branch_and_bound
from ncopt.policy import PointerNetwork
from ncopt.problems import generate_knapsack
from ncopt.search import active_search

inst = generate_knapsack(50, 1, seed=11)[0]
opt = knapsack_branch_and_bound(inst).objective
print(f"optimum {opt:.4f}, greedy heuristic {greedy_ratio(inst).objective:.4f}")

# %%
net = PointerNetwork(d=64, input_dim=2, seed=0)
trace, tuned = active_search(inst, net, K=128 * 300, B=128, lr=1e-3, seed=0, stop_at=-opt)
best = trace.best.objective
print(f"best value {best:.4f} after {len(trace.history)} batches ({best / opt:.2%} of optimum)")

# %% [markdown]
# The incumbent never gets worse; the trace stores it per batch.

# %%
h = -np.asarray(trace.history)
for k in np.unique(np.linspace(0, len(h) - 1, 6).astype(int)):
    print(f"batch {k + 1:4d}: {h[k]:.4f}")
