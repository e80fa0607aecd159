# %% [markdown]
# # A pointer network you can check by hand
#
# The policy is small enough at n=5 to enumerate every tour. We use that to
# confirm two things before trusting any training curve: the tour
# probabilities form a distribution, and the tape gradients agree with
# finite differences.

# %%
import itertools

import numpy as np

from ncopt import grad as G
from ncopt.policy import PointerNetwork
from ncopt.problems import generate_tsp, tour_lengths

inst = generate_tsp(5, 1, seed=0)[0]
net = PointerNetwork(d=16, seed=0, init_range=0.5)

# %% [markdown]
# Score all 5! orderings in one forced batch.

# %%
tours = np.array(list(itertools.permutations(range(5))))
feats = np.broadcast_to(inst.features, (len(tours), 5, 2))
r = net.rollout_batch("tsp", feats, "forced", actions=tours)
p = np.exp(r.logp.data)
print(f"{len(tours)} tours, total probability {p.sum():.15f}")
print(f"expected length {p @ r.cost:.4f}, best {r.cost.min():.4f}")

# %% [markdown]
# The most likely tour under an untrained network is not the shortest.

# %%
best = np.argmax(p)
print("most likely", tours[best], f"p={p[best]:.4f}", f"length {r.cost[best]:.4f}")

# %% [markdown]
# Gradient of the expected length, exact, versus a central difference along
# a random direction in parameter space.

# %%
def expected_length():
    r = net.rollout_batch("tsp", feats, "forced", actions=tours)
    return G.sum(G.exp(r.logp) * tour_lengths(inst.coords[None].repeat(len(tours), 0), tours))


net.params.zero_grad()
G.backward(expected_length())
rng = np.random.default_rng(1)
direction = {k: rng.normal(size=t.shape) for k, t in net.params.items()}
analytic = sum(float(np.sum(g * direction[k])) for k, g in net.params.grads().items())

eps = 1e-5
for sign in (1, -1):
    for k, t in net.params.items():
        t.data = t.data + sign * eps * direction[k]
    val = expected_length().item()
    if sign == 1:
        plus = val
    for k, t in net.params.items():
        t.data = t.data - sign * eps * direction[k]
minus = val
numeric = (plus - minus) / (2 * eps)
print(f"directional derivative: tape {analytic:.10f}, finite difference {numeric:.10f}")
