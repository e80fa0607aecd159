import itertools

import numpy as np
import pytest

from ncopt import grad as G


def all_tours(n):
    return np.array(list(itertools.permutations(range(n))))


def enumerate_logp(net, instance, clip=10.0, temperature=1.0):
    """Log-probability of every permutation, each forced through the model."""
    tours = all_tours(instance.n)
    feats = np.broadcast_to(instance.features, (len(tours), instance.n, 2))
    r = net.rollout_batch("tsp", feats, "forced", temperature, clip, actions=tours)
    return tours, r


def central_differences(fn, store, eps=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``store``."""
    out = {}
    with G.no_grad():
        for name, t in store.items():
            fd = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                fp = fn().item()
                flat[i] = old - eps
                fm = fn().item()
                flat[i] = old
                fd.reshape(-1)[i] = (fp - fm) / (2 * eps)
            out[name] = fd
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst entrywise |a - n| / max(|a|, |n|, floor) over all parameters."""
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
