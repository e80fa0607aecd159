"""Inference-time search with a trained (or fresh) pointer network.

Strategies: greedy decoding, greedy over an ensemble of checkpoints, best-of-K
temperature sampling, and Active Search, which keeps refining the policy on
the single test instance with policy gradients while tracking the incumbent.
All bookkeeping is in cost terms (lower is better).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import grad as G
from .oracles import random_feasible_sets
from .policy import PointerNetwork
from .problems import Instance, Solution, make_solution
from .trainer import EmaBaseline

STRATEGIES = ("greedy", "greedy_at_k", "sampling", "active_search")
TUNED_TEMPERATURE = {20: 2.0, 50: 2.2, 100: 1.5}


@dataclass
class SearchConfig:
    strategy: str = "greedy"
    budget: int = 12800
    batch_size: int = 128
    temperature: float = 1.0
    clip_logits: float | None = 10.0
    lr: float = 1e-5
    ema_decay: float = 0.99
    shuffle: bool = True
    seed: int = 0
    checkpoints: Sequence[str] = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.budget < 1 or self.batch_size < 1:
            raise ValueError("budget and batch_size must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class SearchTrace:
    """Best cost at milestone budgets plus the per-batch incumbent history."""

    milestones: list = field(default_factory=list)  # (consumed, best_cost, wallclock_s)
    history: list = field(default_factory=list)  # best cost after each batch
    best: Solution | None = None

    @property
    def best_cost(self) -> float:
        return self.best.cost


def milestone_budgets(batch: int, budget: int) -> list[int]:
    out, m = [], batch
    while m < budget:
        out.append(m)
        m *= 10
    out.append(budget)
    return out


def greedy_search(instance: Instance, policy: PointerNetwork, clip: float | None = 10.0) -> Solution:
    with G.no_grad():
        _, sol = policy.rollout(instance, "greedy", 1.0, clip)
    return sol


def greedy_at_k(instance: Instance, policies: Sequence[PointerNetwork], clip: float | None = 10.0) -> Solution:
    """Best greedy solution over an ensemble; ties go to the earliest model."""
    if not policies:
        raise ValueError("greedy_at_k needs at least one model")
    best = None
    for i, p in enumerate(policies):
        sol = greedy_search(instance, p, clip)
        if best is None or sol.cost < best.cost:
            best = Solution(sol.kind, sol.indices, sol.objective, {"model": i})
    return best


def random_solution(instance: Instance, rng: np.random.Generator) -> Solution:
    if instance.kind == "tsp":
        return make_solution(instance, rng.permutation(instance.n))
    sel = random_feasible_sets(instance, 1, rng)[0]
    return make_solution(instance, np.nonzero(sel)[0])


def _draw_batch(policy, instance, m, temperature, clip, rng, shuffle):
    """Sample ``m`` rollouts of one (optionally shuffled) copy of the instance.

    Returns the rollout and the map from shuffled position to original index.
    """
    perm = rng.permutation(instance.n) if shuffle else np.arange(instance.n)
    feats = np.broadcast_to(instance.features[perm], (m, instance.n, instance.features.shape[1]))
    cap = getattr(instance, "capacity", None)
    r = policy.rollout_batch(instance.kind, feats, "sample", temperature, clip, rng, capacity=cap)
    return r, perm


def _incumbent_from(instance, rollout, perm) -> Solution:
    j = int(np.argmin(rollout.cost))
    return make_solution(instance, perm[rollout.sequence(j)])


def sample_search(
    instance: Instance,
    policy: PointerNetwork,
    K: int,
    B: int = 128,
    temperature: float = 1.0,
    clip: float | None = 10.0,
    seed=0,
    shuffle: bool = False,
) -> SearchTrace:
    """Best of ``K`` sampled solutions, drawn in batches of ``B``; no deduplication."""
    if K < 1:
        raise ValueError("sample_search needs K >= 1")
    rng = np.random.default_rng(seed)
    trace = SearchTrace()
    marks = milestone_budgets(B, K)
    consumed = 0
    t0 = time.monotonic()
    with G.no_grad():
        while consumed < K:
            m = min(B, K - consumed)
            r, perm = _draw_batch(policy, instance, m, temperature, clip, rng, shuffle)
            cand = _incumbent_from(instance, r, perm)
            if trace.best is None or cand.cost < trace.best.cost:
                trace.best = cand
            consumed += m
            trace.history.append(trace.best.cost)
            while marks and consumed >= marks[0]:
                trace.milestones.append((marks.pop(0), trace.best.cost, time.monotonic() - t0))
    return trace


def active_search(
    instance: Instance,
    policy: PointerNetwork,
    K: int,
    B: int = 128,
    alpha: float = 0.99,
    lr: float = 1e-5,
    temperature: float = 1.0,
    clip: float | None = 10.0,
    seed=0,
    shuffle: bool = True,
    max_grad_norm: float = 1.0,
    decay_steps: int = 5000,
    decay_factor: float = 0.96,
    stop_at: float | None = None,
) -> tuple[SearchTrace, PointerNetwork]:
    """Refine a copy of ``policy`` on one instance for ceil(K/B) policy-gradient steps.

    Each step samples ``B`` rollouts of a freshly shuffled copy of the input,
    updates the incumbent (kept in original index space), takes an Adam step
    against a moving-average baseline, and then updates the baseline.

    ``stop_at`` ends the search as soon as the incumbent cost is at or below
    the given value; since the incumbent never gets worse, this only skips
    iterations that could not change a result already at that level.
    """
    if K < 1 or B < 1:
        raise ValueError("active_search needs K >= 1 and B >= 1")
    net = policy.copy()
    opt = G.Adam(net.params, lr=lr, decay_steps=decay_steps, decay_factor=decay_factor)
    ema = EmaBaseline(alpha)
    rng = np.random.default_rng(seed)
    trace = SearchTrace(best=random_solution(instance, np.random.default_rng([seed, 0xA5])))
    marks = milestone_budgets(B, K)
    consumed = 0
    t0 = time.monotonic()
    for _ in range(math.ceil(K / B)):
        m = min(B, K - consumed)
        r, perm = _draw_batch(net, instance, m, temperature, clip, rng, shuffle)
        cand = _incumbent_from(instance, r, perm)
        if cand.cost < trace.best.cost:
            trace.best = cand
        batch_mean = float(r.cost.mean())
        if not ema.initialized:
            ema.update(batch_mean)
        net.params.zero_grad()
        G.backward(G.mean(r.logp * (r.cost - ema.value)))
        G.clip_global_norm(net.params, max_grad_norm)
        opt.step()
        ema.update(batch_mean)
        consumed += m
        trace.history.append(trace.best.cost)
        while marks and consumed >= marks[0]:
            trace.milestones.append((marks.pop(0), trace.best.cost, time.monotonic() - t0))
        if stop_at is not None and trace.best.cost <= stop_at:
            trace.milestones.append((consumed, trace.best.cost, time.monotonic() - t0))
            break
    return trace, net


def run_search(instance: Instance, config: SearchConfig, policies: Sequence[PointerNetwork]) -> tuple[Solution, SearchTrace | None]:
    """Dispatch on ``config.strategy``."""
    s = config.strategy
    if s == "greedy":
        return greedy_search(instance, policies[0], config.clip_logits), None
    if s == "greedy_at_k":
        return greedy_at_k(instance, policies, config.clip_logits), None
    if s == "sampling":
        tr = sample_search(instance, policies[0], config.budget, config.batch_size, config.temperature, config.clip_logits, config.seed, config.shuffle)
        return tr.best, tr
    tr, _ = active_search(
        instance, policies[0], config.budget, config.batch_size, config.ema_decay, config.lr,
        config.temperature, config.clip_logits, config.seed, config.shuffle,
    )
    return tr.best, tr
