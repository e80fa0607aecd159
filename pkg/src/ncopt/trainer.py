"""Policy-gradient training: REINFORCE with a critic or moving-average baseline,
plus teacher-forced cross-entropy training for comparison."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import grad as G
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .critic import Critic, critic_loss
from .policy import PointerNetwork, Rollout
from .problems import default_capacity

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "mean_objective", "critic_loss", "effective_lr", "wallclock_ms")


class NumericError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class TrainConfig:
    problem: str = "tsp"
    n: int = 20
    capacity: float | None = None
    batch_size: int = 128
    steps: int = 10000
    lr: float = 1e-3
    critic_lr: float = 1e-3
    decay_steps: int = 5000
    decay_factor: float = 0.96
    d: int = 128
    n_glimpses: int = 1
    process_steps: int = 3
    clip_logits: float | None = 10.0
    max_grad_norm: float = 1.0
    baseline: str = "critic"
    ema_decay: float = 0.99
    init_range: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.lr < 0 or self.critic_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.baseline not in ("critic", "ema"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.problem not in ("tsp", "knapsack"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.problem == "knapsack" and self.capacity is None:
            self.capacity = default_capacity(self.n)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def arch(self) -> dict:
        return {"d": self.d, "n_glimpses": self.n_glimpses, "process_steps": self.process_steps}


@dataclass
class EmaBaseline:
    decay: float = 0.99
    value: float = 0.0
    initialized: bool = False

    def update(self, batch_mean: float) -> float:
        if not self.initialized:
            self.value = float(batch_mean)
            self.initialized = True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(batch_mean)
        return self.value


def ema_update(baseline: EmaBaseline, batch_mean: float) -> EmaBaseline:
    baseline.update(batch_mean)
    return baseline


def reinforce_batch_gradient(rollout: Rollout, baselines, weights=None) -> float:
    """Accumulate ``(1/B) sum_i (L_i - b_i) grad log p(pi_i)`` into the policy adjoints.

    The advantage is a constant: nothing flows through the objective or the
    baseline. ``weights`` replaces the uniform ``1/B`` (e.g. exact
    probabilities when the batch enumerates every solution). Returns the
    surrogate loss value.
    """
    b = np.asarray(baselines, dtype=np.float64)
    if b.shape != rollout.cost.shape:
        raise G.ShapeError("reinforce_batch_gradient", rollout.cost.shape, b.shape)
    advantage = rollout.cost - b
    if weights is None:
        surrogate = G.mean(rollout.logp * advantage)
    else:
        surrogate = G.sum(rollout.logp * (advantage * np.asarray(weights, dtype=np.float64)))
    G.backward(surrogate)
    return surrogate.item()


def uniform_source(problem: str, n: int, capacity=None) -> Callable:
    """Fresh i.i.d. instances from the unit square / unit weight-value box."""

    def draw(rng: np.random.Generator, batch: int):
        return rng.uniform(0.0, 1.0, size=(batch, n, 2)), capacity

    draw.problem = problem
    return draw


class Trainer:
    """Synchronous actor-critic trainer; one Adam update per step per network."""

    def __init__(self, config: TrainConfig, instance_source: Callable | None = None, metrics_path=None):
        self.config = config
        c = config
        self.policy = PointerNetwork(d=c.d, input_dim=2, n_glimpses=c.n_glimpses, seed=[c.seed, 0], init_range=c.init_range)
        self.critic = Critic(d=c.d, input_dim=2, process_steps=c.process_steps, seed=[c.seed, 1], init_range=c.init_range)
        self.policy_opt = G.Adam(self.policy.params, lr=c.lr, decay_steps=c.decay_steps, decay_factor=c.decay_factor)
        self.critic_opt = G.Adam(self.critic.params, lr=c.critic_lr, decay_steps=c.decay_steps, decay_factor=c.decay_factor)
        self.ema = EmaBaseline(c.ema_decay)
        self.source = instance_source or uniform_source(c.problem, c.n, c.capacity)
        self.step = 0
        self.metrics: list[tuple] = []
        self.metrics_path = Path(metrics_path) if metrics_path else None

    def step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 7, step])

    def train_step(self) -> tuple:
        c = self.config
        t0 = time.monotonic()
        rng = self.step_rng(self.step)
        feats, cap = self.source(rng, c.batch_size)
        rollout = self.policy.rollout_batch(c.problem, feats, "sample", 1.0, c.clip_logits, rng, capacity=cap)
        lr_now = self.policy_opt.effective_lr()

        if c.baseline == "critic":
            pred = self.critic.forward(feats)
            baselines = pred.data.copy()
        else:
            if not self.ema.initialized:
                self.ema.update(rollout.cost.mean())
            baselines = np.full(c.batch_size, self.ema.value)

        self.policy.params.zero_grad()
        surrogate = reinforce_batch_gradient(rollout, baselines)
        G.clip_global_norm(self.policy.params, c.max_grad_norm)
        self.policy_opt.step()

        if c.baseline == "critic":
            self.critic.params.zero_grad()
            closs_t = critic_loss(pred, rollout.cost)
            G.backward(closs_t)
            G.clip_global_norm(self.critic.params, c.max_grad_norm)
            self.critic_opt.step()
            closs = closs_t.item()
        else:
            self.ema.update(rollout.cost.mean())
            closs = float(np.mean((baselines - rollout.cost) ** 2))

        mean_obj = float(rollout.cost.mean())
        if not (math.isfinite(surrogate) and math.isfinite(closs) and math.isfinite(mean_obj)):
            self._dump_failure(feats)
            raise NumericError(f"non-finite value at step {self.step}: surrogate={surrogate}, critic_loss={closs}")
        row = (self.step, mean_obj, closs, lr_now, (time.monotonic() - t0) * 1e3)
        self.metrics.append(row)
        self._append_metrics(row)
        self.step += 1
        return row

    def train(self, steps: int | None = None, checkpoint_every: int = 0, checkpoint_dir=None, log_every: int = 0):
        total = self.config.steps if steps is None else steps
        while self.step < total:
            row = self.train_step()
            if log_every and self.step % log_every == 0:
                log.info("step %d mean objective %.4f critic loss %.4f", *row[:3])
            if checkpoint_every and checkpoint_dir and self.step % checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"step{self.step:07d}.ckpt")
        return self

    # --- persistence -------------------------------------------------------

    def _append_metrics(self, row) -> None:
        if self.metrics_path is None:
            return
        new = not self.metrics_path.exists()
        self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.metrics_path, "a") as fh:
            if new:
                fh.write(",".join(METRICS_HEADER) + "\n")
            fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]:.3f}\n")

    def _dump_failure(self, feats) -> None:
        if self.metrics_path is None:
            return
        dump = self.metrics_path.with_suffix(".failure.ckpt")
        self.save(dump)
        np.save(dump.with_suffix(".inputs.npy"), feats)
        log.error("non-finite training state written to %s", dump)

    def save(self, path) -> None:
        state = {
            "step": np.array([self.step], dtype=np.float64),
            "ema": np.array([self.ema.value, float(self.ema.initialized)]),
        }
        meta = {
            "train_config": self.config.to_dict(),
            "policy_arch": self.policy.arch,
            "critic_arch": self.critic.arch,
            "step": self.step,
        }
        save_checkpoint(
            path,
            {
                "policy": self.policy.params,
                "critic": self.critic.params,
                "adam.policy": self.policy_opt.state_arrays(),
                "adam.critic": self.critic_opt.state_arrays(),
                "state": state,
            },
            meta,
        )

    @classmethod
    def resume(cls, path, config: TrainConfig | None = None, instance_source=None, metrics_path=None) -> Trainer:
        meta, sec = load_checkpoint(path)
        saved = TrainConfig(**meta["train_config"])
        config = config or saved
        for key in ("d", "n_glimpses", "process_steps", "problem"):
            if getattr(config, key) != getattr(saved, key):
                raise CheckpointError(f"cannot resume: {key}={getattr(config, key)!r} but checkpoint has {getattr(saved, key)!r}")
        tr = cls(config, instance_source, metrics_path)
        tr.policy.params.load_arrays(sec["policy"])
        tr.critic.params.load_arrays(sec["critic"])
        tr.policy_opt.load_state_arrays(sec["adam.policy"])
        tr.critic_opt.load_state_arrays(sec["adam.critic"])
        tr.step = int(sec["state"]["step"][0])
        tr.ema.value, init = sec["state"]["ema"]
        tr.ema.initialized = bool(init)
        return tr


def actor_critic_train(config: TrainConfig, instance_source: Callable | None = None, metrics_path=None) -> Trainer:
    """Run Algorithm-style actor-critic training for ``config.steps`` steps."""
    return Trainer(config, instance_source, metrics_path).train()


# --- supervised ----------------------------------------------------------------


@dataclass
class SupervisedResult:
    policy: PointerNetwork
    losses: list = field(default_factory=list)


def supervised_loss(policy: PointerNetwork, features, tours, clip: float | None = None) -> G.Tensor:
    """Mean negative log-likelihood of the label tours under teacher forcing."""
    tours = np.asarray(tours)
    n = tours.shape[1]
    if not np.all(np.sort(tours, axis=1) == np.arange(n)):
        raise ValueError("supervised labels must be permutations")
    r = policy.rollout_batch("tsp", features, "forced", 1.0, clip, actions=tours)
    return -G.mean(r.logp)


def supervised_train(config: TrainConfig, features, tours, steps: int | None = None) -> SupervisedResult:
    """Minimise cross-entropy against optimal tours on a fixed labelled set."""
    features = np.asarray(features, dtype=np.float64)
    tours = np.asarray(tours)
    if not np.all(np.sort(tours, axis=1) == np.arange(tours.shape[1])):
        raise ValueError("supervised labels must be permutations")
    c = config
    policy = PointerNetwork(d=c.d, input_dim=2, n_glimpses=c.n_glimpses, seed=[c.seed, 0], init_range=c.init_range)
    opt = G.Adam(policy.params, lr=c.lr, decay_steps=c.decay_steps, decay_factor=c.decay_factor)
    out = SupervisedResult(policy)
    for step in range(c.steps if steps is None else steps):
        rng = np.random.default_rng([c.seed, 11, step])
        pick = rng.choice(len(features), size=min(c.batch_size, len(features)), replace=False)
        policy.params.zero_grad()
        loss = supervised_loss(policy, features[pick], tours[pick], c.clip_logits)
        G.backward(loss)
        G.clip_global_norm(policy.params, c.max_grad_norm)
        opt.step()
        out.losses.append(loss.item())
    return out

