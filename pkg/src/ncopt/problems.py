"""Euclidean TSP and 0-1 knapsack: instances, objectives, generators, masks, files.

Both problems are exposed to the learning code through a common cost
convention: lower is better. A tour costs its length; an item set costs the
negative of its total value.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

KNAPSACK_CAPACITY = {50: 12.5, 100: 25.0, 200: 25.0}


@dataclass(frozen=True, eq=False)
class TspInstance:
    coords: np.ndarray  # (n, 2) in the unit square

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) < 1:
            raise ValueError(f"TSP coordinates must have shape (n, 2), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    kind = "tsp"

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def features(self) -> np.ndarray:
        return self.coords

    def permuted(self, perm) -> TspInstance:
        return TspInstance(self.coords[np.asarray(perm)])

    def __eq__(self, other):
        return isinstance(other, TspInstance) and np.array_equal(self.coords, other.coords)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class KnapsackInstance:
    weights: np.ndarray
    values: np.ndarray
    capacity: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if w.ndim != 1 or w.shape != v.shape or len(w) < 1:
            raise ValueError(f"weights/values must be equal-length vectors, got {w.shape} and {v.shape}")
        if not self.capacity > 0:
            raise ValueError("capacity must be positive")
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "capacity", float(self.capacity))

    kind = "knapsack"

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def features(self) -> np.ndarray:
        return np.stack([self.weights, self.values], axis=1)

    def permuted(self, perm) -> KnapsackInstance:
        p = np.asarray(perm)
        return KnapsackInstance(self.weights[p], self.values[p], self.capacity)

    def __eq__(self, other):
        return (
            isinstance(other, KnapsackInstance)
            and self.capacity == other.capacity
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


Instance = Union[TspInstance, KnapsackInstance]


@dataclass(frozen=True)
class Solution:
    """A tour (``kind == "tour"``) or a selected item set (``kind == "items"``).

    ``objective`` is the natural objective: tour length, or total value.
    """

    kind: str
    indices: tuple[int, ...]
    objective: float
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def cost(self) -> float:
        return self.objective if self.kind == "tour" else -self.objective


# --- objectives --------------------------------------------------------------


def check_tour(n: int, tour) -> np.ndarray:
    t = np.asarray(tour)
    if t.shape != (n,) or not np.array_equal(np.sort(t), np.arange(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {list(np.asarray(tour).ravel())}")
    return t.astype(np.int64)


def tour_length(instance: TspInstance, tour) -> float:
    """Closed-tour Euclidean length, including the edge back to the start."""
    t = check_tour(instance.n, tour)
    p = instance.coords[t]
    d = p - np.roll(p, -1, axis=0)
    return float(np.sqrt((d * d).sum(axis=1)).sum())


def tour_lengths(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Batched closed-tour lengths; ``coords`` (B, n, 2) or (n, 2), ``tours`` (B, n)."""
    tours = np.asarray(tours)
    if coords.ndim == 2:
        p = coords[tours]
    else:
        p = np.take_along_axis(coords, tours[..., None], axis=1)
    d = p - np.roll(p, -1, axis=1)
    return np.sqrt((d * d).sum(axis=-1)).sum(axis=-1)


def canonical_tour(tour) -> tuple[int, ...]:
    """Rotate to start at city 0 and orient so the second city is the smaller neighbour."""
    t = list(int(i) for i in tour)
    k = t.index(0)
    t = t[k:] + t[:k]
    if len(t) > 2 and t[1] > t[-1]:
        t = [t[0]] + t[1:][::-1]
    return tuple(t)


def check_items(instance: KnapsackInstance, items) -> np.ndarray:
    s = np.asarray(list(items), dtype=np.int64)
    if s.size and (s.min() < 0 or s.max() >= instance.n):
        raise ValueError(f"item index out of range for n={instance.n}")
    if len(np.unique(s)) != len(s):
        raise ValueError("item set contains duplicates")
    if instance.weights[np.sort(s)].sum() > instance.capacity:
        raise ValueError(
            f"infeasible item set: weight {instance.weights[s].sum():.6g} > capacity {instance.capacity}"
        )
    return s


def knapsack_value(instance: KnapsackInstance, items) -> float:
    """Total value of a feasible item set, summed in ascending index order."""
    s = check_items(instance, items)
    return float(instance.values[np.sort(s)].sum())


def make_solution(instance: Instance, indices) -> Solution:
    if instance.kind == "tsp":
        tour = canonical_tour(check_tour(instance.n, indices))
        return Solution("tour", tour, tour_length(instance, tour))
    items = tuple(int(i) for i in indices)
    return Solution("items", items, knapsack_value(instance, items))


def cost(instance: Instance, indices) -> float:
    return make_solution(instance, indices).cost


# --- generators --------------------------------------------------------------


def generate_tsp(n: int, count: int, seed) -> list[TspInstance]:
    if n < 2:
        raise ValueError("TSP instances need n >= 2")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, size=(count, n, 2))
    return [TspInstance(p) for p in pts]


def default_capacity(n: int) -> float:
    return KNAPSACK_CAPACITY.get(n, n / 4.0)


def generate_knapsack(n: int, count: int, seed, capacity: float | None = None) -> list[KnapsackInstance]:
    if n < 1:
        raise ValueError("knapsack instances need n >= 1")
    cap = default_capacity(n) if capacity is None else float(capacity)
    if cap <= 0:
        raise ValueError("capacity must be positive")
    rng = np.random.default_rng(seed)
    wv = rng.uniform(0.0, 1.0, size=(count, n, 2))
    return [KnapsackInstance(x[:, 0], x[:, 1], cap) for x in wv]


# --- decoding masks ----------------------------------------------------------


def knapsack_decode_mask(instance: KnapsackInstance, selected) -> tuple[np.ndarray, bool]:
    """Positions that may not be chosen next, and whether decoding is over.

    Already-selected items and items that would overflow the remaining
    capacity are masked.
    """
    sel = check_items(instance, selected)
    mask = np.zeros(instance.n, dtype=bool)
    mask[sel] = True
    used = instance.weights[np.sort(sel)].sum() if len(sel) else 0.0
    mask |= used + instance.weights > instance.capacity
    return mask, bool(mask.all())


class TspEnv:
    """Batched decoding state for TSP: visited cities are masked."""

    def __init__(self, features: np.ndarray):
        self.features = features
        self.batch, self.n = features.shape[:2]
        self.mask = np.zeros((self.batch, self.n), dtype=bool)
        self.max_steps = self.n

    def done(self) -> np.ndarray:
        return self.mask.all(axis=1)

    def step(self, idx: np.ndarray, active: np.ndarray) -> None:
        rows = np.nonzero(active)[0]
        self.mask[rows, idx[rows]] = True

    def cost(self, actions: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return tour_lengths(self.features, actions)


class KnapsackEnv:
    """Batched decoding state for knapsack: chosen and overflowing items are masked."""

    def __init__(self, features: np.ndarray, capacity):
        self.features = features
        self.batch, self.n = features.shape[:2]
        self.weights = features[..., 0]
        self.values = features[..., 1]
        self.capacity = np.broadcast_to(np.asarray(capacity, dtype=np.float64), (self.batch,))
        self.chosen = np.zeros((self.batch, self.n), dtype=bool)
        self.used = np.zeros(self.batch)
        self.max_steps = self.n
        self._refresh()

    def _refresh(self) -> None:
        self.mask = self.chosen | (self.used[:, None] + self.weights > self.capacity[:, None])

    def done(self) -> np.ndarray:
        return self.mask.all(axis=1)

    def step(self, idx: np.ndarray, active: np.ndarray) -> None:
        rows = np.nonzero(active)[0]
        self.chosen[rows, idx[rows]] = True
        self.used[rows] += self.weights[rows, idx[rows]]
        self._refresh()

    def cost(self, actions: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        out = np.empty(self.batch)
        for b in range(self.batch):
            out[b] = -self.values[b][np.sort(actions[b, : lengths[b]])].sum()
        return out


def make_env(kind: str, features: np.ndarray, capacity=None):
    if kind == "tsp":
        return TspEnv(features)
    if kind == "knapsack":
        return KnapsackEnv(features, capacity)
    raise ValueError(f"unknown problem kind {kind!r}")


# --- instance files ----------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_instances(path, instances: Sequence[Instance], seed=None) -> str:
    """Write one instance per line after a JSON header line; return the content hash."""
    if not instances:
        raise ValueError("no instances to write")
    first = instances[0]
    header = {"problem": first.kind, "n": first.n, "count": len(instances), "seed": seed}
    if first.kind == "knapsack":
        header["capacity"] = first.capacity
    lines = ["# " + json.dumps(header, sort_keys=True)]
    for inst in instances:
        if inst.kind != first.kind or inst.n != first.n:
            raise ValueError("all instances in a file must share problem kind and size")
        if inst.kind == "knapsack" and inst.capacity != first.capacity:
            raise ValueError("all knapsack instances in a file must share capacity")
        lines.append(" ".join(_fmt(x) for x in inst.features.ravel()))
    text = "\n".join(lines) + "\n"
    from .io import atomic_write_text

    atomic_write_text(path, text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_instances(path) -> tuple[dict, list[Instance]]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing header line")
    header = json.loads(lines[0][2:])
    n = int(header["n"])
    out: list[Instance] = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        vals = np.array([float(x) for x in ln.split()]).reshape(n, 2)
        if header["problem"] == "tsp":
            out.append(TspInstance(vals))
        else:
            out.append(KnapsackInstance(vals[:, 0], vals[:, 1], float(header["capacity"])))
    if len(out) != int(header["count"]):
        raise ValueError(f"{path}: header count {header['count']} but {len(out)} records")
    header["sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return header, out


def diameter(coords: np.ndarray) -> float:
    d = coords[:, None, :] - coords[None, :, :]
    return float(math.sqrt((d * d).sum(axis=-1).max()))
