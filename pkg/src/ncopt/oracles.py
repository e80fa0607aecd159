"""Exact and heuristic reference solvers.

Exact: Held-Karp and brute force for TSP, depth-first branch-and-bound and
subset enumeration for knapsack. Heuristic: nearest neighbour, 2-opt, the
value/weight ratio greedy and random feasible search.

Reported objectives are always recomputed from the returned solution with
:func:`ncopt.problems.make_solution`, so two solvers that agree on the
solution agree on the objective bit for bit.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .problems import KnapsackInstance, Solution, TspInstance, make_solution

HELD_KARP_MAX_N = 20
BRUTE_FORCE_MAX_N = 9
ENUMERATION_MAX_N = 20
IMPROVEMENT_TOL = 1e-12


@dataclass
class OracleResult:
    solution: Solution
    proof: str  # "exact" or "heuristic"
    count: int  # search nodes or candidates examined
    wallclock: float

    @property
    def objective(self) -> float:
        return self.solution.objective

    @property
    def exact(self) -> bool:
        return self.proof == "exact"


class OracleLimitError(ValueError):
    """The instance is too large for the requested exact method."""


class BudgetExceeded(RuntimeError):
    def __init__(self, incumbent: float, bound: float, nodes: int):
        self.incumbent = incumbent
        self.bound = bound
        self.nodes = nodes
        super().__init__(f"node budget {nodes} exhausted: incumbent {incumbent:.6f}, bound {bound:.6f}, gap {bound - incumbent:.3g}")


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


# --- TSP exact -----------------------------------------------------------------


@njit(cache=True)
def _held_karp(D):
    n = D.shape[0]
    m = n - 1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[1 << j, j] = D[0, j + 1]
    for mask in range(1, full):
        for j in range(m):
            if not (mask >> j) & 1:
                continue
            cur = dp[mask, j]
            for k in range(m):
                if (mask >> k) & 1:
                    continue
                nxt = mask | (1 << k)
                val = cur + D[j + 1, k + 1]
                if val < dp[nxt, k]:
                    dp[nxt, k] = val
                    parent[nxt, k] = j
    best = np.inf
    last = -1
    for j in range(m):
        val = dp[full - 1, j] + D[j + 1, 0]
        if val < best:
            best = val
            last = j
    tour = np.zeros(n, dtype=np.int64)
    mask = full - 1
    for pos in range(n - 1, 0, -1):
        tour[pos] = last + 1
        prev = parent[mask, last]
        mask ^= 1 << last
        last = prev
    return tour


def held_karp(instance: TspInstance) -> OracleResult:
    """Optimal tour by dynamic programming over (visited subset, last city)."""
    n = instance.n
    if n > HELD_KARP_MAX_N:
        raise OracleLimitError(f"held_karp supports n <= {HELD_KARP_MAX_N}, got {n}; use two_opt for a heuristic reference")
    t0 = time.monotonic()
    if n <= 3:
        tour = np.arange(n)
    else:
        tour = _held_karp(distance_matrix(instance.coords))
    count = (1 << (n - 1)) * (n - 1)
    return OracleResult(make_solution(instance, tour), "exact", count, time.monotonic() - t0)


def brute_force(instance: TspInstance) -> OracleResult:
    """Exhaustive minimum over the (n-1)!/2 distinct closed tours."""
    n = instance.n
    if n > BRUTE_FORCE_MAX_N:
        raise OracleLimitError(f"brute_force supports n <= {BRUTE_FORCE_MAX_N}, got {n}")
    t0 = time.monotonic()
    if n <= 3:
        return OracleResult(make_solution(instance, range(n)), "exact", 1, time.monotonic() - t0)
    perms = np.array([p for p in itertools.permutations(range(1, n)) if p[0] < p[-1]])
    tours = np.concatenate([np.zeros((len(perms), 1), dtype=perms.dtype), perms], axis=1)
    D = distance_matrix(instance.coords)
    lengths = D[tours, np.roll(tours, -1, axis=1)].sum(axis=1)
    best = tours[int(np.argmin(lengths))]
    return OracleResult(make_solution(instance, best), "exact", len(tours), time.monotonic() - t0)


# --- TSP heuristics ------------------------------------------------------------


def nearest_neighbor(instance: TspInstance, start: int = 0) -> OracleResult:
    t0 = time.monotonic()
    D = distance_matrix(instance.coords)
    n = instance.n
    visited = np.zeros(n, dtype=bool)
    tour = [start]
    visited[start] = True
    for _ in range(n - 1):
        d = np.where(visited, np.inf, D[tour[-1]])
        nxt = int(np.argmin(d))
        tour.append(nxt)
        visited[nxt] = True
    return OracleResult(make_solution(instance, tour), "heuristic", n, time.monotonic() - t0)


@njit(cache=True)
def _two_opt(D, tour, tol):
    n = len(tour)
    moves = 0
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            a = tour[i]
            b = tour[i + 1]
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                c = tour[j]
                d = tour[(j + 1) % n]
                delta = D[a, c] + D[b, d] - D[a, b] - D[c, d]
                if delta < -tol:
                    tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1].copy()
                    moves += 1
                    improved = True
                    break
            if improved:
                break
    return tour, moves


def two_opt(instance: TspInstance, initial_tour) -> OracleResult:
    """First-improvement 2-opt, scanning (i, j) lexicographically and restarting after each move."""
    t0 = time.monotonic()
    tour = np.array(initial_tour, dtype=np.int64)
    make_solution(instance, tour)  # validates
    if instance.n >= 4:
        tour, moves = _two_opt(distance_matrix(instance.coords), tour, IMPROVEMENT_TOL)
    else:
        moves = 0
    return OracleResult(make_solution(instance, tour), "heuristic", int(moves), time.monotonic() - t0)


def tsp_reference(instance: TspInstance) -> OracleResult:
    """Held-Karp where it fits, otherwise 2-opt from nearest neighbour."""
    if instance.n <= HELD_KARP_MAX_N:
        return held_karp(instance)
    return two_opt(instance, nearest_neighbor(instance).solution.indices)


# --- knapsack exact -------------------------------------------------------------


def ratio_order(instance: KnapsackInstance) -> np.ndarray:
    """Items by descending value/weight; equal ratios keep ascending index."""
    with np.errstate(divide="ignore"):
        ratio = np.where(instance.weights > 0, instance.values / instance.weights, np.inf)
    return np.argsort(-ratio, kind="stable")


@njit(cache=True)
def _bnb(w, v, cap, node_cap):
    n = len(w)
    cw = np.zeros(n + 1)
    cv = np.zeros(n + 1)
    for i in range(n):
        cw[i + 1] = cw[i] + w[i]
        cv[i + 1] = cv[i] + v[i]
    x = np.zeros(n, dtype=np.int8)
    best_x = np.zeros(n, dtype=np.int8)
    best = -1.0
    state = np.zeros(n + 1, dtype=np.int8)
    room = np.zeros(n + 1)
    val = np.zeros(n + 1)
    room[0] = cap
    nodes = 0
    root_bound = np.inf
    k = 0
    while k >= 0:
        if state[k] == 0:
            nodes += 1
            if nodes > node_cap:
                return best_x, best, root_bound, nodes, False
            if k == n:
                if val[k] > best:
                    best = val[k]
                    best_x[:] = x
                k -= 1
                continue
            # fractional relaxation over items k..n-1
            lo = k
            hi = n
            while lo < hi:
                mid = (lo + hi + 1) // 2
                if cw[mid] - cw[k] <= room[k]:
                    lo = mid
                else:
                    hi = mid - 1
            bound = val[k] + cv[lo] - cv[k]
            if lo < n:
                bound += (room[k] - (cw[lo] - cw[k])) * v[lo] / w[lo]
            if k == 0:
                root_bound = bound
            if bound <= best:
                k -= 1
                continue
            state[k] = 1
            if w[k] <= room[k]:
                x[k] = 1
                room[k + 1] = room[k] - w[k]
                val[k + 1] = val[k] + v[k]
                state[k + 1] = 0
                k += 1
                continue
        if state[k] == 1:
            state[k] = 2
            x[k] = 0
            room[k + 1] = room[k]
            val[k + 1] = val[k]
            state[k + 1] = 0
            k += 1
            continue
        state[k] = 0
        x[k] = 0
        k -= 1
    return best_x, best, root_bound, nodes, True


def knapsack_branch_and_bound(instance: KnapsackInstance, node_cap: int = 50_000_000) -> OracleResult:
    """Exact optimum by depth-first branch-and-bound with the fractional bound."""
    t0 = time.monotonic()
    order = ratio_order(instance)
    w = np.ascontiguousarray(instance.weights[order])
    v = np.ascontiguousarray(instance.values[order])
    x, best, bound, nodes, done = _bnb(w, v, instance.capacity, node_cap)
    if not done:
        raise BudgetExceeded(best, bound, nodes)
    chosen = np.sort(order[x.astype(bool)])
    return OracleResult(make_solution(instance, chosen), "exact", int(nodes), time.monotonic() - t0)


def knapsack_enumerate(instance: KnapsackInstance) -> OracleResult:
    """Exhaustive search over all 2^n subsets (n <= 20)."""
    n = instance.n
    if n > ENUMERATION_MAX_N:
        raise OracleLimitError(f"enumeration supports n <= {ENUMERATION_MAX_N}, got {n}")
    t0 = time.monotonic()
    masks = np.arange(1 << n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)
    weight = bits @ instance.weights
    value = bits @ instance.values
    value[weight > instance.capacity] = -1.0
    top = value.max()
    # near-ties in summation order are settled by the canonical value
    cands = np.nonzero(value >= top - 1e-9)[0]
    best_items, best_val = (), -1.0
    for m in cands:
        items = tuple(np.nonzero(bits[m])[0])
        sol = make_solution(instance, items) if weight[m] <= instance.capacity else None
        if sol is not None and sol.objective > best_val:
            best_items, best_val = items, sol.objective
    return OracleResult(make_solution(instance, best_items), "exact", len(masks), time.monotonic() - t0)


# --- knapsack heuristics --------------------------------------------------------


def greedy_ratio(instance: KnapsackInstance) -> OracleResult:
    """Scan items by descending value/weight, adding each one that still fits."""
    t0 = time.monotonic()
    room = instance.capacity
    chosen = []
    for i in ratio_order(instance):
        if instance.weights[i] <= room:
            chosen.append(int(i))
            room -= instance.weights[i]
    chosen.sort()
    # guard against drift in the running remainder
    while chosen and instance.weights[chosen].sum() > instance.capacity:
        chosen.pop()
    return OracleResult(make_solution(instance, chosen), "heuristic", instance.n, time.monotonic() - t0)


def random_feasible_sets(instance: KnapsackInstance, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` boolean selections, each built by inserting items in a random order while they fit."""
    n = instance.n
    keys = rng.random((count, n))
    order = np.argsort(keys, axis=1)
    used = np.zeros(count)
    sel = np.zeros((count, n), dtype=bool)
    rows = np.arange(count)
    for pos in range(n):
        item = order[:, pos]
        w = instance.weights[item]
        fits = used + w <= instance.capacity
        used = np.where(fits, used + w, used)
        sel[rows[fits], item[fits]] = True
    return sel


def random_search(instance: KnapsackInstance, K: int, seed=0, chunk: int = 65536) -> OracleResult:
    """Best of ``K`` random feasible item sets."""
    if K < 1:
        raise ValueError("random_search needs K >= 1")
    t0 = time.monotonic()
    rng = np.random.default_rng(seed)
    best_val, best_sel = -1.0, None
    done = 0
    while done < K:
        m = min(chunk, K - done)
        sel = random_feasible_sets(instance, m, rng)
        vals = sel.astype(np.float64) @ instance.values
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best_sel = vals[j], sel[j]
        done += m
    return OracleResult(make_solution(instance, np.nonzero(best_sel)[0]), "heuristic", K, time.monotonic() - t0)
