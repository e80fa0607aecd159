"""Dataset, oracle, evaluation and rendering workflows behind the command line.

Everything here writes files atomically and stamps JSON outputs with a
schema version, the code version and a hash of the producing configuration.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grad as G
from .io import atomic_write_text, read_csv, write_csv, write_json
from .oracles import (
    HELD_KARP_MAX_N,
    BudgetExceeded,
    greedy_ratio,
    held_karp,
    knapsack_branch_and_bound,
    nearest_neighbor,
    random_search,
    two_opt,
)
from .policy import PointerNetwork
from .problems import (
    Instance,
    TspInstance,
    generate_knapsack,
    generate_tsp,
    make_solution,
    read_instances,
    tour_length,
    write_instances,
)
from .search import SearchConfig, run_search

EVAL_HEADER = ("instance_id", "strategy", "budget", "best_objective", "optimal_objective", "ratio", "wallclock_ms")
ORACLE_HEADER = ("instance_id", "method", "objective", "exact", "solution", "error")


class DataError(ValueError):
    """Input files are missing, inconsistent, or do not match their caches."""


# --- presets -------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    """A learning configuration: whether it learns on training data, samples
    on the test instance, and refines on the test instance."""

    name: str
    pretrained: bool
    samples: bool
    refines: bool
    strategy: str
    budget: int = 1
    lr: float = 1e-5

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.pretrained, self.samples, self.refines)


PRESETS = {
    p.name: p
    for p in (
        Preset("rl-greedy", True, False, False, "greedy"),
        Preset("active-search", False, True, True, "active_search", budget=128_000, lr=1e-3),
        Preset("rl-sampling", True, True, False, "sampling", budget=12_800),
        Preset("rl-active-search", True, True, True, "active_search", budget=128_000, lr=1e-5),
    )
}


def search_config_for(preset: str | None, overrides: dict | None = None, file_config: dict | None = None) -> SearchConfig:
    """Merge preset < config file < explicit overrides into a SearchConfig."""
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[preset]
        merged.update(strategy=p.strategy, budget=p.budget, lr=p.lr)
    merged.update(file_config or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return SearchConfig(**merged)


# --- datasets ------------------------------------------------------------------


def manifest_path(dataset) -> Path:
    return Path(str(dataset) + ".manifest.json")


def generate_dataset(path, problem: str, n: int, count: int, seed: int, capacity: float | None = None, overwrite: bool = False) -> dict:
    """Write ``count`` instances plus a manifest; return the manifest."""
    path = Path(path)
    if count < 1:
        raise ValueError("count must be >= 1")
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite to replace it")
    if problem == "tsp":
        insts = generate_tsp(n, count, seed)
    elif problem == "knapsack":
        insts = generate_knapsack(n, count, seed, capacity)
    else:
        raise ValueError(f"unknown problem {problem!r}")
    digest = write_instances(path, insts, seed=seed)
    manifest = {"problem": problem, "n": n, "count": count, "seed": seed, "sha256": digest, "file": path.name}
    if problem == "knapsack":
        manifest["capacity"] = insts[0].capacity
    write_json(manifest_path(path), manifest, config=manifest)
    return manifest


def load_dataset(path) -> tuple[dict, list[Instance]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset {path} not found")
    header, insts = read_instances(path)
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest["sha256"] != header["sha256"]:
            raise DataError(f"{path} does not match its manifest hash")
    return header, insts


# --- oracle cache ----------------------------------------------------------------


def oracle_cache_path(dataset, sha256: str) -> Path:
    return Path(str(dataset) + f".oracle-{sha256[:16]}.csv")


def _oracle_row(i: int, inst: Instance) -> tuple:
    if inst.kind == "tsp":
        if inst.n <= HELD_KARP_MAX_N:
            res = held_karp(inst)
            return (i, "held_karp", res.objective, 1, _join(res.solution.indices), "")
        res = two_opt(inst, nearest_neighbor(inst).solution.indices)
        return (i, "two_opt", res.objective, 0, _join(res.solution.indices), f"held_karp: n={inst.n} exceeds {HELD_KARP_MAX_N}")
    try:
        res = knapsack_branch_and_bound(inst)
        return (i, "branch_and_bound", res.objective, 1, _join(res.solution.indices), "")
    except BudgetExceeded as err:
        g = greedy_ratio(inst)
        return (i, "greedy_ratio", g.objective, 0, _join(g.solution.indices), f"branch_and_bound: {err}")


def _join(indices) -> str:
    return " ".join(str(int(k)) for k in indices)


@dataclass
class OracleTable:
    dataset_sha256: str
    rows: list[dict]
    cached: bool

    @property
    def objectives(self) -> np.ndarray:
        return np.array([float(r["objective"]) for r in self.rows])

    @property
    def exact(self) -> np.ndarray:
        return np.array([r["exact"] in ("1", 1) for r in self.rows])


def oracle_dataset(dataset) -> OracleTable:
    """Exact (or capped heuristic) objectives for every instance, cached by dataset hash."""
    header, insts = load_dataset(dataset)
    cache = oracle_cache_path(dataset, header["sha256"])
    meta = Path(str(cache) + ".json")
    if cache.exists() and meta.exists():
        stored = json.loads(meta.read_text())
        if stored.get("dataset_sha256") != header["sha256"]:
            raise DataError(f"oracle cache {cache} was built for a different dataset")
        return OracleTable(header["sha256"], read_csv(cache), cached=True)
    t0 = time.monotonic()
    rows = [_oracle_row(i, inst) for i, inst in enumerate(insts)]
    write_csv(cache, ORACLE_HEADER, rows)
    write_json(meta, {"dataset_sha256": header["sha256"], "count": len(rows), "seconds": time.monotonic() - t0}, config={"dataset": header["sha256"]})
    return OracleTable(header["sha256"], read_csv(cache), cached=False)


# --- evaluation ------------------------------------------------------------------


def ratio_to_optimal(kind: str, objective: float, optimal: float) -> float:
    """>= 1 for any feasible solution when ``optimal`` is exact (TSP: L/L*; knapsack: V*/V)."""
    if kind == "tsp":
        return objective / optimal
    return optimal / objective if objective > 0 else math.inf


def read_reference(path) -> np.ndarray:
    rows = read_csv(path)
    if not rows or "objective" not in rows[0]:
        raise DataError(f"reference file {path} needs an 'objective' column")
    return np.array([float(r["objective"]) for r in sorted(rows, key=lambda r: int(r["instance_id"]))])


@dataclass
class EvalReport:
    rows: list[tuple]
    aggregate: dict
    sorted_ratios: np.ndarray


def evaluate(
    dataset,
    policies: Sequence[PointerNetwork],
    config: SearchConfig,
    out_dir=None,
    reference=None,
    use_oracle: bool = True,
    fresh_policy=None,
    limit: int | None = None,
) -> EvalReport:
    """Run one search strategy over a dataset and compare with the optimum.

    ``fresh_policy(i)`` builds an untrained model per instance, for searches
    that start from scratch. Wallclock covers the strategy call only.
    """
    header, insts = load_dataset(dataset)
    if limit is not None:
        insts = insts[:limit]
    kind = header["problem"]
    if reference is not None:
        optimal = read_reference(reference)[: len(insts)]
    elif use_oracle:
        optimal = oracle_dataset(dataset).objectives[: len(insts)]
    else:
        raise DataError("no exact oracle and no reference file: cannot compute ratios")
    if len(optimal) != len(insts):
        raise DataError(f"reference has {len(optimal)} rows for {len(insts)} instances")
    if not policies and fresh_policy is None:
        raise ValueError("evaluate needs at least one model")

    rows, milestones = [], {}
    for i, inst in enumerate(insts):
        models = [fresh_policy(i)] if fresh_policy is not None else list(policies)
        t0 = time.monotonic()
        if config.strategy == "active_search":
            sol, trace = run_search(inst, config, models)
        else:
            with G.no_grad():
                sol, trace = run_search(inst, config, models)
        ms = (time.monotonic() - t0) * 1e3
        budget = config.budget if config.strategy in ("sampling", "active_search") else len(models)
        rows.append((i, config.strategy, budget, sol.objective, float(optimal[i]), ratio_to_optimal(kind, sol.objective, optimal[i]), ms))
        if trace is not None:
            for consumed, best_cost, _ in trace.milestones:
                milestones.setdefault(int(consumed), []).append(-best_cost if kind == "knapsack" else best_cost)

    ratios = np.array([r[5] for r in rows])
    aggregate = {
        "problem": kind,
        "n": header["n"],
        "count": len(rows),
        "strategy": config.strategy,
        "dataset_sha256": header["sha256"],
        "mean_objective": float(np.mean([r[3] for r in rows])),
        "mean_optimal": float(np.mean(optimal)),
        "mean_ratio": float(np.mean(ratios)),
        "mean_wallclock_ms": float(np.mean([r[6] for r in rows])),
        "milestones": {str(k): float(np.mean(v)) for k, v in sorted(milestones.items()) if len(v) == len(rows)},
    }
    report = EvalReport(rows, aggregate, np.sort(ratios))
    if out_dir is not None:
        write_report(report, out_dir, config)
    return report


def write_report(report: EvalReport, out_dir, config: SearchConfig) -> None:
    out = Path(out_dir)
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in config.__dict__.items()}
    write_csv(out / "instances.csv", EVAL_HEADER, report.rows)
    write_json(out / "summary.json", report.aggregate, config=cfg)
    write_csv(out / "sorted_ratios.csv", ("rank", "ratio"), [(k, float(r)) for k, r in enumerate(report.sorted_ratios)])


def baseline_table(dataset, random_k: int = 12_800, seed: int = 0) -> list[tuple]:
    """Mean objective of each classical method on a dataset."""
    header, insts = load_dataset(dataset)
    opt = oracle_dataset(dataset)
    rows = [("optimal" if opt.exact.all() else "reference", float(opt.objectives.mean()))]
    if header["problem"] == "tsp":
        nn = [nearest_neighbor(i) for i in insts]
        rows.append(("nearest_neighbor", float(np.mean([r.objective for r in nn]))))
        rows.append(("two_opt", float(np.mean([two_opt(i, r.solution.indices).objective for i, r in zip(insts, nn)]))))
    else:
        rows.append(("greedy_ratio", float(np.mean([greedy_ratio(i).objective for i in insts]))))
        rows.append(("random_search", float(np.mean([random_search(i, random_k, [seed, k]).objective for k, i in enumerate(insts)]))))
    return rows


# --- rendering ------------------------------------------------------------------


def render_svg(instance: Instance, tour, path=None, size: int = 400, caption: str | None = None) -> str:
    """Unit-square drawing of a tour: cities as circles, the tour as a closed polyline."""
    if not isinstance(instance, TspInstance):
        raise ValueError("render supports TSP tours only")
    sol = make_solution(instance, tour)
    pad = 20
    scale = size - 2 * pad

    def xy(p):
        return f"{pad + p[0] * scale:.3f},{pad + (1.0 - p[1]) * scale:.3f}"

    pts = instance.coords[list(sol.indices)]
    text = caption if caption is not None else f"length {tour_length(instance, sol.indices):.4f}"
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 30}" viewBox="0 0 {size} {size + 30}">',
        f'<rect x="{pad}" y="{pad}" width="{scale}" height="{scale}" fill="none" stroke="#bbb"/>',
        f'<polygon points="{" ".join(xy(p) for p in pts)}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>',
    ]
    for p in instance.coords:
        cx, cy = xy(p).split(",")
        lines.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="#222"/>')
    lines.append(f'<text x="{size / 2:.1f}" y="{size + 18}" text-anchor="middle" font-family="sans-serif" font-size="13">{text}</text>')
    lines.append("</svg>")
    svg = "\n".join(lines) + "\n"
    if path is not None:
        atomic_write_text(path, svg)
    return svg
