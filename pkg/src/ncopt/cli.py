"""Command-line entry point: ``ncopt {generate,train,search,eval,oracle,render,bench}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``NCOPT_THREADS`` caps the BLAS / numba thread pools.
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("NCOPT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ncopt")


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} not found")
    return json.loads(p.read_text())


def _pick(args, file_cfg: dict, keys) -> dict:
    """Config file values, overridden by any flag given on the command line."""
    out = {k: file_cfg[k] for k in keys if k in file_cfg}
    out.update({k: getattr(args, k) for k in keys if getattr(args, k, None) is not None})
    return out


def _policies(paths):
    from .checkpoint import load_policy

    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"checkpoint {p} not found")
    return [load_policy(p) for p in paths]


# --- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    from .bench import generate_dataset

    m = generate_dataset(args.out, args.problem, args.n, args.count, args.seed, args.capacity, args.overwrite)
    print(json.dumps(m, sort_keys=True))
    return EXIT_OK


TRAIN_KEYS = (
    "problem", "n", "capacity", "batch_size", "steps", "lr", "critic_lr", "decay_steps", "decay_factor",
    "d", "n_glimpses", "process_steps", "clip_logits", "max_grad_norm", "baseline", "ema_decay", "init_range", "seed",
)


def cmd_train(args) -> int:
    from .io import config_hash, write_json
    from .trainer import TrainConfig, Trainer

    out = Path(args.out)
    metrics = out / "metrics.csv"
    if args.resume:
        tr = Trainer.resume(args.resume, metrics_path=metrics)
        if args.steps is not None:
            tr.config.steps = args.steps
    else:
        cfg = _pick(args, _load_config(args.config), TRAIN_KEYS)
        if "seed" not in cfg:
            raise UsageError("training needs --seed (or 'seed' in the config file)")
        if metrics.exists():
            raise UsageError(f"{metrics} exists; use --resume or a fresh --out directory")
        tr = Trainer(TrainConfig(**cfg), metrics_path=metrics)
    write_json(out / "train.json", {"config": tr.config.to_dict()}, config=tr.config.to_dict())
    tr.train(checkpoint_every=args.checkpoint_every, checkpoint_dir=out, log_every=args.log_every)
    tr.save(out / "final.ckpt")
    print(json.dumps({"steps": tr.step, "checkpoint": str(out / "final.ckpt"), "config_hash": config_hash(tr.config.to_dict())}))
    return EXIT_OK


SEARCH_KEYS = ("strategy", "budget", "batch_size", "temperature", "clip_logits", "lr", "ema_decay", "seed")


def _search_config(args):
    from .bench import search_config_for

    overrides = _pick(args, {}, SEARCH_KEYS)
    if args.no_shuffle:
        overrides["shuffle"] = False
    file_cfg = {k: v for k, v in _load_config(args.config).items() if k in SEARCH_KEYS + ("shuffle",)}
    return search_config_for(args.preset, overrides, file_cfg)


def _fresh_factory(args, config):
    from .bench import PRESETS
    from .policy import PointerNetwork

    if args.checkpoint:
        return None
    if args.preset and PRESETS[args.preset].pretrained:
        raise UsageError(f"preset {args.preset} needs --checkpoint")
    if config.strategy != "active_search":
        raise UsageError("--checkpoint is required unless searching from scratch")
    return lambda i: PointerNetwork(d=args.d, seed=[config.seed, i])


def cmd_search(args) -> int:
    from .bench import load_dataset
    from .grad import no_grad
    from .search import run_search

    config = _search_config(args)
    _, insts = load_dataset(args.dataset)
    if not 0 <= args.index < len(insts):
        raise UsageError(f"--index {args.index} out of range for {len(insts)} instances")
    fresh = _fresh_factory(args, config)
    models = [fresh(args.index)] if fresh else _policies(args.checkpoint)
    inst = insts[args.index]
    if config.strategy == "active_search":
        sol, trace = run_search(inst, config, models)
    else:
        with no_grad():
            sol, trace = run_search(inst, config, models)
    doc = {"instance_id": args.index, "strategy": config.strategy, "objective": sol.objective, "solution": list(sol.indices)}
    if trace is not None:
        doc["milestones"] = [[int(c), float(b)] for c, b, _ in trace.milestones]
    print(json.dumps(doc))
    if args.out:
        from .io import write_json

        write_json(args.out, doc, config=config.__dict__)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import evaluate

    config = _search_config(args)
    fresh = _fresh_factory(args, config)
    policies = _policies(args.checkpoint) if args.checkpoint else []
    report = evaluate(args.dataset, policies, config, args.out, reference=args.reference, use_oracle=not args.no_oracle, fresh_policy=fresh, limit=args.limit)
    print(json.dumps({k: report.aggregate[k] for k in ("count", "strategy", "mean_objective", "mean_optimal", "mean_ratio")}))
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .bench import oracle_dataset

    table = oracle_dataset(args.dataset)
    errors = sum(1 for r in table.rows if r["error"])
    print(json.dumps({"count": len(table.rows), "cached": table.cached, "mean_objective": float(table.objectives.mean()), "error_rows": errors}))
    return EXIT_OK


def cmd_render(args) -> int:
    from .bench import load_dataset, render_svg
    from .search import greedy_search

    _, insts = load_dataset(args.dataset)
    if not 0 <= args.index < len(insts):
        raise UsageError(f"--index {args.index} out of range for {len(insts)} instances")
    inst = insts[args.index]
    if inst.kind != "tsp":
        raise UsageError("render supports TSP datasets only")
    if args.tour:
        tour = [int(x) for x in args.tour.replace(",", " ").split()]
    elif args.checkpoint:
        tour = greedy_search(inst, _policies(args.checkpoint)[0]).indices
    else:
        raise UsageError("render needs --tour or --checkpoint")
    render_svg(inst, tour, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import baseline_table
    from .io import write_csv

    rows = baseline_table(args.dataset, args.random_k, args.seed)
    if args.out:
        write_csv(args.out, ("method", "mean_objective"), rows)
    for name, val in rows:
        print(f"{name:>18s}  {val:.4f}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def _search_flags(p):
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", action="append", default=[], help="repeat for greedy_at_k ensembles")
    p.add_argument("--preset", choices=["rl-greedy", "active-search", "rl-sampling", "rl-active-search"])
    p.add_argument("--config")
    p.add_argument("--strategy", choices=["greedy", "greedy_at_k", "sampling", "active_search"])
    p.add_argument("--budget", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--clip-logits", dest="clip_logits", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int, default=128, help="hidden size for untrained models")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ncopt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded instance file and manifest")
    p.add_argument("--problem", choices=["tsp", "knapsack"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--capacity", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="actor-critic training")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=1000)
    p.add_argument("--log-every", dest="log_every", type=int, default=100)
    p.add_argument("--problem", choices=["tsp", "knapsack"])
    for flag, typ in (("n", int), ("capacity", float), ("batch-size", int), ("steps", int), ("lr", float),
                      ("critic-lr", float), ("decay-steps", int), ("decay-factor", float), ("d", int),
                      ("n-glimpses", int), ("process-steps", int), ("clip-logits", float),
                      ("max-grad-norm", float), ("ema-decay", float), ("init-range", float), ("seed", int)):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ)
    p.add_argument("--baseline", choices=["critic", "ema"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="search one instance of a dataset")
    _search_flags(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="evaluate a strategy over a dataset")
    _search_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="CSV with instance_id,objective when no exact oracle applies")
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="exact or reference objectives, cached by dataset hash")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("render", help="draw a TSP tour as SVG")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--tour")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="classical baselines on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--random-k", dest="random_k", type=int, default=12_800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    from .bench import DataError
    from .checkpoint import CheckpointError
    from .trainer import NumericError

    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
