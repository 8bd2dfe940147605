"""Command-line interface: ``insert-nco <command> ...``.

Exit status is 0 on success, 1 on data errors and 2 on bad flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .construct import NEAREST, POLAR, SELECTORS, construct_many, append_construct
from .core import CVRP, TSP, CyclicSolution, InsertNcoError, solution_length
from .data import (
    LabeledExample,
    gen_uniform_cvrp,
    gen_uniform_tsp,
    label_instance,
    read_dataset,
    read_solutions,
    tsplib_length,
    write_dataset,
    write_instances,
    write_solutions,
)
from .model import DEFAULT_K, NeuralPolicy, load_params, preset_config, save_params
from .reconstruct import DEFAULT_ALPHA, improve_many

log = logging.getLogger("insert_nco")


class UsageError(Exception):
    """Flag combination that argparse cannot reject on its own."""


def _jobs(args) -> int:
    env = os.environ.get("INSERT_NCO_THREADS")
    if env:
        return max(int(env), 1)
    return max(getattr(args, "jobs", 1) or 1, 1)


def _default_selector(kind: str, selector: str | None) -> str:
    if selector is not None:
        return selector
    return POLAR if kind == CVRP else NEAREST


def _policy(args, kind: str):
    if args.policy != "neural":
        return args.policy
    if not args.weights:
        raise UsageError("--policy neural needs --weights")
    import torch

    torch.set_num_threads(_jobs(args))
    k = args.k if args.k is not None else DEFAULT_K[kind]
    return NeuralPolicy(load_params(args.weights), mode=args.decode, k_filter=None if k <= 0 else k)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


def _single_kind(examples) -> str:
    kinds = {ex.instance.kind for ex in examples}
    if len(kinds) != 1:
        raise InsertNcoError(f"expected one problem kind per file, got {sorted(kinds)}")
    return kinds.pop()


def _write_timing(out: Path, seconds: list[float]) -> None:
    Path(f"{out}.timing.json").write_text(json.dumps({"total_seconds": sum(seconds), "per_instance": seconds}) + "\n")


def _records(examples, sols) -> list[dict]:
    return [
        {"name": ex.instance.name, "order": list(s.order), "length": solution_length(ex.instance, s)}
        for ex, s in zip(examples, sols)
    ]


# -- commands -------------------------------------------------------------


def cmd_gen(args) -> int:
    rng = np.random.Generator(np.random.PCG64(args.seed))
    if args.kind == TSP:
        insts = gen_uniform_tsp(args.n, args.count, rng)
    else:
        insts = gen_uniform_cvrp(args.n, args.capacity, rng, args.count)
    write_instances(args.output, insts)
    return 0


def _label_one(inst, budget, seed):
    return label_instance(inst, budget, np.random.Generator(np.random.PCG64(seed)))


def cmd_label(args) -> int:
    examples = read_dataset(args.input)
    seeds = np.random.SeedSequence(args.seed).generate_state(len(examples)).tolist()
    labels = _map(_label_one, [(ex.instance, args.budget, s) for ex, s in zip(examples, seeds)], _jobs(args))
    write_dataset(args.output, [LabeledExample(ex.instance, lab) for ex, lab in zip(examples, labels)])
    return 0


def cmd_train(args) -> int:
    import torch

    from .train import TrainHyper, train

    torch.set_num_threads(_jobs(args))
    data = [ex for ex in read_dataset(args.input) if ex.label is not None]
    if not data:
        raise InsertNcoError("training file has no labelled examples")
    kind = _single_kind(data)
    overrides = {k: getattr(args, k) for k in ("d", "layers", "heads", "d_ff") if getattr(args, k) is not None}
    cfg = preset_config(args.preset, kind, include_unvisited=not args.no_unvisited, **overrides)
    hyper = TrainHyper(
        lr0=args.lr,
        decay=args.decay,
        epochs=args.epochs,
        batch=args.batch,
        steps_per_episode=args.steps_per_episode,
        selector=_default_selector(kind, args.selector),
        seed=args.seed,
    )
    state = train(data, cfg, hyper, log_csv=args.log)
    save_params(state.model, args.output)
    if args.figure and args.log:
        from .plotting import save_training_figure

        save_training_figure(args.figure, args.log)
    return 0


def _construct_chunk(instances, policy, selector, seeds, start):
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    out = []
    for inst, r in zip(instances, rngs):
        t0 = time.perf_counter()
        out.append((construct_many([inst], policy, selector, [r], start)[0], time.perf_counter() - t0))
    return out


def cmd_solve(args) -> int:
    examples = read_dataset(args.input)
    if not examples:
        raise InsertNcoError("no instances")
    kind = _single_kind(examples)
    selector = _default_selector(kind, args.selector)
    if selector == POLAR and kind == TSP:
        raise UsageError("--selector polar applies to CVRP only")
    insts = [ex.instance for ex in examples]
    start = "random" if args.start == "random" else int(args.start)
    seeds = np.random.SeedSequence(args.seed).generate_state(len(insts)).tolist()
    if args.policy == "append":
        t0 = time.perf_counter()
        sols = [append_construct(inst, selector, np.random.Generator(np.random.PCG64(s))) for inst, s in zip(insts, seeds)]
        times = [(time.perf_counter() - t0) / len(insts)] * len(insts)
    elif args.policy == "neural":
        policy = _policy(args, kind)
        t0 = time.perf_counter()
        rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
        sols = construct_many(insts, policy, selector, rngs, start)
        times = [(time.perf_counter() - t0) / len(insts)] * len(insts)
    else:
        jobs = _jobs(args)
        chunks = [(insts[i::jobs], args.policy, selector, seeds[i::jobs], start) for i in range(min(jobs, len(insts)))]
        parts = _map(_construct_chunk, chunks, jobs)
        sols, times = [None] * len(insts), [0.0] * len(insts)
        for c, part in enumerate(parts):
            for j, (sol, sec) in enumerate(part):
                sols[c + j * len(chunks)] = sol
                times[c + j * len(chunks)] = sec
    write_solutions(args.output, _records(examples, sols))
    _write_timing(Path(args.output), times)
    return 0


def _improve_chunk(instances, inits, policy, iterations, alpha, seeds, destroy, selector):
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    return improve_many(instances, inits, policy, iterations, alpha, rngs, destroy, selector)


def _load_inits(examples, path) -> list[CyclicSolution]:
    if path is None:
        if any(ex.label is None for ex in examples):
            raise UsageError("--init is required unless every instance carries a label")
        return [ex.label for ex in examples]
    recs = read_solutions(path)
    if len(recs) != len(examples):
        raise InsertNcoError(f"{path} has {len(recs)} solutions for {len(examples)} instances")
    sols = [CyclicSolution(tuple(r["order"])) for r in recs]
    for ex, s in zip(examples, sols):
        solution_length(ex.instance, s)  # validates
    return sols


def cmd_improve(args) -> int:
    examples = read_dataset(args.input)
    kind = _single_kind(examples)
    selector = _default_selector(kind, args.selector)
    insts = [ex.instance for ex in examples]
    inits = _load_inits(examples, args.init)
    seeds = np.random.SeedSequence(args.seed).generate_state(len(insts)).tolist()
    t0 = time.perf_counter()
    if args.policy == "neural":
        policy = _policy(args, kind)
        sols = _improve_chunk(insts, inits, policy, args.iterations, args.alpha, seeds, args.destroy, selector)
    else:
        jobs = _jobs(args)
        n = min(jobs, len(insts))
        chunks = [(insts[i::n], inits[i::n], args.policy, args.iterations, args.alpha, seeds[i::n], args.destroy, selector) for i in range(n)]
        parts = _map(_improve_chunk, chunks, jobs)
        sols = [None] * len(insts)
        for c, part in enumerate(parts):
            for j, sol in enumerate(part):
                sols[c + j * n] = sol
    elapsed = time.perf_counter() - t0
    write_solutions(args.output, _records(examples, sols))
    _write_timing(Path(args.output), [elapsed / len(insts)] * len(insts))
    return 0


def bench_rows(examples, reference, methods: dict[str, list[CyclicSolution]], timings: dict[str, float | None], rounding: bool = False) -> list[dict]:
    """Mean length, mean gap (%) against ``reference`` and total time per method."""
    length = tsplib_length if rounding else solution_length
    ref = np.array([length(ex.instance, s) for ex, s in zip(examples, reference)])
    rows = []
    for name, sols in methods.items():
        if len(sols) != len(examples):
            raise InsertNcoError(f"method {name}: {len(sols)} solutions for {len(examples)} instances")
        lens = np.array([length(ex.instance, s) for ex, s in zip(examples, sols)])
        gap = (lens - ref) / ref * 100.0
        t = timings.get(name)
        rows.append(
            {
                "method": name,
                "length": f"{lens.mean():.6f}",
                "gap_pct": f"{gap.mean():.4f}",
                "time_s": "-" if t is None else f"{t:.3f}",
            }
        )
    return rows


def cmd_bench(args) -> int:
    examples = read_dataset(args.input)
    if args.reference:
        reference = _load_inits(examples, args.reference)
    else:
        reference = _load_inits(examples, None)
    methods, timings = {}, {}
    for spec in args.solutions:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).stem, spec
        methods[name] = _load_inits(examples, path)
        tfile = Path(f"{path}.timing.json")
        timings[name] = json.loads(tfile.read_text())["total_seconds"] if tfile.exists() else None
    rows = bench_rows(examples, reference, methods, timings, args.round)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["method", "length", "gap_pct", "time_s"], delimiter=args.delimiter, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.output:
        Path(args.output).write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    if args.figure:
        from .plotting import save_gap_figure

        save_gap_figure(args.figure, rows)
    return 0


def cmd_plot(args) -> int:
    from .plotting import save_solution_figure

    examples = read_dataset(args.input)
    if not 0 <= args.index < len(examples):
        raise InsertNcoError(f"--index {args.index} out of range (file has {len(examples)} instances)")
    ex = examples[args.index]
    if args.solutions:
        recs = read_solutions(args.solutions)
        sol = CyclicSolution(tuple(recs[args.index]["order"]))
    else:
        sol = ex.label
    save_solution_figure(args.output, ex.instance, sol)
    return 0


# -- parser ---------------------------------------------------------------


def _add_policy_flags(p, policies=("cheapest", "random", "neural")):
    p.add_argument("--policy", choices=policies, default="cheapest")
    p.add_argument("--weights", help="weights file for --policy neural")
    p.add_argument("--selector", choices=SELECTORS, help="node selection (default: nearest for TSP, polar for CVRP)")
    p.add_argument("--decode", choices=["argmax", "sample"], default="argmax")
    p.add_argument("--k", type=int, help="k-nearest decoder filter (default 100 TSP / 200 CVRP; 0 disables)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="insert-nco", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate uniform random instances")
    p.add_argument("--kind", choices=[TSP, CVRP], default=TSP)
    p.add_argument("--n", type=int, required=True, help="nodes (TSP) or customers (CVRP)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--capacity", type=float, help="CVRP vehicle capacity (default: size preset)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("label", help="attach exact (TSP n<=20) or local-search labels")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--budget", type=int, default=10, help="local-search restarts per instance")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="supervised training on a labelled dataset")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True, help="weights file")
    p.add_argument("--log", help="per-epoch CSV log")
    p.add_argument("--figure", help="loss-curve figure (needs --log)")
    p.add_argument("--preset", choices=["full", "desk"], default="full")
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--no-unvisited", action="store_true", help="drop unvisited-node tokens from the decoder")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch", type=int, default=64, help="episodes per batch")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--decay", type=float, default=0.97)
    p.add_argument("--steps-per-episode", type=int)
    p.add_argument("--selector", choices=SELECTORS)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="construct solutions")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    _add_policy_flags(p, ("cheapest", "random", "neural", "append"))
    p.add_argument("--start", default="0", help="TSP start node index or 'random'")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("improve", help="destroy/repair improvement of existing solutions")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--init", help="solutions file to start from (default: dataset labels)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--alpha", type=int, default=DEFAULT_ALPHA)
    p.add_argument("--destroy", choices=["distance", "sequence"], default="distance")
    _add_policy_flags(p)
    p.set_defaults(func=cmd_improve)

    p = sub.add_parser("bench", help="Length / Gap / Time table against a reference")
    p.add_argument("-i", "--input", required=True, help="instances (labels are the default reference)")
    p.add_argument("--reference", help="reference solutions file")
    p.add_argument("--solutions", nargs="+", required=True, metavar="[NAME=]PATH")
    p.add_argument("--round", action="store_true", help="TSPLIB nearest-integer edge lengths")
    p.add_argument("--delimiter", default=",")
    p.add_argument("-o", "--output", help="also write the table here")
    p.add_argument("--figure", help="bar chart of gaps")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="draw one solution")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--solutions", help="solutions file (default: the dataset label)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="figure path, e.g. tour.svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "iterations", 0) < 0 or getattr(args, "count", 0) < 0:
        parser.error("counts must be non-negative")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (InsertNcoError, OSError, ValueError, KeyError) as exc:
        print(f"insert-nco: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
