"""Destroy-and-repair improvement built on the insertion engine.

Each iteration removes a cluster of customers (a random centre plus its
``alpha`` nearest neighbours), lets the remaining nodes close up into a
smaller cycle or smaller routes, re-inserts the removed nodes with a position
policy, and keeps the result only if it is shorter than the incumbent.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .construct import NEAREST, InsertionState, partial_to_solution, run_insertion, solution_to_partial
from .core import CVRP, CyclicSolution, Instance, k_nearest, make_rng, solution_length

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 300
ACCEPT_EPS = 1e-9


def clamp_alpha(instance: Instance, alpha: int) -> int:
    """At most ``n_customers - 2`` neighbours, so at least one customer survives destruction."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return max(min(alpha, instance.n_customers - 2), 0)


def _reduced_state(instance: Instance, solution: CyclicSolution, removed: set[int]) -> InsertionState:
    if instance.kind == CVRP:
        routes = [[v for v in r if v not in removed] for r in solution.routes()]
        partial = solution_to_partial(instance, CyclicSolution.from_routes(routes))
    else:
        partial = [v for v in solution.order if v not in removed]
    return InsertionState.start(instance, partial)


def distance_destroy(
    instance: Instance,
    solution: CyclicSolution,
    alpha: int,
    rng: np.random.Generator,
    center: int | None = None,
) -> tuple[InsertionState, list[int]]:
    """Remove a random customer and its ``alpha`` nearest customers (Euclidean)."""
    if instance.n_customers < 2:
        return _reduced_state(instance, solution, set()), []
    alpha = clamp_alpha(instance, alpha)
    cust = instance.customers
    if center is None:
        center = int(cust[rng.integers(cust.size)])
    removed = [center, *k_nearest(center, cust, alpha, instance.coords)]
    return _reduced_state(instance, solution, set(removed)), removed


def sequence_destroy(
    instance: Instance,
    solution: CyclicSolution,
    alpha: int,
    rng: np.random.Generator,
    start: int | None = None,
) -> tuple[InsertionState, list[int]]:
    """Remove ``alpha + 1`` consecutive customers of the visiting sequence, wrapping around."""
    if instance.n_customers < 2:
        return _reduced_state(instance, solution, set()), []
    alpha = clamp_alpha(instance, alpha)
    seq = [v for v in solution.order if not (instance.kind == CVRP and v == 0)]
    if start is None:
        start = int(rng.integers(len(seq)))
    removed = [seq[(start + s) % len(seq)] for s in range(alpha + 1)]
    return _reduced_state(instance, solution, set(removed)), removed


DESTROYERS = {"distance": distance_destroy, "sequence": sequence_destroy}


def _seed_last_node(state: InsertionState, rng: np.random.Generator) -> None:
    visited = [v for v in state.partial if not (state.instance.kind == CVRP and v == 0)]
    state.last_node = int(visited[rng.integers(len(visited))]) if visited else 0


def repair_many(
    states: Sequence[InsertionState],
    policy,
    selector: str = NEAREST,
    rngs: Sequence[np.random.Generator] | None = None,
) -> list[CyclicSolution]:
    rngs = list(rngs) if rngs is not None else [make_rng() for _ in states]
    for s, r in zip(states, rngs):
        _seed_last_node(s, r)
    run_insertion(states, policy, selector, rngs)
    return [partial_to_solution(s.instance, s.partial) for s in states]


def repair(
    state: InsertionState,
    removed: Sequence[int] | None,
    policy,
    selector: str = NEAREST,
    rng: np.random.Generator | None = None,
) -> CyclicSolution:
    """Re-insert every unvisited node; the first "last node" is drawn from the partial.

    ``removed`` is informational: the state's unvisited set is authoritative.
    """
    rng = rng if rng is not None else make_rng()
    return repair_many([state], policy, selector, [rng])[0]


def improve_many(
    instances: Sequence[Instance],
    inits: Sequence[CyclicSolution],
    policy,
    iterations: int,
    alpha: int = DEFAULT_ALPHA,
    rngs: Sequence[np.random.Generator] | None = None,
    destroy: str = "distance",
    selector: str = NEAREST,
    traces: list[list[float]] | None = None,
) -> list[CyclicSolution]:
    """Run :func:`improve` on several instances in lockstep (one policy call per step for all).

    If ``traces`` is a list, it receives one list per instance holding the
    incumbent length after each iteration.
    """
    destroyer = DESTROYERS[destroy]
    rngs = list(rngs) if rngs is not None else [make_rng() for _ in instances]
    best = list(inits)
    best_len = [solution_length(i, s) for i, s in zip(instances, best)]
    if traces is not None:
        traces.extend([] for _ in instances)
    for it in range(iterations):
        states = [destroyer(inst, sol, alpha, r)[0] for inst, sol, r in zip(instances, best, rngs)]
        cands = repair_many(states, policy, selector, rngs)
        for k, (inst, cand) in enumerate(zip(instances, cands)):
            length = solution_length(inst, cand)
            if length < best_len[k] - ACCEPT_EPS:
                best[k], best_len[k] = cand, length
            if traces is not None:
                traces[k].append(best_len[k])
    return best


def improve(
    instance: Instance,
    init: CyclicSolution,
    policy,
    iterations: int,
    alpha: int = DEFAULT_ALPHA,
    rng: np.random.Generator | None = None,
    destroy: str = "distance",
    selector: str = NEAREST,
    trace: list[float] | None = None,
) -> CyclicSolution:
    """Destroy/repair loop that only ever accepts strictly shorter solutions."""
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    traces: list[list[float]] | None = [] if trace is not None else None
    out = improve_many([instance], [init], policy, iterations, alpha, [rng if rng is not None else make_rng()], destroy, selector, traces)[0]
    if trace is not None:
        trace.extend(traces[0])
    return out
