"""Insertion-based construction engine plus the appending baseline.

A partial solution is a flat list of nodes read as a cycle.  For TSP it is
the tour so far; a single node is a cycle with one self-loop edge.  For CVRP
the list starts and ends with the depot and uses inner depots as route
separators, e.g. ``[0, 1, 2, 0, 4, 0]``; its wrap-around edge (last depot back
to the first) is the "new route" slot.

Position ``i`` is the edge ``partial[i] -> partial[(i + 1) % len(partial)]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    CVRP,
    TSP,
    CoincidesWithDepot,
    CyclicSolution,
    Instance,
    InsertNcoError,
    make_rng,
    node_distances,
)

NEAREST = "nearest"
POLAR = "polar"
RANDOM = "random"
SELECTORS = (NEAREST, POLAR, RANDOM)

_CAP_EPS = 1e-9


class EmptyUnvisited(InsertNcoError):
    pass


class PolarOnTsp(InsertNcoError):
    pass


class NoCurrentNode(InsertNcoError):
    pass


class InvalidPosition(InsertNcoError):
    pass


class NoValidPosition(InsertNcoError):
    pass


class CapacityViolation(InsertNcoError):
    pass


@dataclass(frozen=True)
class Position:
    index: int
    pred: int
    succ: int
    new_route: bool = False


@dataclass
class InsertionState:
    instance: Instance
    partial: list[int]
    unvisited: np.ndarray
    last_node: int | None = None
    current_node: int | None = None

    @classmethod
    def start(cls, instance: Instance, partial: Sequence[int], last_node: int | None = None) -> "InsertionState":
        """State whose visited set is exactly the customers in ``partial``."""
        unvisited = np.zeros(instance.n_nodes, dtype=bool)
        unvisited[instance.customers] = True
        unvisited[[v for v in partial if not (instance.kind == CVRP and v == 0)]] = False
        return cls(instance, list(partial), unvisited, last_node)

    @property
    def unvisited_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.unvisited)

    @property
    def done(self) -> bool:
        return self.current_node is None and not self.unvisited.any()

    def copy(self) -> "InsertionState":
        return InsertionState(self.instance, list(self.partial), self.unvisited.copy(), self.last_node, self.current_node)

    def solution(self) -> CyclicSolution:
        if self.current_node is not None or self.unvisited.any():
            raise InsertNcoError("construction not finished")
        return partial_to_solution(self.instance, self.partial)


def partial_to_solution(instance: Instance, partial: Sequence[int]) -> CyclicSolution:
    if instance.kind == TSP:
        k = list(partial).index(min(partial))
        return CyclicSolution(tuple(partial[k:]) + tuple(partial[:k]))
    return CyclicSolution(tuple(partial)).normalized()


def solution_to_partial(instance: Instance, solution: CyclicSolution) -> list[int]:
    if instance.kind == TSP:
        return list(solution.order)
    partial = [0]
    for r in solution.routes():
        partial.extend(r)
        partial.append(0)
    return partial


def position_arrays(state: InsertionState):
    """Vectorised view of all positions: ``(pred, succ, remaining, feasible)``.

    ``remaining`` is the spare capacity of the route each position lies on
    (``None`` for TSP); ``feasible`` is judged against the current node, or all
    true when no node is current.
    """
    inst = state.instance
    part = np.asarray(state.partial, dtype=np.int64)
    pred = part
    succ = np.roll(part, -1)
    if inst.kind == TSP:
        return pred, succ, None, np.ones(len(part), dtype=bool)
    rid = np.cumsum(part == 0) - 1
    loads = np.bincount(rid, weights=inst.demands[part], minlength=rid[-1] + 1)
    remaining = inst.capacity - loads[rid]
    remaining[-1] = inst.capacity  # new-route slot
    if state.current_node is None:
        feasible = np.ones(len(part), dtype=bool)
    else:
        feasible = remaining + _CAP_EPS >= inst.demands[state.current_node]
    return pred, succ, remaining, feasible


def _position(state: InsertionState, i: int) -> Position:
    part = state.partial
    new_route = state.instance.kind == CVRP and i == len(part) - 1
    return Position(int(i), int(part[i]), int(part[(i + 1) % len(part)]), new_route)


def valid_positions(state: InsertionState) -> list[Position]:
    if state.current_node is None:
        raise NoCurrentNode("select a node before asking for positions")
    _, _, _, feasible = position_arrays(state)
    return [_position(state, i) for i in np.flatnonzero(feasible)]


def check_position(state: InsertionState, position: Position) -> None:
    part = state.partial
    i = position.index
    if not 0 <= i < len(part) or part[i] != position.pred or part[(i + 1) % len(part)] != position.succ:
        raise InvalidPosition(f"{position} is not an edge of the partial solution")
    if position.new_route != (state.instance.kind == CVRP and i == len(part) - 1):
        raise InvalidPosition(f"{position} has the wrong new-route flag")


def insertion_delta(instance: Instance, state: InsertionState, position: Position, node: int) -> float:
    check_position(state, position)
    c = instance.coords
    d = lambda a, b: float(np.hypot(*(c[a] - c[b])))  # noqa: E731
    return d(position.pred, node) + d(node, position.succ) - d(position.pred, position.succ)


def insertion_deltas(state: InsertionState, node: int | None = None) -> np.ndarray:
    """Cost increase of inserting ``node`` (default: the current node) at every position."""
    node = state.current_node if node is None else node
    c = state.instance.coords
    pred, succ, _, _ = position_arrays(state)
    dp = np.sqrt(((c[pred] - c[node]) ** 2).sum(-1))
    ds = np.sqrt(((c[succ] - c[node]) ** 2).sum(-1))
    de = np.sqrt(((c[pred] - c[succ]) ** 2).sum(-1))
    return dp + ds - de


def select_next_node(state: InsertionState, strategy: str = NEAREST, rng: np.random.Generator | None = None) -> int:
    inst = state.instance
    cand = state.unvisited_nodes
    if cand.size == 0:
        raise EmptyUnvisited("no unvisited nodes left")
    if strategy == POLAR and inst.kind == TSP:
        raise PolarOnTsp("polar-angle selection needs a depot")
    if cand.size == 1:
        node = int(cand[0])
    elif strategy == RANDOM:
        rng = rng if rng is not None else make_rng()
        node = int(cand[rng.integers(cand.size)])
    elif strategy in (NEAREST, POLAR):
        last = state.last_node if state.last_node is not None else (0 if inst.kind == CVRP else int(cand[0]))
        dist = None
        if strategy == POLAR:
            try:
                dist = node_distances(last, cand, inst.coords, "polar", depot=inst.coords[0])
            except CoincidesWithDepot:
                dist = None
        if dist is None:
            dist = node_distances(last, cand, inst.coords)
        node = int(cand[int(np.argmin(dist))])
    else:
        raise ValueError(f"unknown selector {strategy!r}")
    state.unvisited[node] = False
    state.current_node = node
    return node


def cheapest_insertion_policy(state: InsertionState, rng=None) -> Position:
    if state.current_node is None:
        raise NoCurrentNode("select a node before choosing a position")
    _, _, _, feasible = position_arrays(state)
    if not feasible.any():
        raise NoValidPosition("no feasible position")
    delta = np.where(feasible, insertion_deltas(state), np.inf)
    best = int(np.flatnonzero(delta <= delta.min() + 1e-12)[0])
    return _position(state, best)


def random_position_policy(state: InsertionState, rng: np.random.Generator | None = None) -> Position:
    valid = valid_positions(state)
    if not valid:
        raise NoValidPosition("no feasible position")
    rng = rng if rng is not None else make_rng()
    return valid[int(rng.integers(len(valid)))]


class Policy:
    """Picks an insertion position for the current node of a state.

    Subclasses override :meth:`choose`; :meth:`choose_batch` exists so that
    learned policies can evaluate many states in one forward pass.
    """

    name = "policy"

    def choose(self, state: InsertionState, rng: np.random.Generator) -> Position:
        raise NotImplementedError

    def choose_batch(self, states: Sequence[InsertionState], rngs: Sequence[np.random.Generator]) -> list[Position]:
        return [self.choose(s, r) for s, r in zip(states, rngs)]

    def __call__(self, state, rng=None):
        return self.choose(state, rng if rng is not None else make_rng())


class FunctionPolicy(Policy):
    def __init__(self, fn: Callable, name: str):
        self.fn = fn
        self.name = name

    def choose(self, state, rng):
        return self.fn(state, rng)


CHEAPEST = FunctionPolicy(cheapest_insertion_policy, "cheapest")
RANDOM_POSITION = FunctionPolicy(random_position_policy, "random")


def as_policy(policy) -> Policy:
    if isinstance(policy, Policy):
        return policy
    if policy == "cheapest":
        return CHEAPEST
    if policy == "random":
        return RANDOM_POSITION
    if callable(policy):
        return FunctionPolicy(policy, getattr(policy, "__name__", "custom"))
    raise ValueError(f"unknown policy {policy!r}")


def insert(state: InsertionState, position: Position) -> InsertionState:
    """Splice the current node into ``position`` (in place) and return the state."""
    node = state.current_node
    if node is None:
        raise NoCurrentNode("nothing to insert")
    check_position(state, position)
    inst = state.instance
    if inst.kind == CVRP:
        _, _, remaining, _ = position_arrays(state)
        if remaining[position.index] + _CAP_EPS < inst.demands[node]:
            raise CapacityViolation(f"node {node} does not fit at {position}")
    if position.new_route:
        state.partial.extend([node, 0])
    else:
        state.partial.insert(position.index + 1, node)
    state.last_node = node
    state.current_node = None
    return state


StepHook = Callable[[InsertionState, Position, float], None]


def run_insertion(
    states: Sequence[InsertionState],
    policy,
    selector: str = NEAREST,
    rngs: Sequence[np.random.Generator] | None = None,
    on_step: StepHook | None = None,
) -> list[InsertionState]:
    """Drive every state to completion in lockstep: select, choose, insert.

    ``on_step(state, position, delta)`` is called after each insertion with
    the cost increase that insertion was predicted to cause.
    """
    policy = as_policy(policy)
    rngs = list(rngs) if rngs is not None else [make_rng() for _ in states]
    while True:
        active = [i for i, s in enumerate(states) if s.unvisited.any()]
        if not active:
            return list(states)
        for i in active:
            select_next_node(states[i], selector, rngs[i])
        chosen = policy.choose_batch([states[i] for i in active], [rngs[i] for i in active])
        for i, pos in zip(active, chosen):
            s = states[i]
            delta = insertion_delta(s.instance, s, pos, s.current_node) if on_step else 0.0
            insert(s, pos)
            if on_step:
                on_step(s, pos, delta)


def initial_state(instance: Instance, rng: np.random.Generator | None = None, start: int | str = 0) -> InsertionState:
    """TSP: a single start node (index or ``"random"``).  CVRP: depot plus its nearest customer."""
    if instance.kind == TSP:
        if start == "random":
            rng = rng if rng is not None else make_rng()
            start = int(rng.integers(instance.n_nodes))
        start = int(start)
        return InsertionState.start(instance, [start], last_node=start)
    cust = instance.customers
    first = int(cust[int(np.argmin(node_distances(0, cust, instance.coords)))])
    return InsertionState.start(instance, [0, first, 0], last_node=first)


def construct_many(
    instances: Sequence[Instance],
    policy,
    selector: str = NEAREST,
    rngs: Sequence[np.random.Generator] | None = None,
    start: int | str = 0,
    on_step: StepHook | None = None,
) -> list[CyclicSolution]:
    rngs = list(rngs) if rngs is not None else [make_rng() for _ in instances]
    states = [initial_state(inst, r, start) for inst, r in zip(instances, rngs)]
    run_insertion(states, policy, selector, rngs, on_step)
    return [s.solution() for s in states]


def construct(
    instance: Instance,
    policy="cheapest",
    selector: str = NEAREST,
    rng: np.random.Generator | None = None,
    start: int | str = 0,
    on_step: StepHook | None = None,
) -> CyclicSolution:
    rng = rng if rng is not None else make_rng()
    return construct_many([instance], policy, selector, [rng], start, on_step)[0]


def append_construct(
    instance: Instance,
    selector: str = NEAREST,
    rng: np.random.Generator | None = None,
    start: int = 0,
) -> CyclicSolution:
    """Appending baseline: every chosen node goes to the end of the tour/route.

    For CVRP a node that does not fit closes the current route and opens a new one.
    """
    rng = rng if rng is not None else make_rng()
    if instance.kind == TSP:
        state = InsertionState.start(instance, [start], last_node=start)
    else:
        state = InsertionState.start(instance, [0], last_node=0)
    order: list[int] = [] if instance.kind == CVRP else [start]
    load = 0.0
    while state.unvisited.any():
        node = select_next_node(state, selector, rng)
        if instance.kind == CVRP:
            dem = float(instance.demands[node])
            if order and load + dem > instance.capacity + _CAP_EPS:
                order.append(0)
                load = 0.0
            load += dem
        order.append(node)
        state.last_node = node
        state.current_node = None
    sol = CyclicSolution(tuple(order))
    return sol if instance.kind == TSP else sol.normalized()
