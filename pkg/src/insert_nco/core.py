"""Instances, solutions and the geometric primitives every other module uses.

Node indexing is 0-based throughout.  A TSP instance with ``n`` nodes has
nodes ``0..n-1``; a CVRP instance has the depot at index 0 and customers
``1..n``.

Solutions are stored as a flat ``order`` tuple.  For CVRP the depot (0)
separates routes and a leading/trailing depot is implied, so
``(1, 2, 0, 3)`` means the two routes ``0-1-2-0`` and ``0-3-0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TSP = "tsp"
CVRP = "cvrp"


class InsertNcoError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInstance(InsertNcoError):
    pass


class InvalidSolution(InsertNcoError):
    pass


class CoincidesWithDepot(InsertNcoError):
    pass


class RouteIndexOutOfRange(InsertNcoError):
    pass


class DegenerateAxis(InsertNcoError):
    pass


@dataclass(frozen=True, eq=False)
class Instance:
    kind: str
    coords: np.ndarray
    demands: np.ndarray | None = None
    capacity: float | None = None
    name: str = ""

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInstance(f"coords must be an (n, 2) array, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise InvalidInstance("coords must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.kind == TSP:
            if len(coords) < 2:
                raise InvalidInstance("a TSP instance needs at least 2 nodes")
            if self.demands is not None or self.capacity is not None:
                raise InvalidInstance("TSP instances carry no demands or capacity")
        elif self.kind == CVRP:
            if len(coords) < 2:
                raise InvalidInstance("a CVRP instance needs a depot and at least 1 customer")
            if self.demands is None or self.capacity is None:
                raise InvalidInstance("CVRP instances need demands and capacity")
            demands = np.array(self.demands, dtype=np.float64)
            if demands.shape != (len(coords),):
                raise InvalidInstance("demands must have one entry per node (depot included)")
            if demands[0] != 0:
                raise InvalidInstance("depot demand must be 0")
            if np.any(demands < 0):
                raise InvalidInstance("demands must be non-negative")
            capacity = float(self.capacity)
            if not capacity > 0:
                raise InvalidInstance("capacity must be positive")
            if np.any(demands > capacity):
                raise InvalidInstance("a customer demand exceeds the vehicle capacity")
            demands.setflags(write=False)
            object.__setattr__(self, "demands", demands)
            object.__setattr__(self, "capacity", capacity)
        else:
            raise InvalidInstance(f"unknown problem kind {self.kind!r}")

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def customers(self) -> np.ndarray:
        """Indices of the nodes a solution must visit (depot excluded)."""
        if self.kind == CVRP:
            return np.arange(1, self.n_nodes)
        return np.arange(self.n_nodes)

    @property
    def n_customers(self) -> int:
        return self.n_nodes - 1 if self.kind == CVRP else self.n_nodes

    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name, "coords": self.coords.tolist()}
        if self.kind == CVRP:
            d["demands"] = self.demands.tolist()
            d["capacity"] = self.capacity
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        return cls(
            kind=d["kind"],
            coords=d["coords"],
            demands=d.get("demands"),
            capacity=d.get("capacity"),
            name=d.get("name", ""),
        )

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class CyclicSolution:
    """A closed tour (TSP) or a depot-delimited set of routes (CVRP)."""

    order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(v) for v in self.order))

    @classmethod
    def from_routes(cls, routes: Iterable[Sequence[int]]) -> "CyclicSolution":
        order: list[int] = []
        for r in routes:
            if not len(r):
                continue
            if order:
                order.append(0)
            order.extend(r)
        return cls(tuple(order))

    def routes(self) -> list[list[int]]:
        """Split a CVRP order on the depot; empty routes are dropped."""
        out: list[list[int]] = [[]]
        for v in self.order:
            if v == 0:
                out.append([])
            else:
                out[-1].append(v)
        return [r for r in out if r]

    def normalized(self) -> "CyclicSolution":
        """CVRP only: strip leading/trailing depots and collapse empty routes."""
        return CyclicSolution.from_routes(self.routes())


def make_rng(seed: int | None = None) -> np.random.Generator:
    """Seeded generator; always PCG64 so a seed replays identically everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int | None, count: int) -> list[np.random.Generator]:
    """Independent per-item generators, stable regardless of processing order."""
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def euclid_distance(a, b) -> float:
    return math.hypot(float(a[0]) - float(b[0]), float(a[1]) - float(b[1]))


def _fold_angle(diff):
    diff = np.mod(np.abs(diff), 2 * np.pi)
    return np.minimum(diff, 2 * np.pi - diff)


def polar_angle_distance(a, b, depot) -> float:
    """Angular separation of ``a`` and ``b`` seen from ``depot``, on the shorter arc."""
    ax, ay = float(a[0]) - float(depot[0]), float(a[1]) - float(depot[1])
    bx, by = float(b[0]) - float(depot[0]), float(b[1]) - float(depot[1])
    if (ax == 0 and ay == 0) or (bx == 0 and by == 0):
        raise CoincidesWithDepot("polar angle undefined for a point at the depot")
    return float(_fold_angle(math.atan2(ay, ax) - math.atan2(by, bx)))


def polar_angles(coords: np.ndarray, depot) -> np.ndarray:
    rel = np.asarray(coords, dtype=np.float64) - np.asarray(depot, dtype=np.float64)
    return np.arctan2(rel[..., 1], rel[..., 0])


def cycle_length(coords: np.ndarray, seq: Sequence[int]) -> float:
    """Length of the closed walk through ``seq`` (last node connects to the first)."""
    if len(seq) < 2:
        return 0.0
    pts = coords[np.asarray(seq)]
    nxt = np.roll(pts, -1, axis=0)
    return float(np.sqrt(((pts - nxt) ** 2).sum(-1)).sum())


def validate_solution(instance: Instance, solution: CyclicSolution) -> None:
    """Raise :class:`InvalidSolution` unless ``solution`` is feasible for ``instance``."""
    order = solution.order
    if instance.kind == TSP:
        if sorted(order) != list(range(instance.n_nodes)):
            raise InvalidSolution("TSP tour must be a permutation of all nodes")
        return
    customers = [v for v in order if v != 0]
    if sorted(customers) != list(range(1, instance.n_nodes)):
        raise InvalidSolution("every customer must appear exactly once")
    if any(v < 0 or v >= instance.n_nodes for v in order):
        raise InvalidSolution("node index out of range")
    for r in solution.routes():
        load = float(instance.demands[r].sum())
        if load > instance.capacity + 1e-9:
            raise InvalidSolution(f"route {r} carries {load} > capacity {instance.capacity}")


def is_valid(instance: Instance, solution: CyclicSolution) -> bool:
    try:
        validate_solution(instance, solution)
    except InvalidSolution:
        return False
    return True


def solution_length(instance: Instance, solution: CyclicSolution) -> float:
    validate_solution(instance, solution)
    if instance.kind == TSP:
        return cycle_length(instance.coords, solution.order)
    return sum(cycle_length(instance.coords, [0, *r]) for r in solution.routes())


def minmax_scale(instance: Instance) -> Instance:
    """Map each coordinate axis independently onto [0, 1].

    An axis with zero extent is mapped to 0.5.
    """
    coords = instance.coords
    lo = coords.min(axis=0)
    span = coords.max(axis=0) - lo
    scaled = np.empty_like(coords)
    for ax in range(2):
        if span[ax] > 0:
            scaled[:, ax] = (coords[:, ax] - lo[ax]) / span[ax]
        else:
            scaled[:, ax] = 0.5
    return Instance(
        kind=instance.kind,
        coords=scaled,
        demands=instance.demands,
        capacity=instance.capacity,
        name=instance.name,
    )


def k_nearest(
    query: int,
    candidates: Iterable[int],
    k: int,
    coords: np.ndarray,
    metric: str = "euclid",
    depot=None,
) -> list[int]:
    """The ``k`` candidates closest to ``query``, ascending; ties go to the smaller index.

    ``query`` itself is never returned.  ``metric`` is ``"euclid"`` or
    ``"polar"`` (the latter needs ``depot``).
    """
    cand = np.array(sorted(int(c) for c in candidates if int(c) != query), dtype=np.int64)
    if k <= 0 or cand.size == 0:
        return []
    dist = node_distances(query, cand, coords, metric, depot)
    # stable sort on pre-sorted indices = index tie-break
    order = np.argsort(dist, kind="stable")[:k]
    return cand[order].tolist()


def node_distances(query: int, cand: np.ndarray, coords: np.ndarray, metric: str = "euclid", depot=None) -> np.ndarray:
    coords = np.asarray(coords)
    if metric == "euclid":
        return np.sqrt(((coords[cand] - coords[query]) ** 2).sum(-1))
    if metric == "polar":
        if depot is None:
            raise ValueError("polar metric needs a depot")
        depot = np.asarray(depot, dtype=np.float64)
        if np.all(coords[query] == depot):
            raise CoincidesWithDepot("query node sits on the depot")
        ang = _fold_angle(polar_angles(coords[cand], depot) - polar_angles(coords[query], depot))
        at_depot = np.all(coords[cand] == depot, axis=-1)
        if at_depot.any():
            # angle undefined there; those nodes fall back to Euclidean distance
            eu = np.sqrt(((coords[cand] - coords[query]) ** 2).sum(-1))
            ang = np.where(at_depot, eu, ang)
        return ang
    raise ValueError(f"unknown metric {metric!r}")


def remaining_capacity(instance: Instance, solution: CyclicSolution, route_index: int) -> float:
    if instance.kind != CVRP:
        raise InvalidInstance("remaining capacity only applies to CVRP")
    routes = _raw_routes(solution.order)
    if not 0 <= route_index < len(routes):
        raise RouteIndexOutOfRange(f"route {route_index} not in 0..{len(routes) - 1}")
    return instance.capacity - float(instance.demands[routes[route_index]].sum()) if routes[route_index] else instance.capacity


def _raw_routes(order: Sequence[int]) -> list[list[int]]:
    # keeps empty routes so indices line up with the depot separators
    out: list[list[int]] = [[]]
    for v in order:
        if v == 0:
            out.append([])
        else:
            out[-1].append(v)
    if len(out) > 1 and not out[0] and order and order[0] == 0:
        out = out[1:]
    if len(out) > 1 and not out[-1] and order and order[-1] == 0:
        out = out[:-1]
    return out


def tour_edges(solution: CyclicSolution, kind: str) -> set[frozenset]:
    """Undirected edge set; lets two tours be compared up to rotation and reflection."""
    if kind == TSP:
        seqs = [list(solution.order)]
    else:
        seqs = [[0, *r] for r in solution.routes()]
    edges: set[frozenset] = set()
    for s in seqs:
        for a, b in zip(s, s[1:] + s[:1]):
            edges.add(frozenset((a, b)))
    return edges
