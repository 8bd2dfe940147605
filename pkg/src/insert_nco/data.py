"""Instance generation, labelling oracles, benchmark-file parsing and dataset files."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

from .construct import NEAREST, RANDOM, construct
from .core import (
    CVRP,
    TSP,
    CyclicSolution,
    Instance,
    InsertNcoError,
    make_rng,
    solution_length,
    validate_solution,
)

log = logging.getLogger(__name__)

HELD_KARP_MAX_NODES = 20

# Vehicle capacity by customer count; sizes in between use the next smaller entry.
CVRP_CAPACITY = {10: 20, 20: 30, 50: 40, 100: 50, 1000: 200}


class TooLarge(InsertNcoError):
    pass


class UnsupportedEdgeWeightType(InsertNcoError):
    pass


class MalformedSection(InsertNcoError):
    pass


class MissingDemand(MalformedSection):
    pass


class CorruptLine(InsertNcoError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class LabeledExample:
    instance: Instance
    label: CyclicSolution | None = None

    def __post_init__(self):
        if self.label is not None:
            validate_solution(self.instance, self.label)


# -- generators -----------------------------------------------------------


def gen_uniform_tsp(n: int, count: int, rng: np.random.Generator) -> list[Instance]:
    if n < 2:
        raise ValueError("TSP needs n >= 2")
    return [Instance(TSP, rng.random((n, 2)), name=f"tsp{n}-{i}") for i in range(count)]


def capacity_for(n: int) -> float:
    keys = [k for k in sorted(CVRP_CAPACITY) if k <= n]
    return float(CVRP_CAPACITY[keys[-1]] if keys else CVRP_CAPACITY[min(CVRP_CAPACITY)])


def gen_uniform_cvrp(n: int, capacity: float | None, rng: np.random.Generator, count: int = 1) -> list[Instance]:
    """Depot plus ``n`` customers uniform on the unit square, demands uniform in 1..9."""
    if n < 1:
        raise ValueError("CVRP needs n >= 1")
    capacity = capacity_for(n) if capacity is None else float(capacity)
    out = []
    for i in range(count):
        coords = rng.random((n + 1, 2))
        demands = np.concatenate([[0], rng.integers(1, 10, size=n)]).astype(np.float64)
        out.append(Instance(CVRP, coords, demands, capacity, name=f"cvrp{n}-{i}"))
    return out


# -- exact oracle ---------------------------------------------------------


_BIG = 1e300


# min is exact under any evaluation order, so reassociation is safe here;
# infinities are kept out of the table so "ninf" assumptions cannot bite.
@numba.njit(cache=True, fastmath={"reassoc", "nsz", "contract", "arcp"})
def _held_karp_table(dist):
    """``dp[mask, j]``: shortest path from node 0 through the node set ``mask`` ending at ``j``.

    Bit ``j`` of ``mask`` stands for node ``j + 1``.
    """
    m = dist.shape[0] - 1
    full = 1 << m
    d = np.ascontiguousarray(dist[1:, 1:])
    dp = np.full((full, m), _BIG)
    for j in range(m):
        dp[1 << j, j] = dist[0, j + 1]
    for mask in range(3, full):
        if (mask & (mask - 1)) == 0:
            continue
        for j in range(m):
            if not (mask >> j) & 1:
                continue
            row = dp[mask ^ (1 << j)]
            dj = d[j]
            best = _BIG
            for i in range(m):
                best = min(best, row[i] + dj[i])
            dp[mask, j] = best
    return dp


@numba.njit(cache=True)
def _held_karp_tour(dp, dist):
    n = dist.shape[0]
    m = n - 1
    mask = (1 << m) - 1
    best = np.inf
    j = -1
    for k in range(m):
        v = dp[mask, k] + dist[k + 1, 0]
        if v < best:
            best = v
            j = k
    tour = np.zeros(n, dtype=np.int64)
    for pos in range(n - 1, 0, -1):
        tour[pos] = j + 1
        prev = mask ^ (1 << j)
        if prev == 0:
            break
        bi = -1
        bv = np.inf
        for i in range(m):
            if (prev >> i) & 1:
                v = dp[prev, i] + dist[i + 1, j + 1]
                if v < bv:
                    bv = v
                    bi = i
        mask = prev
        j = bi
    return tour


def held_karp(instance: Instance) -> tuple[CyclicSolution, float]:
    """Exact TSP optimum by subset dynamic programming (node 0 fixed as start)."""
    if instance.kind != TSP:
        raise ValueError("held_karp solves TSP only")
    n = instance.n_nodes
    if n > HELD_KARP_MAX_NODES:
        raise TooLarge(f"held_karp is limited to {HELD_KARP_MAX_NODES} nodes, got {n}")
    if n <= 3:
        tour = CyclicSolution(tuple(range(n)))
    else:
        dist = instance.distance_matrix()
        tour = CyclicSolution(tuple(_held_karp_tour(_held_karp_table(dist), dist).tolist()))
    return tour, solution_length(instance, tour)


# -- local-search labeller ------------------------------------------------


@numba.njit(cache=True)
def _two_opt(tour, dist):
    n = tour.shape[0]
    improved = True
    changed = False
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
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-10:
                    tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1].copy()
                    b = tour[i + 1]
                    improved = True
                    changed = True
    return changed


@numba.njit(cache=True)
def _or_opt(tour, dist):
    n = tour.shape[0]
    changed = False
    improved = True
    while improved:
        improved = False
        for seg in range(1, 4):
            if seg >= n - 2:
                break
            i = 0
            while i <= n - seg:
                p = tour[(i - 1) % n]
                s0 = tour[i]
                s1 = tour[i + seg - 1]
                q = tour[(i + seg) % n]
                gain = dist[p, s0] + dist[s1, q] - dist[p, q]
                best = -1e-10
                best_k = -1
                best_rev = False
                # candidate edges of the tour with the segment removed
                for k in range(n):
                    if i <= k < i + seg or k == (i - 1) % n:
                        continue
                    u = tour[k]
                    v = tour[(k + 1) % n]
                    if i <= (k + 1) % n < i + seg:
                        continue
                    fwd = dist[u, s0] + dist[s1, v] - dist[u, v] - gain
                    rev = dist[u, s1] + dist[s0, v] - dist[u, v] - gain
                    if fwd < best:
                        best, best_k, best_rev = fwd, k, False
                    if rev < best:
                        best, best_k, best_rev = rev, k, True
                if best_k >= 0:
                    segment = tour[i : i + seg].copy()
                    if best_rev:
                        segment = segment[::-1].copy()
                    rest = np.concatenate((tour[:i], tour[i + seg :]))
                    u = tour[best_k]
                    at = 0
                    for t in range(rest.shape[0]):
                        if rest[t] == u:
                            at = t
                            break
                    out = np.concatenate((rest[: at + 1], segment, rest[at + 1 :]))
                    tour[:] = out
                    improved = True
                    changed = True
                i += 1
    return changed


def tsp_local_search(instance: Instance, solution: CyclicSolution) -> CyclicSolution:
    """2-opt and Or-opt descent to a local optimum of both neighbourhoods."""
    tour = np.array(solution.order, dtype=np.int64)
    if len(tour) < 5:
        return solution
    dist = instance.distance_matrix()
    while True:
        a = _two_opt(tour, dist)
        b = _or_opt(tour, dist)
        if not (a or b):
            break
    return CyclicSolution(tuple(tour.tolist()))


def _double_bridge(order: Sequence[int], rng: np.random.Generator) -> CyclicSolution:
    n = len(order)
    i, j, k = sorted(rng.choice(np.arange(1, n), size=3, replace=False))
    o = list(order)
    return CyclicSolution(tuple(o[:i] + o[j:k] + o[i:j] + o[k:]))


def _route_len(dist, r):
    if not r:
        return 0.0
    s = dist[0, r[0]] + dist[r[-1], 0]
    for a, b in zip(r, r[1:]):
        s += dist[a, b]
    return s


def cvrp_local_search(instance: Instance, solution: CyclicSolution) -> CyclicSolution:
    """Intra-route 2-opt plus inter-route relocate and swap, first improvement."""
    dist = instance.distance_matrix()
    dem = instance.demands
    cap = instance.capacity
    routes = [list(r) for r in solution.routes()]
    loads = [float(dem[r].sum()) for r in routes]
    eps = 1e-10

    def two_opt_route(r):
        changed = True
        while changed:
            changed = False
            seq = [0, *r, 0]
            for i in range(len(seq) - 2):
                for j in range(i + 2, len(seq) - 1):
                    delta = dist[seq[i], seq[j]] + dist[seq[i + 1], seq[j + 1]] - dist[seq[i], seq[i + 1]] - dist[seq[j], seq[j + 1]]
                    if delta < -eps:
                        seq[i + 1 : j + 1] = seq[i + 1 : j + 1][::-1]
                        changed = True
            r[:] = seq[1:-1]

    improved = True
    while improved:
        improved = False
        for r in routes:
            two_opt_route(r)
        # relocate
        for a, ra in enumerate(routes):
            for pos in range(len(ra)):
                v = ra[pos]
                p = ra[pos - 1] if pos > 0 else 0
                q = ra[pos + 1] if pos + 1 < len(ra) else 0
                gain = dist[p, v] + dist[v, q] - dist[p, q]
                best, best_at = -eps, None
                for b, rb in enumerate(routes):
                    if b == a or loads[b] + dem[v] > cap + 1e-9:
                        continue
                    seq = [0, *rb, 0]
                    for t in range(len(seq) - 1):
                        cost = dist[seq[t], v] + dist[v, seq[t + 1]] - dist[seq[t], seq[t + 1]] - gain
                        if cost < best:
                            best, best_at = cost, (b, t)
                if best_at is not None:
                    b, t = best_at
                    ra.pop(pos)
                    routes[b].insert(t, v)
                    loads[a] -= dem[v]
                    loads[b] += dem[v]
                    improved = True
                    break
            if improved:
                break
        routes_nz = [r for r in routes if r]
        if len(routes_nz) != len(routes):
            loads = [float(dem[r].sum()) for r in routes_nz]
            routes = routes_nz
        if improved:
            continue
        # swap
        for a in range(len(routes)):
            for b in range(a + 1, len(routes)):
                ra, rb = routes[a], routes[b]
                base = _route_len(dist, ra) + _route_len(dist, rb)
                for i in range(len(ra)):
                    for j in range(len(rb)):
                        u, v = ra[i], rb[j]
                        if loads[a] - dem[u] + dem[v] > cap + 1e-9 or loads[b] - dem[v] + dem[u] > cap + 1e-9:
                            continue
                        ra[i], rb[j] = v, u
                        if _route_len(dist, ra) + _route_len(dist, rb) < base - eps:
                            loads[a] += dem[v] - dem[u]
                            loads[b] += dem[u] - dem[v]
                            improved = True
                            break
                        ra[i], rb[j] = u, v
                    if improved:
                        break
                if improved:
                    break
            if improved:
                break
    return CyclicSolution.from_routes(routes)


def local_search(instance: Instance, solution: CyclicSolution) -> CyclicSolution:
    if instance.kind == TSP:
        return tsp_local_search(instance, solution)
    return cvrp_local_search(instance, solution)


def local_search_label(
    instance: Instance,
    budget: int = 10,
    rng: np.random.Generator | None = None,
    init: CyclicSolution | None = None,
) -> CyclicSolution:
    """Near-optimal label: descent from cheapest insertion, then ``budget`` perturbed restarts.

    TSP restarts kick the incumbent with a double bridge; CVRP restarts rebuild
    with random node order.  Only strict improvements replace the incumbent.
    """
    rng = rng if rng is not None else make_rng(0)
    start = init if init is not None else construct(instance, "cheapest", NEAREST, make_rng(0))
    best = local_search(instance, start)
    best_len = solution_length(instance, best)
    for _ in range(budget):
        if instance.kind == TSP:
            if instance.n_nodes < 8:
                break
            cand = local_search(instance, _double_bridge(best.order, rng))
        else:
            cand = local_search(instance, construct(instance, "cheapest", RANDOM, rng))
        cand_len = solution_length(instance, cand)
        if cand_len < best_len - 1e-9:
            best, best_len = cand, cand_len
    return best


def label_instance(instance: Instance, budget: int = 10, rng=None) -> CyclicSolution:
    if instance.kind == TSP and instance.n_nodes <= HELD_KARP_MAX_NODES:
        return held_karp(instance)[0]
    return local_search_label(instance, budget, rng)


# -- TSPLIB / CVRPLIB -----------------------------------------------------

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION", "EDGE_WEIGHT_SECTION", "DISPLAY_DATA_SECTION")


def _parse_lib(text: str) -> tuple[dict, dict]:
    header: dict[str, str] = {}
    sections: dict[str, list[list[str]]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        key = line.split(":")[0].strip().upper() if ":" in line else line.split()[0].upper()
        if key in _SECTIONS:
            current = key
            sections[current] = []
            continue
        if current is None or (":" in line and not re.match(r"^-?\d", line)):
            if ":" not in line:
                raise MalformedSection(f"unexpected line {line!r}")
            k, v = line.split(":", 1)
            header[k.strip().upper()] = v.strip()
            current = None
            continue
        sections[current].append(line.split())
    return header, sections


def _coords(header: dict, sections: dict) -> tuple[list[int], np.ndarray]:
    if "DIMENSION" not in header:
        raise MalformedSection("missing DIMENSION")
    dim = int(header["DIMENSION"])
    ewt = header.get("EDGE_WEIGHT_TYPE", "").upper()
    if ewt != "EUC_2D":
        raise UnsupportedEdgeWeightType(f"only EUC_2D is supported, got {ewt or 'none'}")
    rows = sections.get("NODE_COORD_SECTION")
    if rows is None:
        raise MalformedSection("missing NODE_COORD_SECTION")
    if len(rows) != dim:
        raise MalformedSection(f"DIMENSION is {dim} but NODE_COORD_SECTION has {len(rows)} rows")
    try:
        ids = [int(r[0]) for r in rows]
        xy = np.array([[float(r[1]), float(r[2])] for r in rows])
    except (ValueError, IndexError) as exc:
        raise MalformedSection(f"bad coordinate row: {exc}") from exc
    if len(set(ids)) != dim:
        raise MalformedSection("duplicate node ids")
    return ids, xy


def parse_tsplib(text: str) -> Instance:
    header, sections = _parse_lib(text)
    kind = header.get("TYPE", "TSP").split()[0].upper()
    if kind != "TSP":
        raise MalformedSection(f"expected TYPE TSP, got {kind}")
    _, xy = _coords(header, sections)
    return Instance(TSP, xy, name=header.get("NAME", ""))


def parse_cvrplib(text: str) -> Instance:
    header, sections = _parse_lib(text)
    kind = header.get("TYPE", "CVRP").split()[0].upper()
    if kind != "CVRP":
        raise MalformedSection(f"expected TYPE CVRP, got {kind}")
    if "CAPACITY" not in header:
        raise MalformedSection("missing CAPACITY")
    ids, xy = _coords(header, sections)
    rows = sections.get("DEMAND_SECTION")
    if rows is None:
        raise MissingDemand("missing DEMAND_SECTION")
    dem = {int(r[0]): float(r[1]) for r in rows}
    if set(dem) != set(ids):
        raise MissingDemand("DEMAND_SECTION does not cover every node")
    depot_rows = [int(r[0]) for r in sections.get("DEPOT_SECTION", []) if int(r[0]) != -1]
    depot = depot_rows[0] if depot_rows else ids[0]
    if depot not in ids:
        raise MalformedSection(f"depot {depot} is not a node")
    order = [depot] + [i for i in ids if i != depot]
    pos = {nid: k for k, nid in enumerate(ids)}
    coords = xy[[pos[i] for i in order]]
    demands = np.array([dem[i] for i in order])
    if demands[0] != 0:
        log.warning("depot demand %s normalised to 0", demands[0])
        demands[0] = 0.0
    return Instance(CVRP, coords, demands, float(header["CAPACITY"]), name=header.get("NAME", ""))


def read_lib_file(path) -> Instance:
    text = Path(path).read_text()
    header, _ = _parse_lib(text)
    if header.get("TYPE", "").split()[:1] == ["CVRP"]:
        return parse_cvrplib(text)
    return parse_tsplib(text)


def tsplib_length(instance: Instance, solution: CyclicSolution) -> float:
    """Tour length with every edge rounded to the nearest integer, as TSPLIB's EUC_2D does."""
    validate_solution(instance, solution)
    if instance.kind == TSP:
        seqs = [list(solution.order)]
    else:
        seqs = [[0, *r] for r in solution.routes()]
    total = 0
    for s in seqs:
        for a, b in zip(s, s[1:] + s[:1]):
            total += int(math.hypot(*(instance.coords[a] - instance.coords[b])) + 0.5)
    return float(total)


# -- JSON Lines files -----------------------------------------------------


def write_instances(path, instances: Iterable[Instance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict()) + "\n")


def write_dataset(path, examples: Iterable[LabeledExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            rec = {"instance": ex.instance.to_dict()}
            if ex.label is not None:
                rec["label"] = list(ex.label.order)
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list[LabeledExample]:
    """Read dataset lines ``{"instance": ..., "label": [...]}``; bare instance lines are accepted too."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                inst_d = rec["instance"] if "instance" in rec else rec
                inst = Instance.from_dict(inst_d)
                label = CyclicSolution(tuple(rec["label"])) if rec.get("label") is not None else None
                out.append(LabeledExample(inst, label))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, InsertNcoError) as exc:
                raise CorruptLine(lineno, str(exc)) from exc
    return out


def write_solutions(path, records: Iterable[dict]) -> None:
    """Solution lines: ``{"name", "order", "length"}``; timing lives in a sidecar file."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_solutions(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["order"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorruptLine(lineno, str(exc)) from exc
            out.append(rec)
    return out
