import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_cvrp, random_tsp, square
from insert_nco.construct import NEAREST, POLAR, InsertionState, construct, insertion_deltas
from insert_nco.core import CVRP, TSP, CyclicSolution, Instance, make_rng, solution_length, tour_edges, validate_solution
from insert_nco.data import held_karp
from insert_nco.reconstruct import (
    clamp_alpha,
    distance_destroy,
    improve,
    improve_many,
    repair,
    sequence_destroy,
)


def cluster_coords(n_nodes, center, near):
    """Nodes spread on a wide circle, with ``near`` packed tightly around ``center``."""
    ang = np.linspace(0, 2 * np.pi, n_nodes, endpoint=False)
    xy = np.stack([np.cos(ang), np.sin(ang)], 1) * 10
    for k, v in enumerate(near):
        xy[v] = xy[center] + [0.1 * (k + 1), 0.05]
    return xy


def test_tsp10_destroy_example():
    # pi1..pi10 -> nodes 0..9; centre pi5 with neighbours pi2, pi7, pi8
    inst = Instance(TSP, cluster_coords(10, 4, [1, 6, 7]))
    sol = CyclicSolution(tuple(range(10)))
    state, removed = distance_destroy(inst, sol, 3, make_rng(0), center=4)
    assert sorted(removed) == [1, 4, 6, 7]
    assert state.partial == [0, 2, 3, 5, 8, 9]
    assert state.unvisited_nodes.tolist() == [1, 4, 6, 7]


def test_cvrp10_destroy_example():
    # customers pi1..pi10 are nodes 1..10; centre pi5 with neighbours pi1, pi3, pi6
    xy = np.vstack([[[0, 0]], cluster_coords(10, 4, [0, 2, 5]) + 20])
    inst = Instance(CVRP, xy, [0] + [1] * 10, 10)
    sol = CyclicSolution((1, 2, 0, 3, 4, 5, 0, 6, 7, 0, 8, 9, 10))
    state, removed = distance_destroy(inst, sol, 3, make_rng(0), center=5)
    assert sorted(removed) == [1, 3, 5, 6]
    assert state.partial == [0, 2, 0, 4, 0, 7, 0, 8, 9, 10, 0]


def test_alpha_clamp():
    inst = random_tsp(make_rng(0), 6)
    assert clamp_alpha(inst, 300) == 4
    state, removed = distance_destroy(inst, CyclicSolution(tuple(range(6))), 300, make_rng(0))
    assert len(removed) == 5 and len(state.partial) == 1
    with pytest.raises(ValueError):
        clamp_alpha(inst, -1)


def test_sequence_destroy():
    inst = random_tsp(make_rng(0), 8)
    sol = CyclicSolution(tuple(range(8)))
    state, removed = sequence_destroy(inst, sol, 2, make_rng(0), start=2)
    assert removed == [2, 3, 4] and state.partial == [0, 1, 5, 6, 7]
    # wraparound, against the rotation-normalised oracle
    state, removed = sequence_destroy(inst, sol, 2, make_rng(0), start=6)
    rotated = list(sol.order[6:] + sol.order[:6])
    assert removed == rotated[:3] and state.partial == [v for v in sol.order if v not in rotated[:3]]
    state, removed = sequence_destroy(inst, sol, 0, make_rng(0), start=5)
    assert removed == [5]


def test_repair_with_nothing_removed():
    inst = random_tsp(make_rng(1), 7)
    sol = CyclicSolution((0, 3, 1, 6, 2, 5, 4))
    out = repair(InsertionState.start(inst, list(sol.order)), [], "cheapest", rng=make_rng(0))
    assert out == sol


def test_repair_single_node_goes_to_cheapest_edge():
    rng = make_rng(2)
    for _ in range(20):
        inst = random_tsp(rng, 9)
        sol = CyclicSolution(tuple(int(v) for v in rng.permutation(9)))
        node = int(rng.integers(9))
        partial = [v for v in sol.order if v != node]
        probe = InsertionState.start(inst, partial)
        probe.current_node = node
        best = int(np.argmin(insertion_deltas(probe)))
        out = repair(InsertionState.start(inst, partial), [node], "cheapest", rng=rng)
        want = partial[: best + 1] + [node] + partial[best + 1 :]
        assert tour_edges(out, TSP) == tour_edges(CyclicSolution(tuple(want)), TSP)


def test_improve_zero_iterations():
    inst = random_tsp(make_rng(3), 10)
    init = construct(inst, "random", rng=make_rng(0))
    assert improve(inst, init, "cheapest", 0, rng=make_rng(0)) == init
    with pytest.raises(ValueError):
        improve(inst, init, "cheapest", -1)


def test_improve_uncrosses_square():
    sq = square()
    crossing = CyclicSolution((0, 2, 1, 3))
    out = improve(sq, crossing, "cheapest", 20, alpha=30, rng=make_rng(0))
    assert solution_length(sq, out) == pytest.approx(held_karp(sq)[1]) == pytest.approx(4.0)


@given(st.integers(0, 2**32 - 1), st.integers(3, 40), st.sampled_from(["distance", "sequence"]), st.booleans())
def test_improve_monotone_and_valid(seed, n, destroy, cvrp):
    rng = make_rng(seed)
    inst = random_cvrp(rng, n, 15) if cvrp else random_tsp(rng, n)
    sel = POLAR if cvrp else NEAREST
    init = construct(inst, "random", sel, rng)
    alpha = int(rng.integers(0, 6))
    trace = []
    out = improve(inst, init, "cheapest", 15, alpha, make_rng(seed), destroy, sel, trace)
    validate_solution(inst, out)
    seq = [solution_length(inst, init), *trace]
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert trace[-1] == pytest.approx(solution_length(inst, out))
    again = improve(inst, init, "cheapest", 15, alpha, make_rng(seed), destroy, sel)
    assert again == out


@given(st.integers(0, 2**32 - 1), st.integers(3, 30))
def test_destroy_repair_preserves_customers(seed, n):
    rng = make_rng(seed)
    inst = random_cvrp(rng, n, 12)
    sol = construct(inst, "cheapest", POLAR, rng)
    for destroy in (distance_destroy, sequence_destroy):
        state, removed = destroy(inst, sol, int(rng.integers(0, n)), rng)
        kept = [v for v in state.partial if v != 0]
        assert sorted(kept + removed) == list(range(1, n + 1))
        assert not any(a == b == 0 for a, b in zip(state.partial, state.partial[1:]))  # empty routes dropped
        validate_solution(inst, repair(state, removed, "cheapest", POLAR, rng))


def test_improve_seed_reproducible():
    inst = random_cvrp(make_rng(5), 25, 15)
    init = construct(inst, "cheapest", POLAR, make_rng(0))
    a = improve(inst, init, "random", 30, alpha=5, rng=make_rng(1), selector=POLAR)
    b = improve(inst, init, "random", 30, alpha=5, rng=make_rng(1), selector=POLAR)
    assert a == b


def test_improve_many_matches_single_runs():
    rng = make_rng(6)
    insts = [random_tsp(rng, n) for n in (8, 15, 11)]
    inits = [construct(i, "random", rng=rng) for i in insts]
    many = improve_many(insts, inits, "cheapest", 10, 3, [make_rng(k) for k in range(3)])
    single = [improve(i, s, "cheapest", 10, 3, make_rng(k)) for k, (i, s) in enumerate(zip(insts, inits))]
    assert many == single
