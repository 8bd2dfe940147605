"""Acceptance checks, one test per criterion.

Each test records a single ``CRITERION n: PASS|FAIL ...`` line, echoed to
stdout and repeated in pytest's terminal summary.  Criteria 5, 7 and 8 need
the trained desk models; those are built on first use and cached (see
``desk.py``), which takes a while on one CPU.
"""

import itertools
import time

import numpy as np
import torch

import desk
import oracle
from conftest import DATA
from insert_nco.construct import NEAREST, POLAR, RANDOM, construct, construct_many
from insert_nco.core import CVRP, TSP, cycle_length, make_rng, solution_length, validate_solution
from insert_nco.data import (
    LabeledExample,
    gen_uniform_cvrp,
    gen_uniform_tsp,
    held_karp,
    local_search_label,
    read_dataset,
    read_lib_file,
    write_dataset,
)
from insert_nco.model import InsertionModel, ModelConfig, NeuralPolicy, decode_step, encode_instances, load_params, save_params
from insert_nco.reconstruct import improve_many
from insert_nco.train import batch_loss, build_episode

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def mean_gap(instances, sols, refs) -> float:
    gaps = [(solution_length(i, s) - r) / r for i, s, r in zip(instances, sols, refs)]
    return 100.0 * float(np.mean(gaps))


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_held_karp_exact():
    t0 = time.perf_counter()
    rng = make_rng(101)
    perms = np.array(list(itertools.permutations(range(1, 9))))
    worst = 0.0
    for inst in gen_uniform_tsp(9, 50, rng):
        dist = inst.distance_matrix()
        tours = np.concatenate([np.zeros((len(perms), 1), int), perms], axis=1)
        lengths = dist[tours, np.roll(tours, -1, axis=1)].sum(1)
        tour, length = held_karp(inst)
        worst = max(worst, abs(length - lengths.min()), abs(solution_length(inst, tour) - length))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 60, f"max |HK - brute force| = {worst:.1e} over 50 n=9 instances ({elapsed:.1f}s)")


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = ModelConfig(d=8, layers=2, heads=2, d_ff=16)
    model = InsertionModel(cfg).double()
    rng = make_rng(102)
    exs = [LabeledExample(i, held_karp(i)[0]) for i in gen_uniform_tsp(10, 2, rng)]
    eps = [build_episode(ex, cfg, rng) for ex in exs]
    errs = oracle.finite_difference_errors(model, lambda m: batch_loss(m, eps), h=1e-5)
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - t0
    ok = errs[worst] < 1e-4 and len(errs) == len(list(model.parameters())) and elapsed < 60
    report(2, ok, f"max relative error {errs[worst]:.1e} ({worst}) over {len(errs)} parameter groups ({elapsed:.1f}s)")


# -- 3 ---------------------------------------------------------------------


def test_criterion_3_forward_oracle():
    rng = make_rng(103)
    worst = 0.0
    for trial in range(20):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.choice([2, 4, 8]))
        kind = CVRP if trial % 2 else TSP
        cfg = ModelConfig(d=d, layers=int(rng.integers(1, 4)), heads=heads, d_ff=int(rng.choice([8, 16, 32])),
                          input_dim=3 if kind == CVRP else 2, include_unvisited=bool(trial % 3))
        torch.manual_seed(trial)
        model = InsertionModel(cfg)
        # attention layer on a random matrix up to 16 x 32
        m = int(rng.integers(1, 17))
        layer = model.decoder[0]
        x = torch.from_numpy(rng.normal(size=(1, m, d))).float()
        W = {k: v.detach().double().numpy() for k, v in layer.state_dict().items()}
        worst = max(worst, float(np.abs(layer(x)[0].detach().numpy() - oracle.attention_layer(x[0].double().numpy(), W, "", heads)).max()))
        # encoder and one decode step on a random partial solution
        n = int(rng.integers(3, 16))
        inst = gen_uniform_tsp(n, 1, rng)[0] if kind == TSP else gen_uniform_cvrp(n, 15, rng)[0]
        h, _ = encode_instances(model, [inst])
        worst = max(worst, float(np.abs(h.detach().numpy() - oracle.encode(model, inst)).max()))
        state = _partial_state(inst, rng)
        worst = max(worst, float(np.abs(decode_step(state, model) - oracle.decode_probs(model, state)).max()))
    report(3, worst <= 1e-6, f"max elementwise difference {worst:.1e} over 20 random shapes")


def _partial_state(inst, rng):
    from insert_nco.construct import cheapest_insertion_policy, initial_state, insert, select_next_node

    sel = POLAR if inst.kind == CVRP else NEAREST
    s = initial_state(inst, rng, "random")
    for _ in range(int(rng.integers(0, max(inst.n_customers - 2, 1)))):
        select_next_node(s, sel, rng)
        insert(s, cheapest_insertion_policy(s))
    select_next_node(s, sel, rng)
    return s


# -- 4 ---------------------------------------------------------------------


def test_criterion_4_structural():
    rng = make_rng(104)
    failures, checks, worst = 0, 0, 0.0
    for k in range(2000):
        kind = TSP if k < 1000 else CVRP
        n = int(rng.integers(5, 201))
        inst = gen_uniform_tsp(n, 1, rng)[0] if kind == TSP else gen_uniform_cvrp(n, float(rng.integers(10, 51)), rng)[0]
        policy = "cheapest" if k % 2 else "random"
        selector = [NEAREST, RANDOM, POLAR][k % 3] if kind == CVRP else [NEAREST, RANDOM][k % 2]
        prev = [None]

        def hook(state, pos, delta):
            nonlocal worst
            part = state.partial if kind == TSP else state.partial[:-1]
            now = cycle_length(inst.coords, part)
            if prev[0] is not None:
                worst = max(worst, abs(now - prev[0] - delta))
            prev[0] = now

        sol = construct(inst, policy, selector, rng, start="random" if kind == TSP else 0, on_step=hook)
        out = improve_many([inst], [sol], "cheapest", 3, min(30, n - 2), [rng], ["distance", "sequence"][k % 2], selector)[0]
        for s in (sol, out):
            checks += 1
            try:
                validate_solution(inst, s)
            except Exception:
                failures += 1
        failures += solution_length(inst, out) > solution_length(inst, sol) + 1e-9
    ok = failures == 0 and worst <= 1e-9
    report(4, ok, f"{failures} invalid of {checks} solutions (1000 TSP + 1000 CVRP, n in [5, 200]); max delta-identity error {worst:.1e}")


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_learning_signal():
    model, summary = desk.desk_model(True)
    test = desk.tsp20_test()
    insts = [ex.instance for ex in test]
    refs = [solution_length(ex.instance, ex.label) for ex in test]
    neural = construct_many(insts, NeuralPolicy(model, k_filter=100), NEAREST, [make_rng(i) for i in range(len(insts))])
    rand = construct_many(insts, "random", NEAREST, [make_rng(i) for i in range(len(insts))])
    g_neural, g_rand = mean_gap(insts, neural, refs), mean_gap(insts, rand, refs)
    drop = 1 - summary["final_val_loss"] / summary["init_val_loss"]
    ok = drop >= 0.5 and g_neural < 5 and g_rand > 20
    report(
        5,
        ok,
        f"val loss {summary['init_val_loss']:.3f} -> {summary['final_val_loss']:.3f} (drop {100 * drop:.1f}%); "
        f"greedy neural gap {g_neural:.2f}%; random-position gap {g_rand:.2f}% on 1000 TSP20",
    )


# -- 6 ---------------------------------------------------------------------


def test_criterion_6_reconstruction():
    insts = gen_uniform_tsp(50, 100, make_rng(106))
    starts = [construct(i) for i in insts]
    out = improve_many(insts, starts, "cheapest", 200, min(30, 50 - 2), [make_rng(k) for k in range(100)])
    before = np.array([solution_length(i, s) for i, s in zip(insts, starts)])
    after = np.array([solution_length(i, s) for i, s in zip(insts, out)])
    reduction = 100 * (1 - after.mean() / before.mean())
    worse = int((after > before + 1e-12).sum())
    report(6, reduction >= 3 and worse == 0, f"mean length {before.mean():.4f} -> {after.mean():.4f} ({reduction:.2f}% shorter); {worse} instances got longer")


# -- 7 ---------------------------------------------------------------------

ABLATION_ALPHA = 30


def test_criterion_7_destruction_ablation():
    model, _ = desk.desk_model(True)
    insts = gen_uniform_tsp(200, 50, make_rng(107))
    policy = NeuralPolicy(model, k_filter=100)
    starts = construct_many(insts, policy, NEAREST, [make_rng(k) for k in range(50)])
    means = {}
    for destroy in ("distance", "sequence"):
        out = improve_many(insts, starts, policy, 500, ABLATION_ALPHA, [make_rng(1000 + k) for k in range(50)], destroy)
        means[destroy] = float(np.mean([solution_length(i, s) for i, s in zip(insts, out)]))
    start = float(np.mean([solution_length(i, s) for i, s in zip(insts, starts)]))
    report(
        7,
        means["distance"] <= means["sequence"],
        f"50 TSP200, I=500, alpha={ABLATION_ALPHA}: start {start:.4f}, distance-based {means['distance']:.4f}, sequence-based {means['sequence']:.4f}",
    )


# -- 8 ---------------------------------------------------------------------


def test_criterion_8_unvisited_ablation():
    test = desk.tsp20_test()
    insts = [ex.instance for ex in test]
    refs = [solution_length(ex.instance, ex.label) for ex in test]
    gaps = {}
    for flag in (True, False):
        model, _ = desk.desk_model(flag)
        sols = construct_many(insts, NeuralPolicy(model, k_filter=100), NEAREST, [make_rng(i) for i in range(len(insts))])
        gaps[flag] = mean_gap(insts, sols, refs)
    report(8, gaps[False] > gaps[True], f"TSP20 greedy gap with unvisited tokens {gaps[True]:.2f}%, without {gaps[False]:.2f}%")


# -- 9 ---------------------------------------------------------------------


def test_criterion_9_formats(tmp_path):
    eil = read_lib_file(DATA / "eil51.tsp")
    vrp = read_lib_file(DATA / "synthetic-n45-k7.vrp")
    parsed = eil.n_nodes == 51 and eil.name == "eil51" and vrp.n_customers == 44 and len(vrp.demands) == 45 and vrp.demands[0] == 0
    torch.manual_seed(9)
    model = InsertionModel(ModelConfig(d=16, layers=2, heads=4, d_ff=32, input_dim=3, include_unvisited=False))
    save_params(model, tmp_path / "a.bin")
    back = load_params(tmp_path / "a.bin")
    save_params(back, tmp_path / "b.bin")
    weights_ok = (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes() and all(
        torch.equal(x, y) for x, y in zip(model.state_dict().values(), back.state_dict().values())
    )
    rng = make_rng(109)
    exs = [LabeledExample(i, held_karp(i)[0]) for i in gen_uniform_tsp(12, 5, rng)]
    exs += [LabeledExample(i, local_search_label(i, 1, rng)) for i in gen_uniform_cvrp(20, None, rng, 5)]
    exs += [LabeledExample(eil, None), LabeledExample(vrp, None)]
    write_dataset(tmp_path / "d.jsonl", exs)
    again = read_dataset(tmp_path / "d.jsonl")
    write_dataset(tmp_path / "e.jsonl", again)
    data_ok = (tmp_path / "d.jsonl").read_bytes() == (tmp_path / "e.jsonl").read_bytes() and all(
        a.instance.coords.tobytes() == b.instance.coords.tobytes() and a.label == b.label for a, b in zip(exs, again)
    )
    report(
        9,
        parsed and weights_ok and data_ok,
        f"eil51 -> {eil.n_nodes} nodes; CVRP file -> {vrp.n_customers} customers + depot; "
        f"weights round trip {'bitwise' if weights_ok else 'MISMATCH'}; dataset round trip {'bitwise' if data_ok else 'MISMATCH'}",
    )
