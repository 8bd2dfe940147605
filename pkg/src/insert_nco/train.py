"""Supervised training from labelled solutions.

Every training episode rebuilds a labelled solution node by node.  The partial
solution always stays a sub-cycle of the label (teacher forcing), so each step
has a single correct position: the edge joining the current node's nearest
already-visited neighbours along the label.  The model is trained to put its
probability mass on that edge.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .construct import (
    NEAREST,
    InsertionState,
    Position,
    _position,
    initial_state,
    insert,
    select_next_node,
)
from .core import CVRP, TSP, CyclicSolution, InsertNcoError, minmax_scale
from .data import LabeledExample
from .model import (
    InsertionModel,
    ModelConfig,
    TokenBatch,
    decode_step,
    encode_instances,
    state_tokens,
)

log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-12


class InconsistentPartial(InsertNcoError):
    pass


class EmptyDataset(InsertNcoError):
    pass


class NoForwardRecorded(InsertNcoError):
    pass


def _label_neighbours(label: CyclicSolution, kind: str, node: int, visited) -> tuple[int, int]:
    """First visited node walking backwards / forwards from ``node`` along the label."""
    if kind == TSP:
        seq = list(label.order)
        n = len(seq)
        at = seq.index(node)
        back = next(seq[(at - s) % n] for s in range(1, n + 1) if seq[(at - s) % n] in visited or seq[(at - s) % n] == node)
        fwd = next(seq[(at + s) % n] for s in range(1, n + 1) if seq[(at + s) % n] in visited or seq[(at + s) % n] == node)
        return back, fwd
    for r in label.routes():
        if node in r:
            seq = [0, *r, 0]
            at = seq.index(node)
            back = next(v for v in reversed(seq[:at]) if v == 0 or v in visited)
            fwd = next(v for v in seq[at + 1 :] if v == 0 or v in visited)
            return back, fwd
    raise InconsistentPartial(f"node {node} is not in the label")


def target_position(label: CyclicSolution, state: InsertionState) -> Position:
    """The edge of ``state.partial`` the label says the current node belongs in."""
    node = state.current_node
    if node is None:
        raise InconsistentPartial("state has no current node")
    inst = state.instance
    part = state.partial
    visited = set(part)
    pred, succ = _label_neighbours(label, inst.kind, node, visited)
    if inst.kind == CVRP and pred == 0 and succ == 0:
        return _position(state, len(part) - 1)
    m = len(part)
    for i in range(m):
        if part[i] == pred and part[(i + 1) % m] == succ and not (inst.kind == CVRP and i == m - 1):
            return _position(state, i)
    for i in range(m):
        if part[i] == succ and part[(i + 1) % m] == pred and not (inst.kind == CVRP and i == m - 1):
            return _position(state, i)
    raise InconsistentPartial(f"label neighbours ({pred}, {succ}) of node {node} are not adjacent in the partial")


def teacher_forced_states(
    example: LabeledExample,
    rng: np.random.Generator,
    selector: str = NEAREST,
    start="random",
) -> Iterator[tuple[InsertionState, Position]]:
    """Yield ``(state, target)`` per step; the state is advanced after the caller resumes."""
    if example.label is None:
        raise InsertNcoError("training needs labelled examples")
    state = initial_state(example.instance, rng, start)
    while state.unvisited.any():
        select_next_node(state, selector, rng)
        target = target_position(example.label, state)
        yield state, target
        insert(state, target)


def rollout_training_episode(
    example: LabeledExample,
    model: InsertionModel,
    rng: np.random.Generator,
    selector: str = NEAREST,
    start="random",
) -> list[tuple[InsertionState, Position, np.ndarray]]:
    """One teacher-forced episode with the model's distribution recorded at every step."""
    records = []
    for state, target in teacher_forced_states(example, rng, selector, start):
        p = decode_step(state, model)
        records.append((state.copy(), target, p))
    return records


def loss(p: np.ndarray, target: int | Position) -> float:
    idx = target.index if isinstance(target, Position) else int(target)
    return -math.log(max(float(p[idx]), LOSS_FLOOR))


@dataclass
class Episode:
    example: LabeledExample
    tokens: list[dict]
    targets: list[int]  # token slot of the target position, per step


def build_episode(
    example: LabeledExample,
    config: ModelConfig,
    rng: np.random.Generator,
    selector: str = NEAREST,
    start="random",
    steps: int | None = None,
) -> Episode:
    """Token descriptions of a teacher-forced episode (optionally a random subset of its steps)."""
    cfg = replace(config, k_filter=None)
    coords = minmax_scale(example.instance).coords
    toks, targets = [], []
    for state, target in teacher_forced_states(example, rng, selector, start):
        tok = state_tokens(state, cfg, coords)
        slot = 1 + int(np.flatnonzero(tok["pos_index"] == target.index)[0])
        toks.append(tok)
        targets.append(slot)
    if steps is not None and steps < len(toks):
        keep = np.sort(rng.choice(len(toks), size=steps, replace=False))
        toks = [toks[i] for i in keep]
        targets = [targets[i] for i in keep]
    return Episode(example, toks, targets)


def batch_loss(model: InsertionModel, episodes: Sequence[Episode]) -> torch.Tensor:
    """Mean negative log-likelihood of the target positions over every step in ``episodes``."""
    h, N = encode_instances(model, [ep.example.instance for ep in episodes])
    rows, offsets, targets = [], [], []
    for i, ep in enumerate(episodes):
        rows.extend(ep.tokens)
        offsets.extend([i * N] * len(ep.tokens))
        targets.extend(ep.targets)
    logp = model.decode(h, TokenBatch.from_arrays(rows, offsets))
    picked = logp[torch.arange(len(targets)), torch.tensor(targets)]
    return -picked.clamp(min=math.log(LOSS_FLOOR)).mean()


def backward(model: InsertionModel, loss_value: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss_value`` for every named parameter."""
    if not isinstance(loss_value, torch.Tensor) or loss_value.grad_fn is None:
        raise NoForwardRecorded("loss carries no recorded forward pass")
    model.zero_grad(set_to_none=True)
    loss_value.backward()
    return {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for name, p in model.named_parameters()}


@dataclass
class TrainHyper:
    lr0: float = 1e-4
    decay: float = 0.97
    epochs: int = 1
    batch: int = 64
    steps_per_episode: int | None = None
    selector: str = NEAREST
    seed: int = 0


@dataclass
class TrainState:
    model: InsertionModel
    optimizer: torch.optim.Adam
    step: int = 0
    epoch: int = 0
    lr: float = 1e-4
    history: list[dict] = field(default_factory=list)


def lr_after(lr0: float, decay: float, epochs: int) -> float:
    return lr0 * decay**epochs


def make_episodes(dataset, config, rng, hyper: TrainHyper) -> list[Episode]:
    return [build_episode(ex, config, rng, hyper.selector, "random", hyper.steps_per_episode) for ex in dataset]


@torch.no_grad()
def evaluate_loss(model: InsertionModel, episodes: Sequence[Episode], batch: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(episodes), batch):
        chunk = episodes[i : i + batch]
        steps = sum(len(ep.targets) for ep in chunk)
        total += float(batch_loss(model, chunk)) * steps
        count += steps
    return total / max(count, 1)


def train(
    dataset: Sequence[LabeledExample],
    config: ModelConfig,
    hyper: TrainHyper,
    model: InsertionModel | None = None,
    log_csv: str | Path | None = None,
    validation: Sequence[Episode] | None = None,
) -> TrainState:
    """Adam on shuffled episode batches; the learning rate decays once per epoch.

    Appends one row per epoch (epoch, mean_loss, lr, wall_seconds) to
    ``log_csv`` if given; ``val_loss`` is recorded in the history when a
    validation set is supplied.
    """
    if not dataset:
        raise EmptyDataset("nothing to train on")
    torch.manual_seed(hyper.seed)
    rng = np.random.Generator(np.random.PCG64(hyper.seed))
    model = model if model is not None else InsertionModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr0)
    state = TrainState(model, opt, lr=hyper.lr0)
    writer = None
    if log_csv is not None:
        fh = open(log_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr", "wall_seconds"])
    try:
        for epoch in range(hyper.epochs):
            t0 = time.perf_counter()
            model.train()
            episodes = make_episodes(dataset, config, rng, hyper)
            order = rng.permutation(len(episodes))
            total, steps = 0.0, 0
            for b in range(0, len(order), hyper.batch):
                chunk = [episodes[i] for i in order[b : b + hyper.batch]]
                value = batch_loss(model, chunk)
                opt.zero_grad(set_to_none=True)
                value.backward()
                opt.step()
                state.step += 1
                n_steps = sum(len(ep.targets) for ep in chunk)
                total += float(value.detach()) * n_steps
                steps += n_steps
            mean_loss = total / max(steps, 1)
            used_lr = state.lr
            state.epoch += 1
            state.lr = lr_after(hyper.lr0, hyper.decay, state.epoch)
            for g in opt.param_groups:
                g["lr"] = state.lr
            wall = time.perf_counter() - t0
            row = {"epoch": state.epoch, "mean_loss": mean_loss, "lr": used_lr, "wall_seconds": wall}
            if validation is not None:
                model.eval()
                row["val_loss"] = evaluate_loss(model, validation)
            state.history.append(row)
            log.info("epoch %d loss %.4f lr %.3g (%.1fs)", state.epoch, mean_loss, used_lr, wall)
            if writer is not None:
                writer.writerow([state.epoch, f"{mean_loss:.6f}", f"{used_lr:.6g}", f"{wall:.2f}"])
                fh.flush()
    finally:
        if writer is not None:
            fh.close()
    model.eval()
    return state
