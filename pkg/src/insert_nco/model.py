"""Attention model that scores insertion positions.

The encoder is a linear projection followed by one attention layer.  At each
construction step the decoder sees three kinds of tokens: the node being
inserted, every position (edge) of the partial solution, and optionally the
remaining unvisited nodes.  Position tokens are the concatenated embeddings
of the edge's two endpoints (plus the route's spare capacity for CVRP).
``L`` attention layers refine the tokens, a linear head scores the position
tokens, and a masked softmax turns the scores into insertion probabilities.

Attention layers carry residual connections but no normalisation.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .construct import (
    InsertionState,
    NoValidPosition,
    Policy,
    Position,
    _position,
    position_arrays,
)
from .core import CVRP, Instance, InsertNcoError, minmax_scale

CURRENT, POSITION, UNVISITED, PAD = 0, 1, 2, -1

MAGIC = b"L2CI"
FORMAT_VERSION = 1


class ShapeMismatch(InsertNcoError):
    pass


class CorruptFile(InsertNcoError):
    pass


class VersionMismatch(InsertNcoError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    layers: int = 9
    heads: int = 8
    d_ff: int = 512
    input_dim: int = 2
    include_unvisited: bool = True
    k_filter: int | None = None

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("embedding dim must be divisible by the head count")
        if self.layers < 1:
            raise ValueError("need at least one decoder layer")
        if self.input_dim not in (2, 3):
            raise ValueError("input_dim is 2 (TSP) or 3 (CVRP)")

    @property
    def d_k(self) -> int:
        return self.d // self.heads


PRESETS = {
    "full": dict(d=128, layers=9, heads=8, d_ff=512),
    "desk": dict(d=64, layers=3, heads=4, d_ff=256),
}

DEFAULT_K = {"tsp": 100, "cvrp": 200}


def preset_config(name: str, kind: str = "tsp", **overrides) -> ModelConfig:
    kw = dict(PRESETS[name])
    kw["input_dim"] = 3 if kind == CVRP else 2
    kw.update(overrides)
    return ModelConfig(**kw)


def _uniform(shape, bound):
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class AttentionLayer(nn.Module):
    """Multi-head self-attention and a ReLU feed-forward block, each with a skip connection.

    Query/key/value matrices hold all heads side by side: columns
    ``[h * d_k, (h + 1) * d_k)`` belong to head ``h``.
    """

    def __init__(self, d: int, heads: int, d_ff: int):
        super().__init__()
        self.d, self.heads, self.d_ff = d, heads, d_ff
        bound = 1 / math.sqrt(d)
        self.wq = _uniform((d, d), bound)
        self.wk = _uniform((d, d), bound)
        self.wv = _uniform((d, d), bound)
        self.wo = _uniform((d, d), bound)
        self.w1 = _uniform((d, d_ff), bound)
        self.b1 = nn.Parameter(torch.zeros(d_ff))
        self.w2 = _uniform((d_ff, d), bound)
        self.b2 = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise ShapeMismatch(f"expected last dim {self.d}, got {x.shape[-1]}")
        B, T, d = x.shape
        h, dk = self.heads, d // self.heads
        q = (x @ self.wq).view(B, T, h, dk).transpose(1, 2)
        k = (x @ self.wk).view(B, T, h, dk).transpose(1, 2)
        v = (x @ self.wv).view(B, T, h, dk).transpose(1, 2)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        heads = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, scale=1 / math.sqrt(d))
        x = heads.transpose(1, 2).reshape(B, T, d) @ self.wo + x
        return torch.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2 + x


@dataclass
class TokenBatch:
    """Decoder inputs for a batch of construction states, padded to a common length.

    ``a``/``b`` index rows of the flattened node-embedding matrix: ``a`` is
    the node for current/unvisited tokens and the predecessor for position
    tokens, ``b`` the successor.  ``cap`` is the normalised spare capacity of a
    position's route (CVRP only).
    """

    kind: torch.Tensor
    a: torch.Tensor
    b: torch.Tensor
    cap: torch.Tensor
    feasible: torch.Tensor

    @property
    def key_mask(self) -> torch.Tensor:
        return self.kind != PAD

    @property
    def output_mask(self) -> torch.Tensor:
        return (self.kind == POSITION) & self.feasible

    @classmethod
    def from_arrays(cls, rows: Sequence[dict], offsets: Sequence[int] | None = None) -> "TokenBatch":
        """Stack per-state token dicts (see :func:`state_tokens`), shifting node ids by ``offsets``."""
        T = max(len(r["kind"]) for r in rows)
        B = len(rows)
        kind = np.full((B, T), PAD, dtype=np.int64)
        a = np.zeros((B, T), dtype=np.int64)
        b = np.zeros((B, T), dtype=np.int64)
        cap = np.zeros((B, T), dtype=np.float32)
        feas = np.zeros((B, T), dtype=bool)
        for i, r in enumerate(rows):
            m = len(r["kind"])
            off = offsets[i] if offsets is not None else 0
            kind[i, :m] = r["kind"]
            a[i, :m] = r["a"] + off
            b[i, :m] = r["b"] + off
            cap[i, :m] = r["cap"]
            feas[i, :m] = r["feasible"]
        return cls(*(torch.from_numpy(t) for t in (kind, a, b, cap, feas)))


class InsertionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        bound = 1 / math.sqrt(d)
        self.w_in = _uniform((config.input_dim, d), bound)
        self.b_in = nn.Parameter(torch.zeros(d))
        self.encoder = AttentionLayer(d, config.heads, config.d_ff)
        self.w_cur = _uniform((d, d), bound)
        self.w_unv = _uniform((d, d), bound)
        pos_in = 2 * d + (1 if config.input_dim == 3 else 0)
        self.w_pos = _uniform((pos_in, d), bound)
        self.decoder = nn.ModuleList(AttentionLayer(d, config.heads, config.d_ff) for _ in range(config.layers))
        self.w_out = _uniform((d, 1), bound)
        self.b_out = nn.Parameter(torch.zeros(1))

    @property
    def dtype(self) -> torch.dtype:
        return self.w_in.dtype

    def encode(self, features: torch.Tensor, node_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``(B, N, input_dim)`` node features -> ``(B, N, d)`` embeddings."""
        if features.shape[-1] != self.config.input_dim:
            raise ShapeMismatch(f"expected {self.config.input_dim} features, got {features.shape[-1]}")
        return self.encoder(features @ self.w_in + self.b_in, node_mask)

    def token_inputs(self, h_flat: torch.Tensor, tokens: TokenBatch) -> torch.Tensor:
        ha = h_flat[tokens.a]
        hb = h_flat[tokens.b]
        pos = torch.cat([ha, hb], dim=-1)
        if self.config.input_dim == 3:
            pos = torch.cat([pos, tokens.cap.to(ha.dtype)[..., None]], dim=-1)
        kind = tokens.kind[..., None]
        x = torch.where(kind == CURRENT, ha @ self.w_cur, ha @ self.w_unv)
        return torch.where(kind == POSITION, pos @ self.w_pos, x)

    def decode(self, h_flat: torch.Tensor, tokens: TokenBatch) -> torch.Tensor:
        """Log insertion probabilities per token slot; ``-inf`` on everything but feasible positions."""
        x = self.token_inputs(h_flat, tokens)
        key_mask = tokens.key_mask
        for layer in self.decoder:
            x = layer(x, key_mask)
        logits = (x @ self.w_out).squeeze(-1) + self.b_out
        logits = logits.double().masked_fill(~tokens.output_mask, float("-inf"))
        return torch.log_softmax(logits, dim=-1)


def node_features(instance: Instance) -> np.ndarray:
    """Min-max scaled coordinates, plus demand/capacity for CVRP."""
    coords = minmax_scale(instance).coords
    if instance.kind == CVRP:
        return np.concatenate([coords, (instance.demands / instance.capacity)[:, None]], axis=1)
    return coords


def state_tokens(state: InsertionState, config: ModelConfig, coords: np.ndarray | None = None) -> dict:
    """Token description of one state: ``[current, positions..., unvisited...]``.

    With ``config.k_filter`` only the ``k`` feasible positions and ``k``
    unvisited nodes nearest the current node are kept (the CVRP new-route
    slot always stays).  A position's distance to the current node is the
    smaller of its two endpoint distances.  ``pos_index`` maps each position
    token back to its index in ``state.partial``.
    """
    inst = state.instance
    cur = state.current_node
    if cur is None:
        raise InsertNcoError("state has no current node")
    coords = inst.coords if coords is None else coords
    pred, succ, remaining, feasible = position_arrays(state)
    if not feasible.any():
        raise NoValidPosition("no feasible position")
    pos_idx = np.arange(len(pred))
    unv = state.unvisited_nodes if config.include_unvisited else np.zeros(0, dtype=np.int64)
    k = config.k_filter
    if k is not None:
        dc = np.sqrt(((coords - coords[cur]) ** 2).sum(-1))
        keep = np.flatnonzero(feasible)
        fixed = np.zeros(0, dtype=np.int64)
        if inst.kind == CVRP:
            fixed, keep = keep[-1:], keep[:-1]  # new-route slot is always feasible and last
        pd = np.minimum(dc[pred[keep]], dc[succ[keep]])
        keep = np.sort(keep[np.argsort(pd, kind="stable")[:k]])
        pos_idx = np.concatenate([keep, fixed])
        if len(unv) > k:
            unv = np.sort(unv[np.argsort(dc[unv], kind="stable")[:k]])
    P, U = len(pos_idx), len(unv)
    kind = np.concatenate([[CURRENT], np.full(P, POSITION), np.full(U, UNVISITED)]).astype(np.int64)
    a = np.concatenate([[cur], pred[pos_idx], unv]).astype(np.int64)
    b = np.concatenate([[cur], succ[pos_idx], unv]).astype(np.int64)
    cap = np.zeros(1 + P + U, dtype=np.float32)
    if remaining is not None:
        cap[1 : 1 + P] = remaining[pos_idx] / inst.capacity
    feas = np.zeros(1 + P + U, dtype=bool)
    feas[1 : 1 + P] = feasible[pos_idx]
    return dict(kind=kind, a=a, b=b, cap=cap, feasible=feas, pos_index=pos_idx)


def encode_instances(model: InsertionModel, instances: Sequence[Instance]) -> tuple[torch.Tensor, int]:
    """Embeddings of several instances, node-padded and flattened to ``(B * N, d)``."""
    feats = [node_features(inst) for inst in instances]
    N = max(len(f) for f in feats)
    x = np.zeros((len(feats), N, model.config.input_dim))
    mask = np.zeros((len(feats), N), dtype=bool)
    for i, f in enumerate(feats):
        x[i, : len(f)] = f
        mask[i, : len(f)] = True
    h = model.encode(torch.as_tensor(x, dtype=model.dtype), torch.from_numpy(mask))
    return h.reshape(-1, model.config.d), N


@torch.no_grad()
def decode_step(state: InsertionState, model: InsertionModel, h: torch.Tensor | None = None) -> np.ndarray:
    """Insertion probabilities over all positions of ``state.partial`` (zero where masked)."""
    if h is None:
        h, _ = encode_instances(model, [state.instance])
    tok = state_tokens(state, model.config, minmax_scale(state.instance).coords)
    logp = model.decode(h, TokenBatch.from_arrays([tok]))[0]
    p = np.zeros(len(state.partial))
    sel = tok["kind"] == POSITION
    p[tok["pos_index"]] = logp[torch.from_numpy(sel)].exp().numpy()
    return p


def pick(p: np.ndarray, mode: str = "argmax", rng: np.random.Generator | None = None) -> int:
    if mode == "argmax":
        return int(np.flatnonzero(p == p.max())[0])
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        cdf = np.cumsum(p)
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))
    raise ValueError(f"unknown decode mode {mode!r}")


class NeuralPolicy(Policy):
    """Position policy backed by an :class:`InsertionModel`.

    Node embeddings are computed once per instance and cached, so repeated
    construction or repair on the same instances only pays for decoding.
    """

    name = "neural"

    def __init__(self, model: InsertionModel, mode: str = "argmax", k_filter="model", cache_size: int = 4096):
        self.model = model.eval()
        self.mode = mode
        self.config = model.config if k_filter == "model" else replace(model.config, k_filter=k_filter)
        self.cache_size = cache_size
        self._cache: dict[int, tuple[Instance, torch.Tensor, np.ndarray]] = {}

    def _embedding(self, inst: Instance):
        hit = self._cache.get(id(inst))
        if hit is None or hit[0] is not inst:
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            self._embed_many([inst])
            hit = self._cache[id(inst)]
        return hit

    @torch.no_grad()
    def _embed_many(self, instances: Sequence[Instance]):
        by_n: dict[int, list[Instance]] = {}
        for inst in instances:
            by_n.setdefault(inst.n_nodes, []).append(inst)
        for group in by_n.values():
            h, N = encode_instances(self.model, group)
            for i, inst in enumerate(group):
                self._cache[id(inst)] = (inst, h[i * N : (i + 1) * N], minmax_scale(inst).coords)

    def probabilities(self, states: Sequence[InsertionState]) -> list[np.ndarray]:
        missing = {id(s.instance): s.instance for s in states if self._cache.get(id(s.instance), (None,))[0] is not s.instance}
        if missing:
            if len(self._cache) + len(missing) > self.cache_size:
                self._cache.clear()
            self._embed_many(list(missing.values()))
        rows, hs, offsets = [], [], []
        off = 0
        for s in states:
            _, h, coords = self._embedding(s.instance)
            rows.append(state_tokens(s, self.config, coords))
            hs.append(h)
            offsets.append(off)
            off += len(h)
        with torch.no_grad():
            logp = self.model.decode(torch.cat(hs), TokenBatch.from_arrays(rows, offsets))
        out = []
        for s, r, lp in zip(states, rows, logp.numpy()):
            p = np.zeros(len(s.partial))
            m = len(r["kind"])
            sel = r["kind"] == POSITION
            p[r["pos_index"]] = np.exp(lp[:m][sel])
            out.append(p)
        return out

    def choose_batch(self, states, rngs) -> list[Position]:
        return [_position(s, pick(p, self.mode, r)) for s, p, r in zip(states, self.probabilities(states), rngs)]

    def choose(self, state, rng) -> Position:
        return self.choose_batch([state], [rng])[0]


def neural_policy(state: InsertionState, model: InsertionModel, mode: str = "argmax", rng=None) -> Position:
    return NeuralPolicy(model, mode).choose(state, rng)


# -- weights file ---------------------------------------------------------


def save_params(model: InsertionModel, path) -> None:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<IIIIIB", cfg.d, cfg.layers, cfg.heads, cfg.d_ff, cfg.input_dim, int(cfg.include_unvisited)))
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path, k_filter: int | None = None) -> InsertionModel:
    data = Path(path).read_bytes()
    if len(data) < 6:
        raise CorruptFile("file too short for a header")
    if data[:4] != MAGIC:
        raise VersionMismatch(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format version {version}")
    pos = 6
    try:
        d, layers, heads, d_ff, input_dim, unv = struct.unpack_from("<IIIIIB", data, pos)
        pos += struct.calcsize("<IIIIIB")
        cfg = ModelConfig(d, layers, heads, d_ff, input_dim, bool(unv), k_filter)
        arrays = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CorruptFile("truncated array name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(data):
                raise CorruptFile(f"array {name!r} is truncated")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptFile(str(exc)) from exc
    model = InsertionModel(cfg)
    expected = model.state_dict()
    if set(arrays) != set(expected):
        raise CorruptFile(f"array set mismatch: missing {sorted(set(expected) - set(arrays))}")
    state = {}
    for name, ref in expected.items():
        if tuple(arrays[name].shape) != tuple(ref.shape):
            raise CorruptFile(f"array {name!r} has shape {arrays[name].shape}, expected {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arrays[name].astype(np.float32))
    model.load_state_dict(state)
    return model
