"""Straight-line numpy forward pass, written from the layer equations alone.

Only reads weights out of the torch model; loops over heads and tokens
explicitly and shares no code with ``insert_nco.model``.
"""

import math

import numpy as np


def weights(model) -> dict:
    return {k: v.detach().double().numpy() for k, v in model.state_dict().items()}


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    if np.all(np.isneginf(z)):
        raise ValueError("all entries masked")
    e = np.exp(z - z[np.isfinite(z)].max())
    return e / e.sum()


def attention_layer(X, W, prefix, heads):
    m, d = X.shape
    dk = d // heads
    wq, wk, wv, wo = (W[prefix + s] for s in ("wq", "wk", "wv", "wo"))
    outs = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        Q, K, V = X @ wq[:, cols], X @ wk[:, cols], X @ wv[:, cols]
        head = np.zeros((m, dk))
        for i in range(m):
            a = softmax([Q[i] @ K[j] / math.sqrt(d) for j in range(m)])
            head[i] = sum(a[j] * V[j] for j in range(m))
        outs.append(head)
    Xh = np.concatenate(outs, axis=1) @ wo + X
    F = np.maximum(0.0, Xh @ W[prefix + "w1"] + W[prefix + "b1"]) @ W[prefix + "w2"] + W[prefix + "b2"]
    return F + Xh


def features(instance):
    c = np.array(instance.coords, dtype=np.float64)
    lo, hi = c.min(0), c.max(0)
    out = np.where(hi > lo, (c - lo) / np.where(hi > lo, hi - lo, 1.0), 0.5)
    if instance.kind == "cvrp":
        out = np.concatenate([out, (np.asarray(instance.demands) / instance.capacity)[:, None]], axis=1)
    return out


def encode(model, instance):
    W = weights(model)
    X = features(instance) @ W["w_in"] + W["b_in"]
    return attention_layer(X, W, "encoder.", model.config.heads)


def decode_probs(model, state):
    """Insertion probability of every position of ``state.partial`` (no k-filter)."""
    cfg = model.config
    W = weights(model)
    H = encode(model, state.instance)
    inst = state.instance
    part = list(state.partial)
    l = len(part)
    cur = state.current_node
    tokens = [H[cur] @ W["w_cur"]]
    feas = []
    cvrp = inst.kind == "cvrp"
    if cvrp:
        route_of, r = [], -1
        for v in part:
            r += v == 0
            route_of.append(r)
        load = {}
        for v, r in zip(part, route_of):
            load[r] = load.get(r, 0.0) + float(inst.demands[v])
    for i in range(l):
        e = np.concatenate([H[part[i]], H[part[(i + 1) % l]]])
        if cvrp:
            spare = inst.capacity if i == l - 1 else inst.capacity - load[route_of[i]]
            e = np.append(e, spare / inst.capacity)
            feas.append(spare + 1e-9 >= inst.demands[cur])
        else:
            feas.append(True)
        tokens.append(e @ W["w_pos"])
    if cfg.include_unvisited:
        for u in np.flatnonzero(state.unvisited):
            tokens.append(H[u] @ W["w_unv"])
    X = np.stack(tokens)
    for j in range(cfg.layers):
        X = attention_layer(X, W, f"decoder.{j}.", cfg.heads)
    logits = [(X[1 + i] @ W["w_out"])[0] + W["b_out"][0] if feas[i] else -np.inf for i in range(l)]
    return softmax(logits)


def finite_difference_errors(model, loss_fn, h=1e-3, floor=1e-6):
    """Relative error between autograd and central differences, per named parameter.

    ``model`` should be float64; ``loss_fn(model)`` returns a scalar tensor.
    Gradient norms below ``floor`` (e.g. the head bias, whose gradient is
    identically zero under softmax shift invariance) are compared in
    absolute terms.
    """
    import torch

    model.zero_grad(set_to_none=True)
    loss_fn(model).backward()
    analytic = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn(model).item()
                flat[i] = old - h
                down = loss_fn(model).item()
                flat[i] = old
                fd[i] = (up - down) / (2 * h)
            g = analytic[name].view(-1)
            scale = max(float(g.norm()), float(fd.norm()), floor)
            errors[name] = float((g - fd).norm()) / scale
    return errors
