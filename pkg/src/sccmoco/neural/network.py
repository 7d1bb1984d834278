"""Typed message-passing denoiser with hand-written backpropagation.

Each layer updates every node type at once:

    h_t <- h_t + relu(h_t Ws_t + b_t + temb Wt + sum_r A_r h_src(r) Wm_r + S_r We_r)

where ``r`` ranges over relations ending at type ``t`` and ``S_r`` sums the
static edge features. Variable nodes then feed a two-layer head that emits
one logit per admissible triple.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import sinusoidal_embedding
from .graph import NODE_TYPES, PREF_WIDTH, RELATIONS, STATIC_WIDTH, HeteroGraph

TIME_DIM = 16


@dataclass(frozen=True)
class NetConfig:
    layers: int = 4
    hidden: int = 64

    def __post_init__(self):
        if self.layers < 0 or self.hidden < 1:
            raise ValueError("layers must be >= 0 and hidden >= 1")


def input_width(t: str) -> int:
    # the variable state adds one column to the static variable features
    return STATIC_WIDTH[t] + PREF_WIDTH + (1 if t == "x" else 0)


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for t in NODE_TYPES:
        shapes[f"in.W.{t}"] = (input_width(t), H)
        shapes[f"in.b.{t}"] = (H,)
    for l in range(cfg.layers):
        shapes[f"{l}.Wt"] = (TIME_DIM, H)
        for t in NODE_TYPES:
            shapes[f"{l}.Ws.{t}"] = (H, H)
            shapes[f"{l}.b.{t}"] = (H,)
        for r, (_, _, de) in RELATIONS.items():
            shapes[f"{l}.Wm.{r}"] = (H, H)
            if de:
                shapes[f"{l}.We.{r}"] = (de, H)
    shapes["head.W1"] = (H, H)
    shapes["head.b1"] = (H,)
    shapes["head.w2"] = (H, 1)
    shapes["head.b2"] = (1,)
    return shapes


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[0]
        scale = np.sqrt(2.0 / fan_in)
        if ".Wm." in name or ".We." in name or name.endswith(".Wt"):
            scale *= 0.25  # sums over neighbours; keep early layers tame
        elif ".Ws." in name:
            scale *= 0.5
        params[name] = rng.normal(0.0, scale, shape)
    return params


def zeros_like(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


class Cache:
    __slots__ = ("graph", "inputs", "temb", "h", "agg", "masks", "head_a", "head_pre", "logits")


def forward(params: dict[str, np.ndarray], cfg: NetConfig, g: HeteroGraph, x_t: np.ndarray, t) -> tuple[np.ndarray, Cache]:
    """Logits for every variable node. ``t`` is a scalar or one step per graph."""
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    if x_t.shape[0] != g.n_vars:
        raise ValueError(f"state has {x_t.shape[0]} entries for {g.n_vars} variable nodes")
    t_graph = np.broadcast_to(np.asarray(t, dtype=float), (g.n_graphs,))
    te_graph = sinusoidal_embedding(t_graph, TIME_DIM)
    c = Cache()
    c.graph = g
    c.inputs = {}
    c.temb = {}
    h = {}
    for typ in NODE_TYPES:
        X = g.inputs(typ)
        if typ == "x":
            X = np.concatenate([X, (2.0 * x_t - 1.0)[:, None]], axis=1)
        c.inputs[typ] = X
        c.temb[typ] = te_graph[g.graph_of[typ]]
    c.h, c.agg = [], []
    in_mask = {}
    for typ in NODE_TYPES:
        pre = c.inputs[typ] @ params[f"in.W.{typ}"] + params[f"in.b.{typ}"]
        h[typ] = np.maximum(pre, 0.0)
        in_mask[typ] = pre > 0
    c.masks = [in_mask]
    for l in range(cfg.layers):
        c.h.append(h)
        agg = {r: g.adj[r] @ h[src] for r, (src, _, _) in RELATIONS.items()}
        c.agg.append(agg)
        new, mask = {}, {}
        for typ in NODE_TYPES:
            pre = h[typ] @ params[f"{l}.Ws.{typ}"] + params[f"{l}.b.{typ}"] + c.temb[typ] @ params[f"{l}.Wt"]
            for r, (src, dst, de) in RELATIONS.items():
                if dst != typ:
                    continue
                pre = pre + agg[r] @ params[f"{l}.Wm.{r}"]
                if de:
                    pre = pre + g.edge_sum[r] @ params[f"{l}.We.{r}"]
            mask[typ] = pre > 0
            new[typ] = h[typ] + np.maximum(pre, 0.0)
        c.masks.append(mask)
        h = new
    c.h.append(h)
    head_pre = h["x"] @ params["head.W1"] + params["head.b1"]
    c.head_pre = head_pre
    c.head_a = np.maximum(head_pre, 0.0)
    c.logits = (c.head_a @ params["head.w2"] + params["head.b2"]).reshape(-1)
    return c.logits, c


def backward(params: dict[str, np.ndarray], cfg: NetConfig, c: Cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient wrt the logits."""
    g = c.graph
    grads = zeros_like(params)
    dz = np.asarray(d_logits, dtype=float).reshape(-1, 1)
    hx = c.h[-1]["x"]
    grads["head.w2"] = c.head_a.T @ dz
    grads["head.b2"] = dz.sum(axis=0)
    da = (dz @ params["head.w2"].T) * (c.head_pre > 0)
    grads["head.W1"] = hx.T @ da
    grads["head.b1"] = da.sum(axis=0)
    dh = {typ: np.zeros_like(c.h[-1][typ]) for typ in NODE_TYPES}
    dh["x"] = da @ params["head.W1"].T
    for l in range(cfg.layers - 1, -1, -1):
        h, agg, mask = c.h[l], c.agg[l], c.masks[l + 1]
        dprev = {typ: dh[typ].copy() for typ in NODE_TYPES}  # residual path
        for typ in NODE_TYPES:
            dpre = dh[typ] * mask[typ]
            grads[f"{l}.Ws.{typ}"] += h[typ].T @ dpre
            grads[f"{l}.b.{typ}"] += dpre.sum(axis=0)
            grads[f"{l}.Wt"] += c.temb[typ].T @ dpre
            dprev[typ] += dpre @ params[f"{l}.Ws.{typ}"].T
            for r, (src, dst, de) in RELATIONS.items():
                if dst != typ:
                    continue
                grads[f"{l}.Wm.{r}"] += agg[r].T @ dpre
                if de:
                    grads[f"{l}.We.{r}"] += g.edge_sum[r].T @ dpre
                dprev[src] += g.adj[r].T @ (dpre @ params[f"{l}.Wm.{r}"].T)
        dh = dprev
    for typ in NODE_TYPES:
        dpre = dh[typ] * c.masks[0][typ]
        grads[f"in.W.{typ}"] += c.inputs[typ].T @ dpre
        grads[f"in.b.{typ}"] += dpre.sum(axis=0)
    return grads


def pooled(c: Cache) -> np.ndarray:
    """Per-graph mean of the final embeddings of each node type, concatenated."""
    g = c.graph
    parts = []
    for typ in NODE_TYPES:
        h = c.h[-1][typ]
        sums = np.zeros((g.n_graphs, h.shape[1]))
        np.add.at(sums, g.graph_of[typ], h)
        counts = np.bincount(g.graph_of[typ], minlength=g.n_graphs)[:, None]
        parts.append(sums / np.maximum(counts, 1))
    return np.concatenate(parts, axis=1)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def config_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)
