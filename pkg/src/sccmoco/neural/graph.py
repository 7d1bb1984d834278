"""Heterogeneous graph encoding of an instance under a preference weight."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..costmodel import cost_tables
from ..instance import Instance
from ..pareto import PreferenceWeight

NODE_TYPES = ("u", "m", "v", "x")

# (source type, destination type, edge feature width)
RELATIONS = {
    "u>x": ("u", "x", 0),
    "x>u": ("x", "u", 0),
    "v>x": ("v", "x", 0),
    "x>v": ("x", "v", 0),
    "m>x": ("m", "x", 0),
    "x>m": ("x", "m", 0),
    "m>m": ("m", "m", 2),
    "u>v": ("u", "v", 1),
    "v>u": ("v", "u", 1),
    "u>m": ("u", "m", 5),
    "m>u": ("m", "u", 5),
}

# Fixed per-field divisors so every feature is O(1) at both presets.
SCALE = {
    "kappa": 0.06,
    "zeta": 0.01,
    "capacity": 20000.0,
    "frequency": 5.0,
    "max_tasks": 15.0,
    "cache": 1500.0,
    "maint": 50.0,
    "workload": 150.0,
    "frame": 150.0,
    "sync_latency": 1.0,
    "sync_energy": 1.5,
    "sensor_latency": 1.0,
    "sensor_energy": 1.5,
    "frame_latency": 0.6,
    "frame_energy": 0.1,
    "lin_T": 50.0,
    "lin_E": 100.0,
}

STATIC_WIDTH = {"u": 2, "m": 3, "v": 4, "x": 4}
PREF_WIDTH = 2


@dataclass(eq=False)
class HeteroGraph:
    """One graph, or a disjoint union of several (``n_graphs > 1``).

    ``feats[t]`` holds static node features without the preference; the
    variable state enters at forward time. ``adj[r]`` is the sparse
    destination-by-source incidence of relation ``r`` and ``edge_sum[r]`` the
    per-destination sum of its edge features.
    """

    feats: dict[str, np.ndarray]
    adj: dict[str, sp.csr_matrix]
    edge_sum: dict[str, np.ndarray]
    graph_of: dict[str, np.ndarray]
    w: np.ndarray  # (n_graphs, 2)
    triples: list[tuple[int, int, int]] = field(default_factory=list)
    var_offsets: np.ndarray | None = None  # start of each graph's variables

    @property
    def n_graphs(self) -> int:
        return len(self.w)

    def count(self, t: str) -> int:
        return len(self.feats[t])

    @property
    def n_vars(self) -> int:
        return self.count("x")

    def inputs(self, t: str) -> np.ndarray:
        return np.concatenate([self.feats[t], self.w[self.graph_of[t]]], axis=1)

    def with_preference(self, w) -> "HeteroGraph":
        w = np.asarray(w, dtype=float).reshape(-1, PREF_WIDTH)
        return HeteroGraph(self.feats, self.adj, self.edge_sum, self.graph_of, np.broadcast_to(w, self.w.shape).copy(), self.triples, self.var_offsets)

    def reorder_vars(self, perm) -> "HeteroGraph":
        """Same graph with old variable ``perm[i]`` stored at position ``i``."""
        perm = np.asarray(perm)
        P = sp.csr_matrix((np.ones(len(perm)), (np.arange(len(perm)), perm)), shape=(len(perm), len(perm)))
        adj = {}
        for r, A in self.adj.items():
            src, dst, _ = RELATIONS[r]
            if dst == "x":
                A = P @ A
            if src == "x":
                A = A @ P.T
            adj[r] = A.tocsr()
        feats = dict(self.feats, x=self.feats["x"][perm])
        graph_of = dict(self.graph_of, x=self.graph_of["x"][perm])
        edge_sum = {r: (S[perm] if RELATIONS[r][1] == "x" else S) for r, S in self.edge_sum.items()}
        return HeteroGraph(feats, adj, edge_sum, graph_of, self.w, [self.triples[k] for k in perm], None)


def _incidence(dst_idx, src_idx, n_dst, n_src) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(dst_idx)), (dst_idx, src_idx)), shape=(n_dst, n_src))


def build_graph(inst: Instance, w: PreferenceWeight | tuple[float, float]) -> HeteroGraph:
    S = SCALE
    L = inst.links
    U, V, M = inst.n_users, inst.n_spaces, inst.n_mecs
    feats = {
        "u": np.column_stack([inst.edge_latency_coeff / S["kappa"], inst.edge_energy_coeff / S["zeta"]]).reshape(U, 2),
        "m": np.column_stack(
            [inst.cache_capacity / S["capacity"], inst.frequency / S["frequency"], inst.max_tasks / S["max_tasks"]]
        ).reshape(M, 3),
        "v": np.column_stack(
            [inst.cache_size / S["cache"], inst.maint_energy / S["maint"], inst.workload / S["workload"], inst.frame_size / S["frame"]]
        ).reshape(V, 4),
    }
    tab = cost_tables(inst)
    triples = list(inst.triples)
    n = len(triples)
    tu = np.array([t[0] for t in triples], dtype=np.int64)
    tv = np.array([t[1] for t in triples], dtype=np.int64)
    tm = np.array([t[2] for t in triples], dtype=np.int64)
    if n:
        lin_T = np.asarray(tab.lin_T).ravel() / S["lin_T"]
        lin_E = np.asarray(tab.lin_E).ravel() / S["lin_E"]
        feats["x"] = np.column_stack([inst.p[tu, tv], (inst.local_mec[tu] == tm).astype(float), lin_T, lin_E])
    else:
        feats["x"] = np.zeros((0, 4))

    adj, edge_sum = {}, {}
    adj["u>x"] = _incidence(np.arange(n), tu, n, U)
    adj["v>x"] = _incidence(np.arange(n), tv, n, V)
    adj["m>x"] = _incidence(np.arange(n), tm, n, M)
    for r in ("x>u", "x>v", "x>m"):
        adj[r] = adj[r[2] + ">" + r[0]].T.tocsr()

    mi, mj = np.nonzero(~np.eye(M, dtype=bool))
    adj["m>m"] = _incidence(mi, mj, M, M)
    mm = np.column_stack([L.sync_latency[mi, mj] / S["sync_latency"], L.sync_energy[mi, mj] / S["sync_energy"]])
    edge_sum["m>m"] = _scatter(mi, mm, M)

    pu, pv = np.nonzero(inst.p > 0)
    adj["u>v"] = _incidence(pv, pu, V, U)
    adj["v>u"] = _incidence(pu, pv, U, V)
    pe = inst.p[pu, pv][:, None]
    edge_sum["u>v"] = _scatter(pv, pe, V)
    edge_sum["v>u"] = _scatter(pu, pe, U)

    uu, um = np.meshgrid(np.arange(U), np.arange(M), indexing="ij")
    uu, um = uu.ravel(), um.ravel()
    um_feat = np.column_stack(
        [
            (inst.local_mec[uu] == um).astype(float) if U else np.zeros(0),
            L.sensor_latency[uu, um] / S["sensor_latency"],
            L.sensor_energy[uu, um] / S["sensor_energy"],
            L.frame_latency_coeff[um, uu] / S["frame_latency"],
            L.frame_energy_coeff[um, uu] / S["frame_energy"],
        ]
    ).reshape(-1, 5)
    adj["u>m"] = _incidence(um, uu, M, U)
    adj["m>u"] = _incidence(uu, um, U, M)
    edge_sum["u>m"] = _scatter(um, um_feat, M)
    edge_sum["m>u"] = _scatter(uu, um_feat, U)

    graph_of = {t: np.zeros(len(feats[t]), dtype=np.int64) for t in NODE_TYPES}
    w = np.asarray(tuple(w), dtype=float).reshape(1, PREF_WIDTH)
    return HeteroGraph(feats, adj, edge_sum, graph_of, w, triples, np.array([0], dtype=np.int64))


def _scatter(idx, rows, n) -> np.ndarray:
    out = np.zeros((n, rows.shape[1]))
    np.add.at(out, idx, rows)
    return out


def batch_graphs(graphs: list[HeteroGraph]) -> HeteroGraph:
    """Disjoint union; variable nodes keep per-graph order, graphs concatenated."""
    if len(graphs) == 1:
        return graphs[0]
    feats = {t: np.concatenate([g.feats[t] for g in graphs]) for t in NODE_TYPES}
    adj = {r: sp.block_diag([g.adj[r] for g in graphs], format="csr") for r in RELATIONS}
    edge_sum = {r: np.concatenate([g.edge_sum[r] for g in graphs]) for r in graphs[0].edge_sum}
    graph_of = {}
    for t in NODE_TYPES:
        graph_of[t] = np.concatenate([np.full(g.count(t), k, dtype=np.int64) for k, g in enumerate(graphs)])
    w = np.concatenate([g.w for g in graphs])
    counts = [g.n_vars for g in graphs]
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    triples = [t for g in graphs for t in g.triples]
    return HeteroGraph(feats, adj, edge_sum, graph_of, w, triples, offsets)
