"""Latency/energy evaluation, feasibility and derived placement metrics.

The cache decision is never a free variable here: it is always the indicator
of at least one user placement, which satisfies both coupling constraints by
construction. Infeasible placements can still be scored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .instance import Instance
from .pareto import HvConfig, PreferenceWeight

Pair = tuple[int, int]
Triple = tuple[int, int, int]


class Assignment(Mapping[Pair, int]):
    """Sparse binary placement: each (user, space) pair maps to at most one MEC."""

    __slots__ = ("_map", "_hash")

    def __init__(self, placement: Mapping[Pair, int] | Iterable[tuple[Pair, int]] = ()):
        items = placement.items() if isinstance(placement, Mapping) else placement
        self._map = {(int(u), int(v)): int(m) for (u, v), m in items}
        self._hash = None

    @classmethod
    def from_triples(cls, triples: Iterable[Iterable[int]]) -> "Assignment":
        placement: dict[Pair, int] = {}
        for u, v, m in triples:
            if (u, v) in placement:
                raise ValueError(f"pair {(u, v)} placed on more than one MEC")
            placement[(u, v)] = m
        return cls(placement)

    def triples(self) -> list[Triple]:
        return sorted((u, v, m) for (u, v), m in self._map.items())

    def __getitem__(self, key: Pair) -> int:
        return self._map[key]

    def __iter__(self):
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def __eq__(self, other) -> bool:
        if isinstance(other, Assignment):
            return self._map == other._map
        return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(tuple(self.triples()))
        return self._hash

    def __repr__(self) -> str:
        return f"Assignment({self.triples()})"


@dataclass(frozen=True)
class CostBreakdown:
    tau_sync: float
    tau_compute: float
    tau_cross: float
    tau_edge: float
    eps_maint: float
    eps_sync: float
    eps_compute: float
    eps_cross: float
    eps_edge: float

    @property
    def T_total(self) -> float:
        return self.tau_sync + self.tau_compute + self.tau_cross

    @property
    def E_total(self) -> float:
        return self.eps_maint + self.eps_sync + self.eps_compute + self.eps_cross

    @property
    def objectives(self) -> tuple[float, float]:
        return self.T_total, self.E_total

    def as_dict(self) -> dict:
        return {**asdict(self), "T_total": self.T_total, "E_total": self.E_total}


@dataclass(frozen=True)
class Violation:
    kind: str  # "placement" | "cache" | "tasks"
    index: tuple[int, ...]
    magnitude: float


def check_structure(inst: Instance, x: Mapping[Pair, int]) -> None:
    """Raise ``ValueError`` unless every placed pair is admissible and every MEC index valid."""
    U, V, M = inst.n_users, inst.n_spaces, inst.n_mecs
    for (u, v), m in x.items():
        if not (0 <= u < U and 0 <= v < V and 0 <= m < M):
            raise ValueError(f"triple {(u, v, m)} outside instance dimensions {(U, V, M)}")
        if inst.p[u, v] <= 0:
            raise ValueError(f"pair {(u, v)} is not admissible (p = 0)")


def cache_from_assignment(x: Mapping[Pair, int], n_spaces: int, n_mecs: int) -> np.ndarray:
    y = np.zeros((n_spaces, n_mecs), dtype=np.int64)
    for (_, v), m in x.items():
        y[v, m] = 1
    return y


def _arrays(x: Mapping[Pair, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    trip = sorted((u, v, m) for (u, v), m in x.items())
    if not trip:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z
    a = np.array(trip, dtype=np.int64)
    return a[:, 0], a[:, 1], a[:, 2]


def evaluate(inst: Instance, x: Mapping[Pair, int]) -> CostBreakdown:
    check_structure(inst, x)
    L = inst.links
    u, v, m = _arrays(x)
    pv = inst.p[u, v]
    h = inst.workload[v]
    D = inst.frame_size[v]
    F = inst.frequency[m]
    y = cache_from_assignment(x, inst.n_spaces, inst.n_mecs).astype(float)

    tau_c = float(np.sum(pv * h / F))  # Mc / (Gc/s) = ms
    eps_c = inst.constants.compute_energy_scale * float(np.sum(pv * h * F * F))
    tau_t = float(np.sum(pv * (L.sensor_latency[u, m] + L.frame_latency_coeff[m, u] * D)))
    eps_t = float(np.sum(pv * (L.sensor_energy[u, m] + L.frame_energy_coeff[m, u] * D)))
    eps_m = float(np.sum(y * inst.maint_energy[:, None]))
    # ordered (m, n) pairs: each undirected link counted twice when d is symmetric
    tau_s = float(np.einsum("vm,mn,vn->", y, L.sync_latency, y))
    eps_s = float(np.einsum("vm,mn,vn->", y, L.sync_energy, y))
    tau_l = float(np.sum(inst.p * inst.edge_latency_coeff[:, None] * inst.frame_size[None, :]))
    eps_l = float(np.sum(inst.p * inst.edge_energy_coeff[:, None] * inst.frame_size[None, :]))
    return CostBreakdown(tau_s, tau_c, tau_t, tau_l, eps_m, eps_s, eps_c, eps_t, eps_l)


def objectives(inst: Instance, x: Mapping[Pair, int]) -> tuple[float, float]:
    return evaluate(inst, x).objectives


def evaluate_with_cache(inst: Instance, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Objectives of a dense placement ``x[u, v, m]`` with an explicit cache matrix ``y[v, m]``.

    Literal nested sums over every index, used as a reference for the sparse
    evaluator. ``y`` must satisfy y >= x and y <= sum_u x.
    """
    U, V, M = x.shape
    L = inst.links
    xi = inst.constants.compute_energy_scale
    if np.any(y[None, :, :] < x) or np.any(y > x.sum(axis=0)):
        raise ValueError("cache matrix violates the coupling constraints")
    tau_s = eps_s = eps_m = 0.0
    for v in range(V):
        for m in range(M):
            eps_m += y[v, m] * inst.maint_energy[v]
            for n in range(M):
                tau_s += L.sync_latency[m, n] * y[v, m] * y[v, n]
                eps_s += L.sync_energy[m, n] * y[v, m] * y[v, n]
    tau_c = eps_c = tau_t = eps_t = 0.0
    for m in range(M):
        F = inst.frequency[m]
        for u in range(U):
            for v in range(V):
                load = inst.p[u, v] * x[u, v, m] * inst.workload[v]
                tau_c += load / F
                eps_c += xi * load * F * F
                w = inst.p[u, v] * x[u, v, m]
                D = inst.frame_size[v]
                tau_t += w * (L.sensor_latency[u, m] + L.frame_latency_coeff[m, u] * D)
                eps_t += w * (L.sensor_energy[u, m] + L.frame_energy_coeff[m, u] * D)
    return tau_s + tau_c + tau_t, eps_m + eps_s + eps_c + eps_t


def to_dense(inst: Instance, x: Mapping[Pair, int]) -> np.ndarray:
    dense = np.zeros((inst.n_users, inst.n_spaces, inst.n_mecs), dtype=np.int64)
    for (u, v), m in x.items():
        dense[u, v, m] = 1
    return dense


def check_feasible(inst: Instance, x: Mapping[Pair, int]) -> list[Violation]:
    check_structure(inst, x)
    out: list[Violation] = []
    for u, v in inst.pairs:
        if (u, v) not in x:
            out.append(Violation("placement", (u, v), 1.0))
    tasks = np.zeros(inst.n_mecs, dtype=np.int64)
    for m in x.values():
        tasks[m] += 1
    for m in range(inst.n_mecs):
        if tasks[m] > inst.max_tasks[m]:
            out.append(Violation("tasks", (m,), float(tasks[m] - inst.max_tasks[m])))
    y = cache_from_assignment(x, inst.n_spaces, inst.n_mecs)
    load = inst.cache_size @ y if inst.n_spaces else np.zeros(inst.n_mecs)
    for m in range(inst.n_mecs):
        if load[m] > inst.cache_capacity[m]:
            out.append(Violation("cache", (m,), float(load[m] - inst.cache_capacity[m])))
    return out


def is_feasible(inst: Instance, x: Mapping[Pair, int]) -> bool:
    return not check_feasible(inst, x)


def scalarize(T: float, E: float, w: PreferenceWeight | tuple[float, float], ref: HvConfig) -> float:
    return w[0] * T / ref.T_ref + w[1] * E / ref.E_ref


def scalarize_tradeoff(T: float, E: float, ell: float) -> float:
    if ell < 0:
        raise ValueError("trade-off factor must be non-negative")
    return T + ell * E


class UndefinedRateError(ValueError):
    pass


def local_rate(inst: Instance, x: Mapping[Pair, int]) -> float:
    if not x:
        raise UndefinedRateError("local rate of an empty assignment is undefined")
    local = sum(1 for (u, _), m in x.items() if m == inst.local_mec[u])
    return local / len(x)


def avg_placements(inst: Instance, x: Mapping[Pair, int]) -> float:
    if inst.n_spaces == 0:
        return 0.0
    return float(cache_from_assignment(x, inst.n_spaces, inst.n_mecs).sum()) / inst.n_spaces


# ---------------------------------------------------------------------------
# incremental state for constructive search


@dataclass(frozen=True, eq=False)
class CostTables:
    """Per-pair marginal costs as Python lists, for tight search loops."""

    pairs: tuple[Pair, ...]
    lin_T: list[list[float]]  # [pair][m] compute + transmission latency
    lin_E: list[list[float]]
    space_of: list[int]
    local_of: list[int]
    cache_size: list[float]
    maint: list[float]
    capacity: list[float]
    max_tasks: list[int]
    d: list[list[float]]
    e: list[list[float]]


@lru_cache(maxsize=512)
def cost_tables(inst: Instance) -> CostTables:
    L = inst.links
    lin_T, lin_E = [], []
    xi = inst.constants.compute_energy_scale
    F = inst.frequency
    for u, v in inst.pairs:
        pv, h, D = inst.p[u, v], inst.workload[v], inst.frame_size[v]
        lin_T.append((pv * h / F + pv * (L.sensor_latency[u] + L.frame_latency_coeff[:, u] * D)).tolist())
        lin_E.append((xi * pv * h * F * F + pv * (L.sensor_energy[u] + L.frame_energy_coeff[:, u] * D)).tolist())
    return CostTables(
        pairs=inst.pairs,
        lin_T=lin_T,
        lin_E=lin_E,
        space_of=[v for _, v in inst.pairs],
        local_of=[int(inst.local_mec[u]) for u, _ in inst.pairs],
        cache_size=inst.cache_size.tolist(),
        maint=inst.maint_energy.tolist(),
        capacity=inst.cache_capacity.tolist(),
        max_tasks=inst.max_tasks.tolist(),
        d=L.sync_latency.tolist(),
        e=L.sync_energy.tolist(),
    )


class PlacementState:
    """Partial placement with running objectives and constraint bookkeeping.

    Pairs are addressed by their index in ``inst.pairs``. Supports undo so it
    can drive depth-first search.
    """

    def __init__(self, inst: Instance):
        self.inst = inst
        self.tab = cost_tables(inst)
        M, V = inst.n_mecs, inst.n_spaces
        self.tasks = [0] * M
        self.count = [[0] * M for _ in range(V)]  # users of space v on MEC m
        self.open = [[] for _ in range(V)]  # MECs caching v, in opening order
        self.spaces_at = [[] for _ in range(M)]
        self.choice: dict[int, int] = {}
        self.T = 0.0
        self.E = 0.0
        self._undo: list[tuple[float, float]] = []

    def cache_load(self, m: int) -> float:
        c = self.tab.cache_size
        return sum(c[v] for v in self.spaces_at[m])

    def can_place(self, i: int, m: int) -> bool:
        if self.tasks[m] >= self.tab.max_tasks[m]:
            return False
        v = self.tab.space_of[i]
        if self.count[v][m]:
            return True
        return self.cache_load(m) + self.tab.cache_size[v] <= self.tab.capacity[m]

    def feasible_mecs(self, i: int) -> list[int]:
        return [m for m in range(self.inst.n_mecs) if self.can_place(i, m)]

    def delta(self, i: int, m: int) -> tuple[float, float]:
        """Exact objective increments of placing pair ``i`` on MEC ``m``."""
        tab = self.tab
        dT = tab.lin_T[i][m]
        dE = tab.lin_E[i][m]
        v = tab.space_of[i]
        if not self.count[v][m]:
            dE += tab.maint[v]
            dm, em = tab.d[m], tab.e[m]
            for n in self.open[v]:
                dT += dm[n] + tab.d[n][m]
                dE += em[n] + tab.e[n][m]
        return dT, dE

    def place(self, i: int, m: int) -> None:
        dT, dE = self.delta(i, m)
        self._undo.append((self.T, self.E))
        self.T += dT
        self.E += dE
        v = self.tab.space_of[i]
        if not self.count[v][m]:
            self.open[v].append(m)
            self.spaces_at[m].append(v)
        self.count[v][m] += 1
        self.tasks[m] += 1
        self.choice[i] = m

    def unplace(self, i: int) -> None:
        m = self.choice.pop(i)
        v = self.tab.space_of[i]
        self.count[v][m] -= 1
        self.tasks[m] -= 1
        if not self.count[v][m]:
            self.open[v].remove(m)
            self.spaces_at[m].remove(v)
        self.T, self.E = self._undo.pop()

    def assignment(self) -> Assignment:
        pairs = self.tab.pairs
        return Assignment({pairs[i]: m for i, m in self.choice.items()})


# ---------------------------------------------------------------------------
# solution files


SOLUTION_SCHEMA = 1


def solution_to_dict(instance_id: str, x: Mapping[Pair, int], breakdown: CostBreakdown | None = None) -> dict:
    out = {"v": SOLUTION_SCHEMA, "instance_id": instance_id, "triples": [list(t) for t in Assignment(x).triples()]}
    if breakdown is not None:
        out["costs"] = breakdown.as_dict()
    return out


def solution_from_dict(data: dict) -> tuple[str, Assignment]:
    if data.get("v") != SOLUTION_SCHEMA:
        raise ValueError(f"unsupported solution schema version {data.get('v')!r}")
    return data["instance_id"], Assignment.from_triples(data["triples"])


def save_solutions(path: str | Path, records: list[dict]) -> None:
    Path(path).write_text(json.dumps(records))
