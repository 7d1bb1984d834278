"""Exact ground truth for small instances.

``solve_exact`` is a depth-first branch-and-bound over required pairs;
``enumerate_optimum`` and ``enumerate_pareto_exact`` brute-force every
assignment and serve as its independent check and as the exact front.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .costmodel import Assignment, PlacementState, cost_tables, is_feasible, objectives, scalarize
from .instance import Instance
from .pareto import HvConfig, ObjectivePoint, PreferenceWeight, nondominated

log = logging.getLogger(__name__)


class BudgetExceededError(RuntimeError):
    pass


class InfeasibleInstanceError(ValueError):
    pass


@dataclass(frozen=True)
class Objective:
    """Scalar objective over (T, E)."""

    kind: str = "latency"  # latency | energy | weighted | tradeoff
    w: PreferenceWeight | None = None
    ref: HvConfig = field(default_factory=HvConfig)
    ell: float = 0.0

    @classmethod
    def latency(cls) -> "Objective":
        return cls("latency")

    @classmethod
    def energy(cls) -> "Objective":
        return cls("energy")

    @classmethod
    def weighted(cls, w: PreferenceWeight, ref: HvConfig) -> "Objective":
        return cls("weighted", w=w, ref=ref)

    @classmethod
    def tradeoff(cls, ell: float) -> "Objective":
        if ell < 0:
            raise ValueError("trade-off factor must be non-negative")
        return cls("tradeoff", ell=float(ell))

    def coeffs(self) -> tuple[float, float]:
        if self.kind == "latency":
            return 1.0, 0.0
        if self.kind == "energy":
            return 0.0, 1.0
        if self.kind == "weighted":
            return self.w[0] / self.ref.T_ref, self.w[1] / self.ref.E_ref
        if self.kind == "tradeoff":
            return 1.0, self.ell
        raise ValueError(f"unknown objective kind {self.kind!r}")

    def value(self, T: float, E: float) -> float:
        if self.kind == "latency":
            return T
        if self.kind == "energy":
            return E
        if self.kind == "weighted":
            return scalarize(T, E, self.w, self.ref)
        a, b = self.coeffs()
        return T + b * E


@dataclass(frozen=True)
class OracleConfig:
    max_search_nodes: int = 2_000_000
    objective: Objective = field(default_factory=Objective)

    def __post_init__(self):
        if self.max_search_nodes <= 0:
            raise ValueError("max_search_nodes must be positive")


@dataclass(frozen=True)
class OracleResult:
    x: Assignment
    value: float
    certified: bool
    nodes: int


def canonical_value(inst: Instance, x: Assignment, objective: Objective) -> float:
    return objective.value(*objectives(inst, x))


def _better(value: float, x: Assignment, best_value: float, best_x: Assignment | None) -> bool:
    if value < best_value:
        return True
    return value == best_value and best_x is not None and x.triples() < best_x.triples()


def solve_exact(inst: Instance, cfg: OracleConfig = OracleConfig()) -> OracleResult:
    """Minimize the configured scalar objective over feasible placements.

    Pairs are branched in descending request probability. The bound adds, for
    every unplaced pair, its cheapest compute+transmission cost, plus one
    maintenance charge for each space that still has pairs but no open copy.
    Ties between equal optima go to the lexicographically smallest triple list.
    """
    from .heuristics import RepairError, greedy  # local import: heuristics depends on costmodel only

    objective = cfg.objective
    a, b = objective.coeffs()
    tab = cost_tables(inst)
    n = len(tab.pairs)
    M = inst.n_mecs
    order = sorted(range(n), key=lambda i: (-inst.p[tab.pairs[i]], i))

    lin = [[a * tab.lin_T[i][m] + b * tab.lin_E[i][m] for m in range(M)] for i in range(n)]
    suffix = [0.0] * (n + 1)
    for k in range(n - 1, -1, -1):
        suffix[k] = suffix[k + 1] + min(lin[order[k]])
    V = inst.n_spaces
    remaining = [[0] * V for _ in range(n + 1)]
    for k in range(n - 1, -1, -1):
        remaining[k] = remaining[k + 1][:]
        remaining[k][tab.space_of[order[k]]] += 1
    # try cheap MECs first so good incumbents appear early
    mec_order = [sorted(range(M), key=lambda m, i=i: (lin[i][m], m)) for i in range(n)]

    best_value = float("inf")
    best_x: Assignment | None = None
    try:
        seeds = [greedy(inst, a, b), Assignment(inst.all_local)]
    except RepairError:
        seeds = []
    for seed_x in seeds:
        if is_feasible(inst, seed_x):
            val = canonical_value(inst, seed_x, objective)
            if best_x is None or _better(val, seed_x, best_value, best_x):
                best_value, best_x = val, seed_x

    state = PlacementState(inst)
    nodes = 0
    exhausted = False

    def slack(v: float) -> float:
        return 1e-9 * max(1.0, abs(v))

    def bound(k: int) -> float:
        lb = a * state.T + b * state.E + suffix[k]
        if b > 0:
            rem = remaining[k]
            for v in range(V):
                if rem[v] and not state.open[v]:
                    lb += b * tab.maint[v]
        return lb

    def dfs(k: int) -> None:
        nonlocal nodes, best_value, best_x, exhausted
        if exhausted:
            return
        nodes += 1
        if nodes > cfg.max_search_nodes:
            exhausted = True
            return
        if k == n:
            if a * state.T + b * state.E > best_value + slack(best_value):
                return
            x = state.assignment()
            val = canonical_value(inst, x, objective)
            if best_x is None or _better(val, x, best_value, best_x):
                best_value, best_x = val, x
            return
        i = order[k]
        for m in mec_order[i]:
            if not state.can_place(i, m):
                continue
            state.place(i, m)
            if bound(k + 1) <= best_value + slack(best_value):
                dfs(k + 1)
            state.unplace(i)
            if exhausted:
                return

    dfs(0)
    if best_x is None:
        raise InfeasibleInstanceError(f"instance {inst.id} has no feasible placement")
    return OracleResult(best_x, best_value, not exhausted, nodes)


# ---------------------------------------------------------------------------
# brute force


def _all_genotypes(n: int, M: int, budget: int) -> np.ndarray:
    total = M**n
    if total > budget:
        raise BudgetExceededError(f"{M}^{n} = {total} assignments exceed budget {budget}")
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.indices((M,) * n).reshape(n, -1).T.astype(np.int64)


def _vectorized_objectives(inst: Instance, G: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(T, E, feasible) for every row of genotype matrix ``G``; pairs in canonical order."""
    tab = cost_tables(inst)
    n = G.shape[1]
    M, V = inst.n_mecs, inst.n_spaces
    LT = np.array(tab.lin_T).reshape(n, M)
    LE = np.array(tab.lin_E).reshape(n, M)
    rows = np.arange(n)
    T = LT[rows, G].sum(axis=1) if n else np.zeros(len(G))
    E = LE[rows, G].sum(axis=1) if n else np.zeros(len(G))
    space = np.array(tab.space_of, dtype=np.int64)
    Y = np.zeros((len(G), V, M), dtype=bool)
    for j in range(n):
        Y[np.arange(len(G)), space[j], G[:, j]] = True
    Yf = Y.astype(float)
    d, e = inst.links.sync_latency, inst.links.sync_energy
    T = T + np.einsum("kvm,mn,kvn->k", Yf, d, Yf)
    E = E + np.einsum("kvm,mn,kvn->k", Yf, e, Yf) + np.einsum("kvm,v->k", Yf, inst.maint_energy)
    tasks = np.stack([(G == m).sum(axis=1) for m in range(M)], axis=1) if n else np.zeros((len(G), M))
    load = np.einsum("kvm,v->km", Yf, inst.cache_size)
    feasible = np.all(tasks <= inst.max_tasks, axis=1) & np.all(load <= inst.cache_capacity, axis=1)
    return T, E, feasible


def _decode(inst: Instance, genes) -> Assignment:
    return Assignment({pair: int(m) for pair, m in zip(inst.pairs, genes)})


def enumerate_optimum(inst: Instance, objective: Objective, budget: int = 2_000_000) -> tuple[Assignment, float]:
    """Exhaustive minimum with the same tie rule as ``solve_exact``."""
    G = _all_genotypes(len(inst.pairs), inst.n_mecs, budget)
    T, E, ok = _vectorized_objectives(inst, G)
    if not ok.any():
        raise InfeasibleInstanceError(f"instance {inst.id} has no feasible placement")
    a, b = objective.coeffs()
    vals = np.where(ok, a * T + b * E, np.inf)
    vmin = vals.min()
    near = np.flatnonzero(vals <= vmin + 1e-7 * max(1.0, abs(vmin)))
    best_x, best_v = None, float("inf")
    for k in near:
        x = _decode(inst, G[k])
        val = canonical_value(inst, x, objective)
        if best_x is None or _better(val, x, best_v, best_x):
            best_x, best_v = x, val
    return best_x, best_v


def enumerate_feasible(inst: Instance, budget: int = 2_000_000) -> list[tuple[ObjectivePoint, Assignment]]:
    """Every feasible assignment with its canonical objectives. Test-scale only."""
    G = _all_genotypes(len(inst.pairs), inst.n_mecs, budget)
    _, _, ok = _vectorized_objectives(inst, G)
    out = []
    for k in np.flatnonzero(ok):
        x = _decode(inst, G[k])
        out.append((ObjectivePoint(*objectives(inst, x)), x))
    return out


def enumerate_pareto_exact(inst: Instance, budget: int = 2_000_000) -> list[tuple[ObjectivePoint, Assignment]]:
    """Exact Pareto front (one solution per distinct point), sorted by latency."""
    G = _all_genotypes(len(inst.pairs), inst.n_mecs, budget)
    T, E, ok = _vectorized_objectives(inst, G)
    idx = np.flatnonzero(ok)
    if not len(idx):
        raise InfeasibleInstanceError(f"instance {inst.id} has no feasible placement")
    # screen with a small tolerance, then settle dominance on canonical values
    tol = 1e-9
    Tk, Ek = T[idx], E[idx]
    order = np.lexsort((Ek, Tk))
    cand = []
    best_E = np.inf
    for j in order:
        if Ek[j] < best_E * (1 + tol) + tol:
            cand.append(idx[j])
            best_E = min(best_E, Ek[j])
    entries = []
    for k in cand:
        x = _decode(inst, G[k])
        entries.append((ObjectivePoint(*objectives(inst, x)), x))
    # lexicographically smallest solution represents each distinct point
    entries.sort(key=lambda e: (e[0].T, e[0].E, e[1].triples()))
    keep = nondominated([e[0] for e in entries])
    return [entries[i] for i in keep]


# ---------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class LabeledExample:
    instance_id: str
    objective: int  # 1 = latency, 2 = energy
    x: Assignment
    value: float
    certified: bool = True

    def to_json(self) -> str:
        return json.dumps(
            {
                "instance_id": self.instance_id,
                "objective": self.objective,
                "triples": [list(t) for t in self.x.triples()],
                "value": self.value,
                "certified": self.certified,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "LabeledExample":
        d = json.loads(line)
        return cls(d["instance_id"], int(d["objective"]), Assignment.from_triples(d["triples"]), float(d["value"]), bool(d.get("certified", True)))


def label_dataset(instances: Iterable[Instance], max_search_nodes: int = 2_000_000) -> list[LabeledExample]:
    """Two labels per instance: the latency optimum (w=[1,0]) and the energy optimum (w=[0,1])."""
    labels: list[LabeledExample] = []
    failed = 0
    for inst in instances:
        try:
            pair = []
            for tag, objective in ((1, Objective.latency()), (2, Objective.energy())):
                res = solve_exact(inst, OracleConfig(max_search_nodes, objective))
                pair.append(LabeledExample(inst.id, tag, res.x, res.value, res.certified))
        except (InfeasibleInstanceError, ValueError) as exc:
            failed += 1
            log.warning("label_dataset: skipping %s: %s", inst.id, exc)
            continue
        labels.extend(pair)
    if failed:
        log.warning("label_dataset: %d instances skipped", failed)
    return labels


def write_labels(path: str | Path, labels: Iterable[LabeledExample]) -> None:
    with Path(path).open("w") as fh:
        for ex in labels:
            fh.write(ex.to_json() + "\n")


def read_labels(path: str | Path) -> list[LabeledExample]:
    with Path(path).open() as fh:
        return [LabeledExample.from_json(line) for line in fh if line.strip()]
