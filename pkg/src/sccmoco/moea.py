"""NSGA-II and MOEA/D over a per-pair MEC-index genotype.

Genes name a preferred MEC for each requested (user, space) pair. Decoding
runs them through the greedy repair, so every evaluated individual is
feasible, and the repaired genes are written back into the population.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .costmodel import Assignment, objectives
from .heuristics import repair
from .instance import Instance
from .pareto import ObjectivePoint, ParetoArchive, nondominated

Front = list[tuple[ObjectivePoint, Assignment]]


@dataclass(frozen=True)
class MoeaParams:
    pop_size: int = 64
    generations: int = 200
    crossover_rate: float = 0.9
    mutation_rate: float | None = None  # None: one gene per individual on average
    neighborhood: int = 10
    n_weights: int | None = None  # MOEA/D subproblems; None: pop_size
    seed: int = 0
    archive: bool = False  # NSGA-II: return every non-dominated point ever evaluated

    def validate(self) -> "MoeaParams":
        if self.pop_size < 4 or self.pop_size % 2:
            raise ValueError("population size must be even and at least 4")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        for name in ("crossover_rate", "mutation_rate"):
            r = getattr(self, name)
            if r is not None and not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.neighborhood < 2:
            raise ValueError("neighborhood must hold at least two subproblems")
        if self.n_weights is not None and self.n_weights < 2:
            raise ValueError("MOEA/D needs at least two weight vectors")
        return self


class _Evaluator:
    """Decodes genotypes and memoizes (genes -> repaired genes, objectives)."""

    def __init__(self, inst: Instance):
        self.inst = inst
        self.cache: dict[bytes, tuple[np.ndarray, ObjectivePoint, Assignment]] = {}
        self.archive = ParetoArchive()

    def __call__(self, g: np.ndarray) -> tuple[np.ndarray, ObjectivePoint, Assignment]:
        key = g.tobytes()
        hit = self.cache.get(key)
        if hit is None:
            x = decode(self.inst, g)
            genes = np.array([x[pair] for pair in self.inst.pairs], dtype=np.int64)
            hit = (genes, ObjectivePoint(*objectives(self.inst, x)), x)
            self.cache[key] = hit
            self.cache.setdefault(genes.tobytes(), hit)
            self.archive.insert(self.inst.id, hit[1], x)
        return hit

    def archive_front(self) -> Front:
        return _sorted_front([(e.point, e.solution) for e in self.archive.fronts.get(self.inst.id, [])])


def decode(inst: Instance, genes: Sequence[int]) -> Assignment:
    genes = np.asarray(genes, dtype=np.int64)
    n = len(inst.pairs)
    if genes.shape != (n,):
        raise ValueError(f"genotype length {genes.shape} does not match {n} requested pairs")
    q = np.zeros((n, inst.n_mecs))
    q[np.arange(n), genes] = 1.0
    return repair(inst, q)


def fast_nondominated_sort(points: Sequence[Sequence[float]]) -> list[int]:
    """Pareto rank of every point; rank 0 is the non-dominated set."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(P)
    le = (P[:, None, :] <= P[None, :, :]).all(axis=2)
    lt = (P[:, None, :] < P[None, :, :]).any(axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    ranks = [-1] * n
    current = [i for i in range(n) if count[i] == 0]
    r = 0
    while current:
        nxt = []
        for i in current:
            ranks[i] = r
            for j in np.flatnonzero(dom[i]):
                count[j] -= 1
                if count[j] == 0:
                    nxt.append(int(j))
        current = nxt
        r += 1
    return ranks


def crowding_distance(points: Sequence[Sequence[float]]) -> np.ndarray:
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(P)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(2):
        order = np.argsort(P[:, k], kind="stable")
        span = P[order[-1], k] - P[order[0], k]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span > 0:
            dist[order[1:-1]] += (P[order[2:], k] - P[order[:-2], k]) / span
    return dist


def _sorted_front(entries: Front) -> Front:
    seen: dict[ObjectivePoint, Assignment] = {}
    for pt, x in entries:
        if pt not in seen or x.triples() < seen[pt].triples():
            seen[pt] = x
    items = sorted(seen.items(), key=lambda e: (e[0].T, e[0].E))
    keep = nondominated([pt for pt, _ in items])
    return [items[i] for i in keep]


def _vary(a: np.ndarray, b: np.ndarray, M: int, params: MoeaParams, rng: np.random.Generator) -> np.ndarray:
    n = len(a)
    child = a.copy()
    if rng.random() < params.crossover_rate:
        mask = rng.random(n) < 0.5
        child[mask] = b[mask]
    rate = params.mutation_rate if params.mutation_rate is not None else (1.0 / n if n else 0.0)
    mut = rng.random(n) < rate
    if mut.any():
        child[mut] = rng.integers(0, M, int(mut.sum()))
    return child


def _random_population(inst: Instance, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, inst.n_mecs, (size, len(inst.pairs)))


def nsga2(inst: Instance, params: MoeaParams = MoeaParams(), callback: Callable[[int, Front], None] | None = None) -> Front:
    """Elitist non-dominated sorting GA with crowding-distance truncation.

    ``callback(gen, front)`` sees the front after each generation (generation
    0 is the initial population).
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    if not inst.pairs:
        return [(ObjectivePoint(0.0, 0.0), Assignment())]
    ev = _Evaluator(inst)
    N, M = params.pop_size, inst.n_mecs
    pop = _random_population(inst, N, rng)
    evals = [ev(g) for g in pop]
    pop = np.array([e[0] for e in evals])
    pts = [e[1] for e in evals]

    def front_of(pop_pts, pop_sols):
        if params.archive:
            return ev.archive_front()
        ranks = fast_nondominated_sort(pop_pts)
        return _sorted_front([(pop_pts[i], pop_sols[i]) for i in range(len(pop_pts)) if ranks[i] == 0])

    ranks = np.array(fast_nondominated_sort(pts))
    crowd = _crowding_by_rank(pts, ranks)
    if callback:
        callback(0, front_of(pts, [e[2] for e in evals]))
    for gen in range(1, params.generations + 1):
        children = []
        for _ in range(N):
            a = _tournament(ranks, crowd, rng)
            b = _tournament(ranks, crowd, rng)
            children.append(_vary(pop[a], pop[b], M, params, rng))
        child_evals = [ev(c) for c in children]
        union_g = np.concatenate([pop, np.array([e[0] for e in child_evals])])
        union_pts = pts + [e[1] for e in child_evals]
        u_ranks = np.array(fast_nondominated_sort(union_pts))
        u_crowd = _crowding_by_rank(union_pts, u_ranks)
        order = np.lexsort((-u_crowd, u_ranks))[:N]
        pop = union_g[order]
        pts = [union_pts[i] for i in order]
        ranks, crowd = u_ranks[order], u_crowd[order]
        if callback:
            callback(gen, front_of(pts, [ev(g)[2] for g in pop]))
    return front_of(pts, [ev(g)[2] for g in pop])


def _crowding_by_rank(pts, ranks: np.ndarray) -> np.ndarray:
    crowd = np.zeros(len(pts))
    P = np.asarray(pts, dtype=float)
    for r in np.unique(ranks):
        idx = np.flatnonzero(ranks == r)
        crowd[idx] = crowding_distance(P[idx])
    return crowd


def _tournament(ranks: np.ndarray, crowd: np.ndarray, rng: np.random.Generator) -> int:
    i, j = rng.integers(0, len(ranks), 2)
    if ranks[i] != ranks[j]:
        return int(i if ranks[i] < ranks[j] else j)
    return int(i if crowd[i] >= crowd[j] else j)


def moead(inst: Instance, params: MoeaParams = MoeaParams(), evaluated: list | None = None) -> Front:
    """Decomposition with Tchebycheff aggregation on normalized objectives.

    Returns the external archive of non-dominated evaluated points. When
    ``evaluated`` is a list, every evaluated objective point is appended to it.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    if not inst.pairs:
        return [(ObjectivePoint(0.0, 0.0), Assignment())]
    ev = _Evaluator(inst)
    K = params.n_weights or params.pop_size
    lam = np.column_stack([np.linspace(0, 1, K), 1 - np.linspace(0, 1, K)])
    T = min(params.neighborhood, K)
    dists = np.linalg.norm(lam[:, None] - lam[None], axis=2)
    neigh = np.argsort(dists, axis=1, kind="stable")[:, :T]
    M = inst.n_mecs

    evals = [ev(g) for g in _random_population(inst, K, rng)]
    if evaluated is not None:
        evaluated.extend(e[1] for e in evals)
    pop = np.array([e[0] for e in evals])
    F = np.array([e[1] for e in evals], dtype=float)
    ideal = F.min(axis=0)

    def tcheb(f, k, nadir):
        scale = np.maximum(nadir - ideal, 1e-12)
        return float(np.max(lam[k] * np.abs(f - ideal) / scale))

    for _ in range(params.generations):
        for k in rng.permutation(K):
            a, b = rng.choice(neigh[k], 2, replace=False)
            genes, pt, _ = ev(_vary(pop[a], pop[b], M, params, rng))
            if evaluated is not None:
                evaluated.append(pt)
            f = np.array(pt, dtype=float)
            ideal = np.minimum(ideal, f)
            nadir = F.max(axis=0)
            for j in neigh[k]:
                if tcheb(f, j, nadir) <= tcheb(F[j], j, nadir):
                    pop[j], F[j] = genes, f
    return ev.archive_front()


def write_front_csv(path: str | Path, front: Front, refs: Sequence[str] | None = None) -> None:
    refs = refs if refs is not None else [f"sol-{i}" for i in range(len(front))]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T_ms", "E_J", "solution_ref"])
        for (pt, _), ref in zip(front, refs):
            w.writerow([repr(pt.T), repr(pt.E), ref])
