"""Feasible-solution constructors: Random, Weight-Greedy and greedy repair."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .costmodel import Assignment, PlacementState, is_feasible, objectives
from .instance import Instance
from .pareto import ObjectivePoint, nondominated

TRADEOFFS = (0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 10.0)


class RepairError(RuntimeError):
    pass


def _fallback(inst: Instance) -> Assignment:
    x = Assignment(inst.all_local)
    if not is_feasible(inst, x):
        raise RepairError(f"instance {inst.id}: even the all-local placement is infeasible")
    return x


def greedy(inst: Instance, a: float, b: float) -> Assignment:
    """Place pairs in descending p on the MEC with the smallest exact increment of a*T + b*E."""
    state = PlacementState(inst)
    n = len(inst.pairs)
    for i in sorted(range(n), key=lambda i: (-inst.p[inst.pairs[i]], i)):
        best_m, best_cost = -1, float("inf")
        for m in range(inst.n_mecs):
            if not state.can_place(i, m):
                continue
            dT, dE = state.delta(i, m)
            cost = a * dT + b * dE
            if cost < best_cost:
                best_m, best_cost = m, cost
        if best_m < 0:
            return _fallback(inst)
        state.place(i, best_m)
    return state.assignment()


def weight_greedy(inst: Instance, ell: float) -> Assignment:
    if ell < 0:
        raise ValueError("trade-off factor must be non-negative")
    return greedy(inst, 1.0, ell)


def front_from_tradeoffs(inst: Instance, ells: Sequence[float] = TRADEOFFS) -> list[tuple[ObjectivePoint, Assignment]]:
    sols = []
    seen = set()
    for ell in ells:
        x = weight_greedy(inst, ell)
        if x in seen:
            continue
        seen.add(x)
        sols.append((ObjectivePoint(*objectives(inst, x)), x))
    keep = nondominated([s[0] for s in sols])
    return [sols[i] for i in keep]


def random_feasible(inst: Instance, rng: np.random.Generator, attempts: int = 50) -> Assignment:
    n = len(inst.pairs)
    for _ in range(attempts):
        state = PlacementState(inst)
        for i in rng.permutation(n):
            cands = state.feasible_mecs(int(i))
            if not cands:
                break
            state.place(int(i), cands[int(rng.integers(len(cands)))])
        else:
            return state.assignment()
    return _fallback(inst)


def random_front(inst: Instance, rng: np.random.Generator, samples: int = 100) -> list[tuple[ObjectivePoint, Assignment]]:
    sols = []
    for _ in range(samples):
        x = random_feasible(inst, rng)
        sols.append((ObjectivePoint(*objectives(inst, x)), x))
    keep = nondominated([s[0] for s in sols])
    return [sols[i] for i in keep]


def marginals_from_assignment(inst: Instance, x: Assignment) -> np.ndarray:
    q = np.zeros((len(inst.pairs), inst.n_mecs))
    for i, pair in enumerate(inst.pairs):
        if pair in x:
            q[i, x[pair]] = 1.0
    return q


def repair(inst: Instance, q) -> Assignment:
    """Greedy projection of marginals onto feasible placements.

    ``q`` holds one probability per admissible triple, as an array shaped
    ``(len(inst.pairs), n_mecs)`` or flat in ``inst.triples`` order. Pairs with
    the most confident marginal go first; each takes its highest-q feasible
    MEC, preferring MECs that already cache the space, then the user's local
    MEC, then the lowest index.
    """
    n, M = len(inst.pairs), inst.n_mecs
    q = np.asarray(q, dtype=float).reshape(n, M)
    tab_local = [int(inst.local_mec[u]) for u, _ in inst.pairs]
    state = PlacementState(inst)
    rows = q.tolist()
    order = sorted(range(n), key=lambda i: (-max(rows[i]) if M else 0.0, i))

    def pick(i: int) -> int:
        v = inst.pairs[i][1]
        best, best_key = -1, None
        for m in range(M):
            if not state.can_place(i, m):
                continue
            key = (-rows[i][m], 0 if state.count[v][m] else 1, 0 if m == tab_local[i] else 1, m)
            if best_key is None or key < best_key:
                best, best_key = m, key
        return best

    deferred = []
    for i in order:
        m = pick(i)
        if m < 0:
            deferred.append(i)
        else:
            state.place(i, m)
    for i in deferred:
        m = pick(i)
        if m < 0:
            return _fallback(inst)
        state.place(i, m)
    return state.assignment()
