"""Dominance, the per-instance Pareto archive and normalized hypervolume."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence


class ObjectivePoint(NamedTuple):
    T: float  # total latency, ms
    E: float  # total energy, J


@dataclass(frozen=True)
class PreferenceWeight:
    """A point on the probability simplex; ``w[0]`` weighs latency."""

    w: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if len(w) < 2 or any(x < 0 for x in w) or sum(w) != 1.0:
            raise ValueError(f"preference weight must lie on the simplex, got {w}")
        object.__setattr__(self, "w", w)

    @classmethod
    def of(cls, w1: float) -> "PreferenceWeight":
        """``[w1, 1 - w1]``; the complement is computed so the sum is exactly one."""
        w2 = 1.0 - float(w1)
        return cls((1.0 - w2, w2))  # both subtractions exact, so the sum is exactly 1

    def __iter__(self):
        return iter(self.w)

    def __getitem__(self, i):
        return self.w[i]


LATENCY = PreferenceWeight((1.0, 0.0))
ENERGY = PreferenceWeight((0.0, 1.0))


@dataclass(frozen=True)
class HvConfig:
    T_ref: float = 50.0
    E_ref: float = 100.0
    mode: str = "fixed"

    def __post_init__(self):
        if not (self.T_ref > 0 and self.E_ref > 0):
            raise ValueError("reference point must be strictly positive")

    @classmethod
    def auto(cls, points: Iterable[Sequence[float]], factor: float = 1.1) -> "HvConfig":
        """Reference at ``factor`` times the nadir of ``points``."""
        pts = list(points)
        if not pts:
            raise ValueError("auto reference needs at least one point")
        T = max(p[0] for p in pts) * factor
        E = max(p[1] for p in pts) * factor
        return cls(T if T > 0 else 1.0, E if E > 0 else 1.0, mode="auto")


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def nondominated(points: Sequence[Sequence[float]]) -> list[int]:
    """Indices of points not strictly dominated by any other, first copy of duplicates only."""
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1], i))
    keep: list[int] = []
    best_E = float("inf")
    last = None
    for i in order:
        T, E = points[i][0], points[i][1]
        if last is not None and (T, E) == last:
            continue
        if E < best_E:
            keep.append(i)
            best_E = E
            last = (T, E)
    return sorted(keep)


def hypervolume_norm(front: Iterable[Sequence[float]], cfg: HvConfig) -> float:
    """Area dominated by ``front`` inside the unit box after dividing by the reference.

    Coordinates are clamped to at most 1, so points beyond the reference add
    nothing in the clamped direction.
    """
    pts = sorted((min(p[0] / cfg.T_ref, 1.0), min(p[1] / cfg.E_ref, 1.0)) for p in front)
    stair: list[tuple[float, float]] = []
    for t, e in pts:
        if not stair or e < stair[-1][1]:
            stair.append((t, e))
    area = 0.0
    for i, (t, e) in enumerate(stair):
        t_next = stair[i + 1][0] if i + 1 < len(stair) else 1.0
        area += (t_next - t) * (1.0 - e)
    return area


@dataclass
class ArchiveEntry:
    point: ObjectivePoint
    solution: Any = None


@dataclass
class ParetoArchive:
    """Mutually non-dominated (point, solution) pairs per instance id."""

    fronts: dict[str, list[ArchiveEntry]] = field(default_factory=dict)

    def insert(self, instance_id: str, point: Sequence[float], solution: Any = None) -> bool:
        pt = ObjectivePoint(float(point[0]), float(point[1]))
        front = self.fronts.get(instance_id)
        if front is None:
            self.fronts[instance_id] = [ArchiveEntry(pt, solution)]
            return True
        for entry in front:
            if entry.point == pt or dominates(entry.point, pt):
                return False
        front[:] = [e for e in front if not dominates(pt, e.point)]
        front.append(ArchiveEntry(pt, solution))
        return True

    def points(self, instance_id: str) -> list[ObjectivePoint]:
        return [e.point for e in self.fronts.get(instance_id, [])]

    def hv(self, instance_id: str, cfg: HvConfig) -> float:
        return hypervolume_norm(self.points(instance_id), cfg)

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self.fronts


def archive_insert(archive: ParetoArchive, instance_id: str, point, solution=None) -> tuple[ParetoArchive, bool]:
    inserted = archive.insert(instance_id, point, solution)
    return archive, inserted


def write_hv_report(path: str | Path, report: dict[str, dict]) -> None:
    """``report`` maps instance id to ``{"hv", "mode", "ref"}``."""
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
