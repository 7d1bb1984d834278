"""Problem datum for multi-user VR placement on a distributed MEC network.

Units are canonical throughout the package: latency in milliseconds, energy in
joules, data in megabits, cache in megabytes, workload in mega-cycles and
frequency in giga-cycles per second.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
SCHEMA_VERSION = 1

CACHE_LEVELS_MB = (10.0, 50.0, 100.0, 500.0, 1000.0, 1500.0)
ENERGY_LEVELS_J = (10.0, 15.0, 20.0, 30.0, 40.0, 50.0)
WORKLOAD_LEVELS_MC = (20.0, 50.0, 80.0, 100.0, 120.0, 150.0)
FRAME_LEVELS_MBIT = (10.0, 25.0, 50.0, 100.0, 120.0, 150.0)


class EmptyDatasetError(ValueError):
    pass


class InfeasibleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VirtualSpaceSpec:
    cache_size: float  # c_v, MB
    maint_energy: float  # E_v, J
    workload: float  # h_v, mega-cycles per user
    frame_size: float  # D_v, Mbit per user


@dataclass(frozen=True)
class MecSpec:
    cache_capacity: float  # C_m, MB
    frequency: float  # F_m, Gc/s
    max_tasks: int  # N_m
    location: tuple[float, float]  # (lat, lon) degrees


@dataclass(frozen=True)
class UserSpec:
    local_mec: int
    edge_latency_coeff: float  # kappa_u, ms/Mbit
    edge_energy_coeff: float  # zeta_u, J/Mbit


@dataclass(frozen=True)
class SystemConstants:
    energy_coeff: float = 1e-25  # xi, s*J/cycle
    per_km_sync_latency: float = 0.1  # ms/km
    per_km_sync_energy: float = 0.15  # J/km
    per_km_frame_latency: float = 0.06  # ms/(km*Mbit)
    per_km_frame_energy: float = 0.01  # J/(km*Mbit)

    @property
    def compute_energy_scale(self) -> float:
        """Factor turning p*h[Mc]*F[Gc/s]^2 into joules."""
        return self.energy_coeff * 1e6 * 1e18


@dataclass(frozen=True)
class CellRecord:
    latitude: float
    longitude: float
    user_count: int


@dataclass(frozen=True, eq=False)
class LinkCosts:
    sync_latency: np.ndarray  # d[m][n]
    sync_energy: np.ndarray  # e[m][n]
    sensor_latency: np.ndarray  # d_user[u][m]
    sensor_energy: np.ndarray  # e_user[u][m]
    frame_latency_coeff: np.ndarray  # kappa[m][u]
    frame_energy_coeff: np.ndarray  # zeta[m][u]

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True, eq=False)
class Instance:
    """Immutable problem instance; arrays are read-only."""

    id: str
    spaces: tuple[VirtualSpaceSpec, ...]
    mecs: tuple[MecSpec, ...]
    users: tuple[UserSpec, ...]
    p: np.ndarray  # |U| x |V| request probabilities
    links: LinkCosts
    constants: SystemConstants = field(default_factory=SystemConstants)

    def __post_init__(self):
        object.__setattr__(self, "spaces", tuple(self.spaces))
        object.__setattr__(self, "mecs", tuple(self.mecs))
        object.__setattr__(self, "users", tuple(self.users))
        p = np.array(self.p, dtype=float).reshape(len(self.users), len(self.spaces))
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_spaces(self) -> int:
        return len(self.spaces)

    @property
    def n_mecs(self) -> int:
        return len(self.mecs)

    # column views, computed once
    @cached_property
    def cache_size(self) -> np.ndarray:
        return _ro([s.cache_size for s in self.spaces])

    @cached_property
    def maint_energy(self) -> np.ndarray:
        return _ro([s.maint_energy for s in self.spaces])

    @cached_property
    def workload(self) -> np.ndarray:
        return _ro([s.workload for s in self.spaces])

    @cached_property
    def frame_size(self) -> np.ndarray:
        return _ro([s.frame_size for s in self.spaces])

    @cached_property
    def cache_capacity(self) -> np.ndarray:
        return _ro([m.cache_capacity for m in self.mecs])

    @cached_property
    def frequency(self) -> np.ndarray:
        return _ro([m.frequency for m in self.mecs])

    @cached_property
    def max_tasks(self) -> np.ndarray:
        return _ro([m.max_tasks for m in self.mecs], dtype=np.int64)

    @cached_property
    def locations(self) -> np.ndarray:
        return _ro([m.location for m in self.mecs]).reshape(-1, 2)

    @cached_property
    def local_mec(self) -> np.ndarray:
        return _ro([u.local_mec for u in self.users], dtype=np.int64)

    @cached_property
    def edge_latency_coeff(self) -> np.ndarray:
        return _ro([u.edge_latency_coeff for u in self.users])

    @cached_property
    def edge_energy_coeff(self) -> np.ndarray:
        return _ro([u.edge_energy_coeff for u in self.users])

    @cached_property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """Required (user, space) pairs, i.e. p > 0, in lexicographic order."""
        us, vs = np.nonzero(self.p > 0)
        return tuple(zip(us.tolist(), vs.tolist()))

    @cached_property
    def triples(self) -> tuple[tuple[int, int, int], ...]:
        """Admissible (u, v, m) triples in canonical order."""
        return tuple((u, v, m) for u, v in self.pairs for m in range(self.n_mecs))

    @cached_property
    def all_local(self) -> dict[tuple[int, int], int]:
        return {(u, v): int(self.local_mec[u]) for u, v in self.pairs}

    def mean_intercell_km(self) -> float:
        if self.n_mecs < 2:
            return 0.0
        dist = distance_matrix(self.locations)
        return float(dist[np.triu_indices(self.n_mecs, 1)].mean())


def _ro(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# geometry and link costs


def haversine_km(a: Sequence[float], b: Sequence[float]) -> float:
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distance_matrix(locations) -> np.ndarray:
    locs = [tuple(x) for x in np.asarray(locations, dtype=float).reshape(-1, 2)]
    n = len(locs)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = haversine_km(locs[i], locs[j])
    return dist


def derive_link_costs(locations, local_map: Sequence[int], constants: SystemConstants) -> LinkCosts:
    """Link costs proportional to great-circle distance between cells.

    ``local_map[u]`` is the MEC index of user u's own base station.
    """
    dist = distance_matrix(locations)
    if dist.shape[0] < 1:
        raise ValueError("need at least one MEC")
    return link_costs_from_distances(dist, local_map, constants)


def link_costs_from_distances(dist: np.ndarray, local_map: Sequence[int], constants: SystemConstants) -> LinkCosts:
    dist = np.asarray(dist, dtype=float)
    local = np.asarray(local_map, dtype=np.int64)
    user_dist = dist[local, :]  # |U| x |M|, zero at lp_u
    c = constants
    return LinkCosts(
        sync_latency=dist * c.per_km_sync_latency,
        sync_energy=dist * c.per_km_sync_energy,
        sensor_latency=user_dist * c.per_km_sync_latency,
        sensor_energy=user_dist * c.per_km_sync_energy,
        frame_latency_coeff=user_dist.T * c.per_km_frame_latency,
        frame_energy_coeff=user_dist.T * c.per_km_frame_energy,
    )


# ---------------------------------------------------------------------------
# cell ingestion


def ingest_cells(csv_path: str | Path, min_users: int = 50) -> list[CellRecord]:
    """Read cell towers from a CSV with ``lat``, ``lon`` and ``samples`` columns.

    Only cells with strictly more than ``min_users`` users are kept, in file
    order. Malformed rows are skipped and logged.
    """
    path = Path(csv_path)
    if not path.exists():
        raise FileNotFoundError(path)
    records: list[CellRecord] = []
    valid = skipped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                lat, lon = float(row["lat"]), float(row["lon"])
                count = int(float(row["samples"]))
            except (KeyError, TypeError, ValueError):
                skipped += 1
                continue
            if not (-90 <= lat <= 90 and -180 <= lon <= 180) or count < 0:
                skipped += 1
                continue
            valid += 1
            if count > min_users:
                records.append(CellRecord(lat, lon, count))
    if skipped:
        log.warning("ingest_cells: skipped %d malformed rows in %s", skipped, path)
    if valid == 0:
        raise EmptyDatasetError(f"no valid cell rows in {path}")
    return records


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 50
    n_spaces: int = 10
    n_mecs: int = 20
    cache_levels: tuple[float, ...] = CACHE_LEVELS_MB
    energy_levels: tuple[float, ...] = ENERGY_LEVELS_J
    workload_levels: tuple[float, ...] = WORKLOAD_LEVELS_MC
    frame_levels: tuple[float, ...] = FRAME_LEVELS_MBIT
    cache_capacity_range: tuple[float, float] = (15000.0, 20000.0)
    frequency_range: tuple[float, float] = (2.0, 5.0)
    max_tasks_range: tuple[int, int] = (10, 15)  # inclusive
    constants: SystemConstants = SystemConstants()
    p_offline: float = 0.1
    max_active_spaces: int = 3
    # synthetic MEC placement: uniform in a square of this side around center
    area_km: float = 14.0
    center: tuple[float, float] = (37.4, -122.1)
    # device-to-base-station distance, drives kappa_u / zeta_u only
    user_radius_km: tuple[float, float] = (0.05, 1.0)
    mec_locations: tuple[tuple[float, float], ...] | None = None
    cells: tuple[CellRecord, ...] | None = None
    retry_budget: int = 100

    def validate(self) -> None:
        if min(self.n_users, self.n_spaces, self.n_mecs) < 0 or self.n_mecs < 1:
            raise ValueError("counts must be non-negative with at least one MEC")
        if not 0.0 <= self.p_offline <= 1.0:
            raise ValueError("p_offline must lie in [0, 1]")
        if self.n_spaces and not 1 <= self.max_active_spaces <= self.n_spaces:
            raise ValueError("max_active_spaces must lie in [1, n_spaces]")
        lo, hi = self.max_tasks_range
        if lo < 0 or hi < lo:
            raise ValueError("bad max_tasks_range")
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be positive")


def paper_config(**overrides) -> GeneratorConfig:
    return replace(GeneratorConfig(), **overrides)


def desk_config(**overrides) -> GeneratorConfig:
    """Small instances where the task and cache limits actually bind."""
    base = GeneratorConfig(
        n_users=6,
        n_spaces=3,
        n_mecs=4,
        cache_capacity_range=(1500.0, 3000.0),
        max_tasks_range=(2, 5),
        max_active_spaces=2,
    )
    return replace(base, **overrides)


def generate_requests(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    p = np.zeros((cfg.n_users, cfg.n_spaces))
    if cfg.n_spaces == 0:
        return p
    for u in range(cfg.n_users):
        if rng.random() < cfg.p_offline:
            continue
        k = int(rng.integers(1, cfg.max_active_spaces + 1))
        chosen = rng.choice(cfg.n_spaces, size=k, replace=False)
        weights = rng.dirichlet(np.ones(k))
        weights = np.maximum(weights, 1e-3)  # keep every chosen entry strictly positive
        total = 1.0 - rng.random()  # in (0, 1]
        p[u, chosen] = weights / weights.sum() * total
    return p


def _locations(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.cells is not None:
        if len(cfg.cells) < cfg.n_mecs:
            raise InfeasibleConfigError(f"{len(cfg.cells)} cells cannot host {cfg.n_mecs} MECs")
        idx = rng.choice(len(cfg.cells), size=cfg.n_mecs, replace=False)
        return np.array([(cfg.cells[i].latitude, cfg.cells[i].longitude) for i in idx])
    if cfg.mec_locations is not None:
        locs = np.asarray(cfg.mec_locations, dtype=float).reshape(-1, 2)
        if len(locs) != cfg.n_mecs:
            raise ValueError("mec_locations length must equal n_mecs")
        return locs
    lat0, lon0 = cfg.center
    half = cfg.area_km / 2
    dy = rng.uniform(-half, half, cfg.n_mecs)
    dx = rng.uniform(-half, half, cfg.n_mecs)
    km_per_deg = math.pi * EARTH_RADIUS_KM / 180
    lat = lat0 + dy / km_per_deg
    lon = lon0 + dx / (km_per_deg * math.cos(math.radians(lat0)))
    return np.column_stack([lat, lon])


def all_local_feasible(p: np.ndarray, local: np.ndarray, cache_size, capacity, max_tasks) -> bool:
    n_mecs = len(capacity)
    tasks = np.zeros(n_mecs, dtype=np.int64)
    cached = np.zeros((p.shape[1], n_mecs), dtype=bool)
    for u, v in zip(*np.nonzero(p > 0)):
        tasks[local[u]] += 1
        cached[v, local[u]] = True
    load = np.asarray(cache_size) @ cached if p.shape[1] else np.zeros(n_mecs)
    return bool(np.all(tasks <= max_tasks) and np.all(load <= np.asarray(capacity)))


def generate_instance(cfg: GeneratorConfig, rng: np.random.Generator, instance_id: str | None = None) -> Instance:
    cfg.validate()
    if instance_id is None:
        instance_id = f"i{int(rng.integers(2**32)):08x}"
    pick = lambda levels: float(levels[int(rng.integers(len(levels)))])  # noqa: E731
    locations = _locations(cfg, rng)
    for _ in range(cfg.retry_budget):
        spaces = tuple(
            VirtualSpaceSpec(pick(cfg.cache_levels), pick(cfg.energy_levels), pick(cfg.workload_levels), pick(cfg.frame_levels))
            for _ in range(cfg.n_spaces)
        )
        cache_size = np.array([s.cache_size for s in spaces])
        capacity = rng.uniform(*cfg.cache_capacity_range, cfg.n_mecs)
        freq = rng.uniform(*cfg.frequency_range, cfg.n_mecs)
        max_tasks = rng.integers(cfg.max_tasks_range[0], cfg.max_tasks_range[1] + 1, cfg.n_mecs)
        local = rng.integers(0, cfg.n_mecs, cfg.n_users)
        radius = rng.uniform(*cfg.user_radius_km, cfg.n_users)
        p = generate_requests(cfg, rng)
        if all_local_feasible(p, local, cache_size, capacity, max_tasks):
            break
    else:
        raise InfeasibleConfigError(f"no feasible all-local instance within {cfg.retry_budget} retries")
    c = cfg.constants
    mecs = tuple(
        MecSpec(float(capacity[m]), float(freq[m]), int(max_tasks[m]), (float(locations[m, 0]), float(locations[m, 1])))
        for m in range(cfg.n_mecs)
    )
    users = tuple(
        UserSpec(int(local[u]), float(radius[u] * c.per_km_frame_latency), float(radius[u] * c.per_km_frame_energy))
        for u in range(cfg.n_users)
    )
    inst = Instance(
        id=instance_id,
        spaces=spaces,
        mecs=mecs,
        users=users,
        p=p,
        links=derive_link_costs(locations, local, c),
        constants=c,
    )
    return inst


def generate_instances(cfg: GeneratorConfig, count: int, seed: int, prefix: str = "inst") -> list[Instance]:
    """``count`` instances from independent child streams of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [generate_instance(cfg, np.random.default_rng(s), f"{prefix}-{seed}-{i:05d}") for i, s in enumerate(children)]


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Issue:
    kind: str
    message: str


def validate_instance(inst: Instance) -> list[Issue]:
    """Every violated invariant of ``inst``; empty iff valid."""
    issues: list[Issue] = []
    U, V, M = inst.n_users, inst.n_spaces, inst.n_mecs
    add = lambda kind, msg: issues.append(Issue(kind, msg))  # noqa: E731
    L = inst.links
    shapes = {
        "sync_latency": (M, M),
        "sync_energy": (M, M),
        "sensor_latency": (U, M),
        "sensor_energy": (U, M),
        "frame_latency_coeff": (M, U),
        "frame_energy_coeff": (M, U),
    }
    for name, shape in shapes.items():
        if getattr(L, name).shape != shape:
            add("dimension", f"{name} has shape {getattr(L, name).shape}, expected {shape}")
    if inst.p.shape != (U, V):
        add("dimension", f"p has shape {inst.p.shape}, expected {(U, V)}")
    if issues:
        return issues

    for v, s in enumerate(inst.spaces):
        if min(s.cache_size, s.maint_energy, s.workload, s.frame_size) <= 0:
            add("space_range", f"space {v} has a non-positive field")
    for m, mec in enumerate(inst.mecs):
        if mec.cache_capacity <= 0 or mec.frequency <= 0 or mec.max_tasks < 0:
            add("mec_range", f"MEC {m} has an out-of-range resource")
        lat, lon = mec.location
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            add("mec_range", f"MEC {m} location out of range")
    for u, user in enumerate(inst.users):
        if not 0 <= user.local_mec < M:
            add("user_range", f"user {u} local MEC {user.local_mec} out of range")
        if user.edge_latency_coeff < 0 or user.edge_energy_coeff < 0:
            add("user_range", f"user {u} has a negative edge coefficient")
    if np.any(np.diag(L.sync_latency) != 0):
        add("sync_diagonal", "nonzero sync diagonal in latency matrix")
    if np.any(np.diag(L.sync_energy) != 0):
        add("sync_diagonal", "nonzero sync diagonal in energy matrix")
    for name in shapes:
        if np.any(getattr(L, name) < 0):
            add("negative_link", f"{name} has negative entries")
    if not np.array_equal(L.sync_latency, L.sync_latency.T) or not np.array_equal(L.sync_energy, L.sync_energy.T):
        add("asymmetric_sync", "sync matrices are not symmetric")
    for u, user in enumerate(inst.users):
        lp = user.local_mec
        if 0 <= lp < M:
            local_vals = (L.sensor_latency[u, lp], L.sensor_energy[u, lp], L.frame_latency_coeff[lp, u], L.frame_energy_coeff[lp, u])
            if any(x != 0 for x in local_vals):
                add("local_link", f"user {u} has nonzero cost to its local MEC")
    if np.any(inst.p < 0) or np.any(inst.p > 1):
        add("request_range", "request probabilities outside [0, 1]")
    for u, total in enumerate(inst.p.sum(axis=1)):
        if total > 1 + 1e-12:
            add("request_sum", f"user {u} request probabilities sum to {total:.6g} > 1")
    return issues


# ---------------------------------------------------------------------------
# JSON round-trip


def instance_to_dict(inst: Instance) -> dict:
    L = inst.links
    return {
        "v": SCHEMA_VERSION,
        "id": inst.id,
        "constants": asdict(inst.constants),
        "spaces": [asdict(s) for s in inst.spaces],
        "mecs": [{**asdict(m), "location": list(m.location)} for m in inst.mecs],
        "users": [asdict(u) for u in inst.users],
        "p": inst.p.tolist(),
        "links": {name: getattr(L, name).tolist() for name in L.__dataclass_fields__},
    }


def instance_from_dict(data: dict) -> Instance:
    if data.get("v") != SCHEMA_VERSION:
        raise ValueError(f"unsupported instance schema version {data.get('v')!r}")
    n_users = len(data["users"])
    n_spaces = len(data["spaces"])
    p = np.array(data["p"], dtype=float).reshape(n_users, n_spaces)
    n_mecs = len(data["mecs"])
    links = {}
    for name, shape in (
        ("sync_latency", (n_mecs, n_mecs)),
        ("sync_energy", (n_mecs, n_mecs)),
        ("sensor_latency", (n_users, n_mecs)),
        ("sensor_energy", (n_users, n_mecs)),
        ("frame_latency_coeff", (n_mecs, n_users)),
        ("frame_energy_coeff", (n_mecs, n_users)),
    ):
        links[name] = np.array(data["links"][name], dtype=float).reshape(shape)
    return Instance(
        id=data["id"],
        spaces=tuple(VirtualSpaceSpec(**s) for s in data["spaces"]),
        mecs=tuple(MecSpec(m["cache_capacity"], m["frequency"], int(m["max_tasks"]), tuple(m["location"])) for m in data["mecs"]),
        users=tuple(UserSpec(int(u["local_mec"]), u["edge_latency_coeff"], u["edge_energy_coeff"]) for u in data["users"]),
        p=p,
        links=LinkCosts(**links),
        constants=SystemConstants(**data["constants"]),
    )


def save_instance(inst: Instance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst)))


def load_instance(path: str | Path) -> Instance:
    return instance_from_dict(json.loads(Path(path).read_text()))
