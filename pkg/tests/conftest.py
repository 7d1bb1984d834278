import numpy as np
import pytest

from sccmoco.instance import (
    Instance,
    MecSpec,
    SystemConstants,
    UserSpec,
    VirtualSpaceSpec,
    desk_config,
    generate_instances,
    link_costs_from_distances,
)


def build_instance(
    dist,
    freq,
    local,
    p,
    spaces,
    max_tasks=None,
    capacity=None,
    constants=SystemConstants(),
    instance_id="hand",
):
    """Hand-made instance from an explicit MEC distance matrix (km)."""
    dist = np.asarray(dist, dtype=float)
    M = dist.shape[0]
    max_tasks = max_tasks if max_tasks is not None else [100] * M
    capacity = capacity if capacity is not None else [1e6] * M
    mecs = [MecSpec(float(capacity[m]), float(freq[m]), int(max_tasks[m]), (0.0, 0.0)) for m in range(M)]
    users = [UserSpec(int(lp), 0.0, 0.0) for lp in local]
    return Instance(
        id=instance_id,
        spaces=[VirtualSpaceSpec(*s) for s in spaces],
        mecs=mecs,
        users=users,
        p=np.asarray(p, dtype=float).reshape(len(users), len(spaces)),
        links=link_costs_from_distances(dist, local, constants),
        constants=constants,
    )


@pytest.fixture
def two_mec_instance():
    """One user on MEC 0 (2 Gc/s); MEC 1 is 10 km away at 4 Gc/s."""
    # space: cache 10 MB, 10 J maintenance, 100 Mc workload, 10 Mbit frames
    return build_instance(
        dist=[[0, 10], [10, 0]],
        freq=[2.0, 4.0],
        local=[0],
        p=[[1.0]],
        spaces=[(10.0, 10.0, 100.0, 10.0)],
    )


@pytest.fixture(scope="session")
def desk_instances():
    return generate_instances(desk_config(), 30, seed=11)


@pytest.fixture(scope="session")
def tiny_instances():
    return generate_instances(desk_config(n_users=4, n_spaces=2, n_mecs=3), 30, seed=12)


# one line per acceptance criterion, printed after the run so -v output keeps them
ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record a PASS/FAIL line for criterion ``n`` and return the verdict."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(n: int, ok: bool, detail: str) -> bool:
        lines.append((n, f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    lines = terminalreporter.config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
