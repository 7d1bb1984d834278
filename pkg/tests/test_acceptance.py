"""End-to-end acceptance gate at desk scale.

Each test records one PASS/FAIL line that is printed in the terminal summary.
The learned-model checks share one trained checkpoint and one fine-tuning run,
so the module takes roughly a quarter of an hour on a single core.
"""

import time

import numpy as np
import pytest

from sccmoco.costmodel import (
    Assignment,
    UndefinedRateError,
    avg_placements,
    cache_from_assignment,
    check_feasible,
    evaluate_with_cache,
    local_rate,
    objectives,
    to_dense,
)
from sccmoco.heuristics import front_from_tradeoffs, random_feasible, random_front, repair
from sccmoco.instance import desk_config, generate_instances
from sccmoco.moea import MoeaParams, moead, nsga2
from sccmoco.neural import (
    Denoiser,
    NetConfig,
    NoiseSchedule,
    TrainConfig,
    bits_to_marginals,
    build_graph,
    consistency_sample,
    cosine_steps,
    example_from_label,
    grad_check,
    noise_sample,
    noise_step,
    q_step,
    qbar,
    train_cm,
)
from sccmoco.oracle import Objective, OracleConfig, enumerate_optimum, enumerate_pareto_exact, label_dataset, solve_exact
from sccmoco.pareto import ENERGY, LATENCY, HvConfig, hypervolume_norm, nondominated
from sccmoco.rl import PpoConfig, mo_cmpo, policy_front, weight_grid

HELD_OUT = dict(count=50, seed=999, prefix="held")


def held_out():
    return generate_instances(desk_config(), **HELD_OUT)


@pytest.fixture(scope="module")
def pretrained():
    start = time.perf_counter()
    insts = generate_instances(desk_config(), 1000, seed=1, prefix="train")
    labels = label_dataset(insts)
    by_id = {inst.id: inst for inst in insts}
    examples = [example_from_label(by_id[lab.instance_id], lab.x, LATENCY if lab.objective == 1 else ENERGY) for lab in labels]
    model = Denoiser.create(seed=0)
    train_cm(model, examples, TrainConfig(steps=2000, lr=1e-4))
    return model, len(labels), time.perf_counter() - start, insts


@pytest.fixture(scope="module")
def finetuned(pretrained):
    model, _, _, insts = pretrained
    final, _, history = mo_cmpo(model, insts[:64], PpoConfig(iterations=10), np.random.default_rng(0))
    return final, history


# ---------------------------------------------------------------------------
# exact components


def test_oracle_matches_enumeration(acceptance):
    start = time.perf_counter()
    insts = generate_instances(desk_config(n_users=4, n_spaces=2, n_mecs=3), 100, seed=100)
    mismatches = 0
    for inst in insts:
        for obj in (Objective.latency(), Objective.energy()):
            res = solve_exact(inst, OracleConfig(objective=obj))
            x, v = enumerate_optimum(inst, obj)
            mismatches += not (res.certified and res.value == v and res.x == x)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60.0
    assert acceptance(1, ok, f"oracle vs enumeration on 100 instances: {mismatches} mismatches, {elapsed:.1f} s"), mismatches


def test_minimal_cache_substitution(acceptance):
    insts = generate_instances(desk_config(), 20, seed=11)
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(1000):
        inst = insts[k % 20]
        x = Assignment({pair: int(rng.integers(inst.n_mecs)) for pair in inst.pairs if rng.random() < 0.8})
        ref = evaluate_with_cache(inst, to_dense(inst, x), cache_from_assignment(x, inst.n_spaces, inst.n_mecs))
        got = objectives(inst, x)
        for a, b in zip(got, ref):
            worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    assert acceptance(2, worst <= 1e-12, f"explicit minimal cache vs evaluate, worst relative gap {worst:.2e}"), worst


def test_repair_soundness(acceptance):
    insts = generate_instances(desk_config(), 100, seed=13)
    rng = np.random.default_rng(0)
    bad = total = 0
    for inst in insts:
        for _ in range(1000):
            x = repair(inst, rng.random((len(inst.pairs), inst.n_mecs)))
            bad += bool(check_feasible(inst, x))
            total += 1
    assert acceptance(3, bad == 0, f"{total - bad}/{total} repaired solutions feasible"), bad


def test_diffusion_correctness(acceptance):
    s = NoiseSchedule()
    P = np.eye(2)
    worst = 0.0
    for t in range(1, s.T + 1):
        P = P @ q_step(s, t)
        worst = max(worst, float(np.abs(qbar(s, t) - P).max()))
    rng = np.random.default_rng(0)
    n = 100_000
    tvs = []
    for t in (5, 40, 200):
        x0 = (rng.random(n) < 0.3).astype(np.int8)
        seq = x0.copy()
        for k in range(1, t + 1):
            seq = noise_step(seq, k, s, rng)
        marg = noise_sample(x0, t, s, rng)
        cells = lambda xt: np.bincount(2 * x0 + xt, minlength=4) / n  # noqa: E731
        tvs.append(0.5 * float(np.abs(cells(seq) - cells(marg)).sum()))
    terminal = abs(float(noise_sample(np.ones(n, dtype=np.int8), s.T, s, rng).mean()) - 0.5)
    ok = worst <= 1e-12 and max(tvs) < 0.02 and terminal < 0.02
    detail = f"closed form gap {worst:.1e}, sequential TV {max(tvs):.4f}, terminal TV {terminal:.4f}"
    assert acceptance(4, ok, detail), detail


def test_gradient_fidelity(acceptance):
    inst = generate_instances(desk_config(p_offline=0.0), 1, seed=21)[0]
    model = Denoiser.create(NetConfig(layers=2, hidden=16), seed=3)
    g = build_graph(inst, (0.3, 0.7))
    rng = np.random.default_rng(1)
    bits = lambda: rng.integers(0, 2, g.n_vars)  # noqa: E731
    err = grad_check(model, g, bits(), bits(), 600, bits(), 200, probes=300, seed=4)
    assert acceptance(5, err < 1e-4, f"max relative gradient error {err:.2e} over 300 probes"), err


def test_hypervolume_axioms(acceptance):
    rng = np.random.default_rng(0)
    cfg = HvConfig(1.0, 1.0)
    worst = 0.0
    monotone = True
    for _ in range(500):
        pts = [tuple(p) for p in np.round(rng.uniform(0, 1.2, (int(rng.integers(1, 10)), 2)), 2)]
        hv = hypervolume_norm(pts, cfg)
        extra = tuple(np.round(rng.uniform(0, 1.2, 2), 2))
        monotone &= hypervolume_norm(pts + [extra], cfg) >= hv - 1e-12
        perm = [pts[i] for i in rng.permutation(len(pts))]
        worst = max(worst, abs(hypervolume_norm(perm + pts[:2], cfg) - hv))
        worst = max(worst, abs(hypervolume_norm([pts[i] for i in nondominated(pts)], cfg) - hv))
    worked = (hypervolume_norm([(25, 50)], HvConfig(50, 100)), hypervolume_norm([(0.2, 0.8), (0.8, 0.2)], cfg))
    ok = monotone and worst <= 1e-12 and abs(worked[0] - 0.25) <= 1e-12 and abs(worked[1] - 0.28) <= 1e-12
    detail = f"monotone={monotone}, invariance gap {worst:.1e}, worked values {worked[0]:.12f} {worked[1]:.12f}"
    assert acceptance(6, ok, detail), detail


# ---------------------------------------------------------------------------
# learned policies


def test_learning_signal(acceptance, pretrained):
    model, n_labels, seconds, _ = pretrained
    rates = []
    for w, k in ((LATENCY, 0), (ENERGY, 1)):
        wins = 0
        for i, inst in enumerate(held_out()):
            g = build_graph(inst, w)
            rng = np.random.default_rng(i)
            cm = [objectives(inst, repair(inst, bits_to_marginals(inst, consistency_sample(model, g, 3, rng).marginals)))[k] for _ in range(20)]
            rnd = [objectives(inst, random_feasible(inst, rng))[k] for _ in range(20)]
            wins += np.mean(cm) < np.mean(rnd)
        rates.append(wins / HELD_OUT["count"])
    ok = n_labels >= 2000 and min(rates) >= 0.8 and seconds < 7200
    detail = f"wins vs random latency {rates[0]:.2f} energy {rates[1]:.2f}, {n_labels} labels, training {seconds:.0f} s"
    assert acceptance(7, ok, detail), detail


def test_finetuning_benefit(acceptance, finetuned):
    model, history = finetuned
    hv = [h["archive_hv_per_instance"] for h in history]
    monotone = len(hv) == 10 and all(b[i] >= a[i] for a, b in zip(hv, hv[1:]) for i in a)
    wins = 0
    for i, inst in enumerate(held_out()):
        mine = [pt for pt, _ in policy_front(model, inst, weight_grid(21), np.random.default_rng(i), samples=4)]
        wg = [pt for pt, _ in front_from_tradeoffs(inst)]
        ref = HvConfig.auto(mine + wg)
        wins += hypervolume_norm(mine, ref) >= hypervolume_norm(wg, ref)
    rate = wins / HELD_OUT["count"]
    ok = monotone and rate >= 0.6
    detail = f"archive HV monotone={monotone}, final policy HV >= weight-greedy on {rate:.2f} of held-out instances"
    assert acceptance(8, ok, detail), detail


def _mean_rate(fn, inst_xs):
    vals = []
    for inst, x in inst_xs:
        try:
            vals.append(fn(inst, x))
        except UndefinedRateError:
            continue
    return float(np.mean(vals))


def test_orientation_trends(acceptance, finetuned):
    model, _ = finetuned
    rows = []
    ok = True
    for area in (4.0, 8.0, 14.0, 28.0, 56.0):
        insts = generate_instances(desk_config(area_km=area), 20, seed=500, prefix=f"a{area:g}")
        rng = np.random.default_rng(int(area))
        picks = {}
        for name, w in (("latency", LATENCY), ("energy", ENERGY)):
            picks[name] = []
            for inst in insts:
                res = consistency_sample(model, build_graph(inst, w), 3, rng, steps=cosine_steps(3, model.schedule.T))
                picks[name].append((inst, repair(inst, bits_to_marginals(inst, res.marginals))))
        lr = [_mean_rate(local_rate, picks[k]) for k in ("latency", "energy")]
        ap = [_mean_rate(avg_placements, picks[k]) for k in ("latency", "energy")]
        ok &= lr[0] > lr[1] and ap[0] >= ap[1]
        rows.append(f"{area:g}km local {lr[0]:.2f}/{lr[1]:.2f} placements {ap[0]:.2f}/{ap[1]:.2f}")
    detail = "latency/energy " + "; ".join(rows)
    assert acceptance(9, ok, detail), detail


def test_inference_cost_ordering(acceptance, pretrained):
    model = pretrained[0]
    ratios = []
    for i, inst in enumerate(held_out()[:10]):
        g = build_graph(inst, (0.5, 0.5))
        best = {}
        for K in (3, 100):
            steps = cosine_steps(K, model.schedule.T)
            times = []
            for r in range(3):
                t0 = time.perf_counter()
                consistency_sample(model, g, K, np.random.default_rng(r), steps=steps)
                times.append(time.perf_counter() - t0)
            best[K] = min(times)
        ratios.append(best[100] / best[3])
    detail = f"100-step over 3-step wall clock, smallest per-instance ratio {min(ratios):.1f}"
    assert acceptance(10, min(ratios) >= 10.0, detail), detail


def test_moea_sanity(acceptance):
    beats = {"nsga2": 0, "moead": 0}
    insts = generate_instances(desk_config(), 50, seed=77)
    for i, inst in enumerate(insts):
        fronts = {
            "nsga2": [pt for pt, _ in nsga2(inst, MoeaParams(seed=i))],
            "moead": [pt for pt, _ in moead(inst, MoeaParams(seed=i))],
            "random": [pt for pt, _ in random_front(inst, np.random.default_rng(i), 100)],
        }
        ref = HvConfig.auto([p for f in fronts.values() for p in f])
        base = hypervolume_norm(fronts["random"], ref)
        for k in beats:
            beats[k] += hypervolume_norm(fronts[k], ref) >= base
    recovered = []
    for i, inst in enumerate(generate_instances(desk_config(n_users=4, n_spaces=2, n_mecs=3), 20, seed=12)):
        exact = {pt for pt, _ in enumerate_pareto_exact(inst)}
        found = {pt for pt, _ in nsga2(inst, MoeaParams(seed=i))}
        recovered.append(len(exact & found) / len(exact))
    rates = {k: v / len(insts) for k, v in beats.items()}
    ok = min(rates.values()) >= 0.9 and min(recovered) >= 0.8
    detail = f"HV >= random: nsga2 {rates['nsga2']:.2f} moead {rates['moead']:.2f}; worst exact-front recovery {min(recovered):.2f}"
    assert acceptance(11, ok, detail), detail
