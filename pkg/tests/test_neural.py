import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import build_instance
from sccmoco.costmodel import Assignment, objectives
from sccmoco.heuristics import random_feasible, repair
from sccmoco.instance import desk_config, generate_instance, generate_instances
from sccmoco.neural import (
    Denoiser,
    NetConfig,
    NoiseSchedule,
    TrainConfig,
    assignment_bits,
    batch_graphs,
    bce_with_logits,
    bits_to_marginals,
    build_graph,
    cm_loss,
    consistency_sample,
    cosine_steps,
    example_from_label,
    grad_check,
    load_checkpoint,
    model_from_dict,
    model_to_dict,
    noise_sample,
    noise_step,
    q_step,
    qbar,
    qbar_iterated,
    save_checkpoint,
    train_cm,
)
from sccmoco.neural.diffusion import sinusoidal_embedding
from sccmoco.oracle import Objective, OracleConfig, solve_exact

SPACE = (10.0, 10.0, 100.0, 10.0)


def small_model(layers=2, hidden=8, seed=0):
    return Denoiser.create(NetConfig(layers=layers, hidden=hidden), seed=seed)


def zero_model(layers=2, hidden=8):
    m = small_model(layers, hidden)
    for v in m.params.values():
        v[...] = 0.0
    return m


@pytest.fixture(scope="module")
def desk():
    return generate_instances(desk_config(p_offline=0.0), 6, seed=21)


# ---------------------------------------------------------------------------
# graph


def test_graph_without_demand_has_no_variables():
    inst = generate_instance(desk_config(p_offline=1.0), np.random.default_rng(0))
    g = build_graph(inst, (0.5, 0.5))
    assert g.n_vars == 0
    z, _ = small_model().logits(g, np.zeros(0), 10)
    assert z.shape == (0,)


def test_graph_one_pair_two_mecs():
    inst = build_instance(dist=[[0, 5], [5, 0]], freq=[2.0, 3.0], local=[1], p=[[0.4]], spaces=[SPACE])
    g = build_graph(inst, (1.0, 0.0))
    assert g.n_vars == 2
    assert g.triples == [(0, 0, 0), (0, 0, 1)]
    # p and the local flag
    assert g.feats["x"][:, 0].tolist() == [0.4, 0.4]
    assert g.feats["x"][:, 1].tolist() == [0.0, 1.0]
    assert g.adj["u>x"].toarray().tolist() == [[1.0], [1.0]]
    assert g.adj["m>x"].toarray().tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_preference_of_one_graph_does_not_leak_into_another(desk):
    m = small_model()
    a, b = build_graph(desk[0], (1.0, 0.0)), build_graph(desk[1], (1.0, 0.0))
    b2 = b.with_preference((0.0, 1.0))
    x = np.ones(a.n_vars + b.n_vars)
    z1, _ = m.logits(batch_graphs([a, b]), x, 300)
    z2, _ = m.logits(batch_graphs([a, b2]), x, 300)
    assert np.array_equal(z1[: a.n_vars], z2[: a.n_vars])
    assert not np.allclose(z1[a.n_vars :], z2[a.n_vars :])


def test_batched_forward_equals_separate(desk):
    m = small_model()
    gs = [build_graph(inst, (0.3, 0.7)) for inst in desk[:3]]
    rng = np.random.default_rng(0)
    xs = [rng.integers(0, 2, g.n_vars) for g in gs]
    ts = [5, 200, 900]
    z, _ = m.logits(batch_graphs(gs), np.concatenate(xs), np.array(ts))
    parts = np.concatenate([m.logits(g, x, t)[0] for g, x, t in zip(gs, xs, ts)])
    assert np.allclose(z, parts, rtol=0, atol=1e-12)


def test_state_length_mismatch_raises(desk):
    g = build_graph(desk[0], (0.5, 0.5))
    with pytest.raises(ValueError):
        small_model().logits(g, np.zeros(g.n_vars + 1), 1)


# ---------------------------------------------------------------------------
# diffusion


def test_qbar_identity_when_bits_never_flip():
    s = NoiseSchedule(T=50, alpha=0.2, beta_start=1.0, beta_end=1.0)
    for t in (1, 17, 50):
        assert np.array_equal(qbar(s, t), np.eye(2))


def test_qbar_uniform_when_stay_is_half():
    s = NoiseSchedule(T=10, alpha=0.2, beta_start=0.5, beta_end=0.5)
    assert np.array_equal(qbar(s, 1), np.full((2, 2), 0.5))


def test_qbar_two_steps_of_point_nine():
    s = NoiseSchedule(T=10, alpha=0.2, beta_start=0.9, beta_end=0.9)
    assert qbar(s, 2)[0, 0] == pytest.approx(0.82, abs=1e-15)
    assert np.allclose(q_step(s, 1) @ q_step(s, 2), qbar(s, 2), atol=1e-15)


def test_closed_form_matches_iterated_product_for_every_step():
    s = NoiseSchedule()
    Q = np.eye(2)
    worst = 0.0
    for t in range(1, s.T + 1):
        Q = Q @ q_step(s, t)
        worst = max(worst, np.abs(Q - qbar(s, t)).max())
    assert worst <= 1e-12
    assert np.abs(qbar_iterated(s, 321) - qbar(s, 321)).max() <= 1e-12


def test_qbar_rows_are_distributions():
    s = NoiseSchedule()
    for t in (1, 10, 100, 1000):
        Q = qbar(s, t)
        assert np.all(Q >= 0) and np.allclose(Q.sum(axis=1), 1.0, atol=1e-15)


def test_time_step_out_of_range():
    s = NoiseSchedule(T=10, alpha=0.2)
    with pytest.raises(ValueError):
        qbar(s, 0)
    with pytest.raises(ValueError):
        noise_sample(np.zeros(3), 11, s, np.random.default_rng(0))


@pytest.mark.parametrize("bad", [dict(T=0), dict(alpha=0.0), dict(alpha=1.0), dict(T=4, alpha=0.2), dict(beta_end=1.5)])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        NoiseSchedule(**bad)


@pytest.mark.parametrize("t", [5, 40])
def test_sequential_and_marginal_sampling_agree(t):
    s = NoiseSchedule()
    rng = np.random.default_rng(t)
    n = 100_000
    x0 = (rng.random(n) < 0.3).astype(np.int8)
    seq = x0.copy()
    for k in range(1, t + 1):
        seq = noise_step(seq, k, s, rng)
    marg = noise_sample(x0, t, s, rng)
    # joint distribution over (x0, x_t) in four cells
    cells = lambda xt: np.bincount(2 * x0 + xt, minlength=4) / n  # noqa: E731
    tv = 0.5 * np.abs(cells(seq) - cells(marg)).sum()
    assert tv < 0.02


def test_terminal_marginal_is_uniform():
    s = NoiseSchedule()
    rng = np.random.default_rng(5)
    xT = noise_sample(np.ones(100_000, dtype=np.int8), s.T, s, rng)
    tv = abs(xT.mean() - 0.5)
    assert tv < 0.02
    assert abs(s.stay_bar[s.T] - 0.5) < 1e-12


def test_cosine_steps():
    assert cosine_steps(1, 1000) == [1000]
    assert cosine_steps(3, 1000) == [1000, 866, 500]
    steps = cosine_steps(100, 1000)
    assert len(steps) == 100 and steps[0] == 1000 and all(a >= b for a, b in zip(steps, steps[1:]))
    with pytest.raises(ValueError):
        cosine_steps(0, 1000)


def test_time_embedding_is_bounded_and_distinct():
    e = sinusoidal_embedding(np.array([1.0, 2.0, 500.0]), 16)
    assert e.shape == (3, 16) and np.all(np.abs(e) <= 1.0)
    assert not np.allclose(e[0], e[1])


# ---------------------------------------------------------------------------
# network


def test_zero_weights_give_one_half(desk):
    g = build_graph(desk[0], (0.5, 0.5))
    p = zero_model().probs(g, np.ones(g.n_vars), 100)
    assert np.array_equal(p, np.full(g.n_vars, 0.5))


def test_mec_permutation_equivariance():
    rng = np.random.default_rng(3)
    M = 4
    pts = rng.uniform(0, 10, (M, 2))
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    freq = rng.uniform(2, 5, M)
    cap = rng.uniform(1500, 3000, M)
    tasks = rng.integers(2, 6, M)
    local = [0, 1, 3]
    p = [[0.5, 0.0], [0.2, 0.9], [0.7, 0.3]]
    spaces = [SPACE, (50.0, 20.0, 80.0, 25.0)]
    a = build_instance(dist, freq, local, p, spaces, tasks, cap)
    sigma = np.array([2, 0, 3, 1])  # new MEC j is old MEC sigma[j]
    inv = np.argsort(sigma)
    b = build_instance(dist[np.ix_(sigma, sigma)], freq[sigma], [int(inv[m]) for m in local], p, spaces, tasks[sigma], cap[sigma])
    m = small_model(layers=3, hidden=16)
    ga, gb = build_graph(a, (0.4, 0.6)), build_graph(b, (0.4, 0.6))
    # variable (u, v, j) in b corresponds to (u, v, sigma[j]) in a
    idx = np.array([a.triples.index((u, v, int(sigma[j]))) for u, v, j in b.triples])
    xa = rng.integers(0, 2, ga.n_vars)
    za, _ = m.logits(ga, xa, 400)
    zb, _ = m.logits(gb, xa[idx], 400)
    assert np.allclose(zb, za[idx], rtol=0, atol=1e-10)


def test_variable_order_invariance(desk):
    m = small_model(layers=3, hidden=16)
    g = build_graph(desk[2], (0.8, 0.2))
    rng = np.random.default_rng(1)
    perm = rng.permutation(g.n_vars)
    x = rng.integers(0, 2, g.n_vars)
    z, _ = m.logits(g, x, 50)
    zp, _ = m.logits(g.reorder_vars(perm), x[perm], 50)
    assert np.allclose(zp, z[perm], rtol=0, atol=1e-10)


def test_determinism(desk):
    g = build_graph(desk[0], (0.5, 0.5))
    a, b = small_model(seed=4), small_model(seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    ra = consistency_sample(a, g, 3, np.random.default_rng(9))
    rb = consistency_sample(b, g, 3, np.random.default_rng(9))
    assert np.array_equal(ra.marginals, rb.marginals)


# ---------------------------------------------------------------------------
# loss and gradients


def confident_model(value: float):
    m = zero_model()
    m.params["head.b2"][0] = value
    return m


def test_loss_of_perfect_model_is_zero(desk):
    g = build_graph(desk[0], (0.5, 0.5))
    x0 = np.ones(g.n_vars)
    loss, _ = cm_loss(confident_model(60.0), g, x0, x0, 500, x0, 200, with_grad=False)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_loss_of_uninformed_model_is_two_ln2(desk):
    g = build_graph(desk[0], (0.5, 0.5))
    x0 = np.random.default_rng(0).integers(0, 2, g.n_vars)
    loss, _ = cm_loss(zero_model(), g, x0, x0, 500, 1 - x0, 200, with_grad=False)
    assert loss == pytest.approx(2 * math.log(2), abs=1e-14)


def test_loss_single_variable_by_hand():
    inst = build_instance(dist=[[0]], freq=[2.0], local=[0], p=[[1.0]], spaces=[SPACE])
    g = build_graph(inst, (1.0, 0.0))
    m = confident_model(0.3)
    loss, _ = cm_loss(m, g, np.array([1.0]), np.array([0]), 900, np.array([1]), 200, with_grad=False)
    assert loss == pytest.approx(2 * math.log(1 + math.exp(-0.3)), abs=1e-10)


def test_bce_extreme_logits_are_finite():
    loss, grad = bce_with_logits(np.array([800.0, -800.0]), np.array([0.0, 1.0]))
    assert loss == pytest.approx(800.0) and np.all(np.isfinite(grad))


def test_head_gradient_check(desk):
    m = small_model(layers=0, hidden=8, seed=2)
    g = build_graph(desk[0], (0.5, 0.5))
    rng = np.random.default_rng(0)
    x0 = rng.integers(0, 2, g.n_vars)
    err = grad_check(m, g, x0, rng.integers(0, 2, g.n_vars), 700, rng.integers(0, 2, g.n_vars), 200, names=["head.w2", "head.b2"], probes=20)
    assert err < 1e-8


def test_full_gradient_check(desk):
    m = small_model(layers=2, hidden=8, seed=3)
    g = batch_graphs([build_graph(desk[0], (1.0, 0.0)), build_graph(desk[1], (0.2, 0.8))])
    rng = np.random.default_rng(1)
    x0 = rng.integers(0, 2, g.n_vars)
    err = grad_check(m, g, x0, rng.integers(0, 2, g.n_vars), np.array([600, 30]), rng.integers(0, 2, g.n_vars), 200, probes=200, seed=4)
    assert err < 1e-4


def test_gradient_vanishes_at_zero_loss(desk):
    g = build_graph(desk[0], (0.5, 0.5))
    x0 = np.ones(g.n_vars)
    _, grads = cm_loss(confident_model(60.0), g, x0, x0, 500, x0, 200)
    norm = math.sqrt(sum(float((v**2).sum()) for v in grads.values()))
    assert norm < 1e-8


# ---------------------------------------------------------------------------
# training and sampling


def _toy_examples():
    insts = generate_instances(desk_config(), 10, seed=31)
    examples = []
    for inst in insts:
        for w, obj in (((1.0, 0.0), Objective.latency()), ((0.0, 1.0), Objective.energy())):
            examples.append(example_from_label(inst, solve_exact(inst, OracleConfig(objective=obj)).x, w))
    return insts, examples


@pytest.fixture(scope="module")
def toy_examples():
    return _toy_examples()


@pytest.fixture(scope="module")
def toy_training(toy_examples):
    insts, examples = toy_examples
    m = small_model(layers=2, hidden=32, seed=0)
    losses = train_cm(m, examples, TrainConfig(steps=200, batch_size=8, lr=3e-4, seed=0))
    return insts, m, losses


@pytest.fixture(scope="module")
def toy_model(toy_examples):
    # a larger step size fits the toy set harder at the cost of a noisier curve
    insts, examples = toy_examples
    m = small_model(layers=2, hidden=32, seed=0)
    train_cm(m, examples, TrainConfig(steps=200, batch_size=8, lr=3e-3, seed=0))
    return insts, m


def test_short_training_run_reduces_loss(toy_training):
    _, _, losses = toy_training
    windows = np.array(losses).reshape(20, 10).mean(axis=1)
    rho = spearmanr(np.arange(20), windows).statistic
    assert rho < -0.8, windows


def test_toy_model_beats_random_on_a_training_instance(toy_model):
    insts, m = toy_model
    inst = insts[0]
    for w, k in (((1.0, 0.0), 0), ((0.0, 1.0), 1)):
        g = build_graph(inst, w)
        rng = np.random.default_rng(0)
        cm = [objectives(inst, repair(inst, bits_to_marginals(inst, consistency_sample(m, g, 3, rng).marginals)))[k] for _ in range(100)]
        rnd = [objectives(inst, random_feasible(inst, rng))[k] for _ in range(100)]
        assert np.mean(cm) <= np.mean(rnd)


def test_training_requires_examples():
    with pytest.raises(ValueError):
        train_cm(small_model(), [], TrainConfig(steps=1))


def test_sampling_pass_counts(desk):
    g = build_graph(desk[0], (0.5, 0.5))
    m = small_model()
    assert consistency_sample(m, g, 1, np.random.default_rng(0)).forward_passes == 1
    res = consistency_sample(m, g, 3, np.random.default_rng(0))
    assert res.forward_passes == 3
    assert np.array_equal(res.bits, (res.marginals > 0.5).astype(np.int8))
    with pytest.raises(ValueError):
        consistency_sample(m, g, 3, np.random.default_rng(0), steps=[500, 200, 100])


def test_assignment_bits_round_trip():
    inst = build_instance(dist=[[0, 5], [5, 0]], freq=[2.0, 3.0], local=[0, 1], p=[[1.0], [0.5]], spaces=[SPACE])
    x = Assignment({(0, 0): 1, (1, 0): 1})
    assert assignment_bits(inst, x).tolist() == [0, 1, 0, 1]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, desk):
    m = small_model(seed=7)
    path = tmp_path / "ckpt.json"
    save_checkpoint(m, path, extra={"note": 1})
    back = load_checkpoint(path)
    assert back.cfg == m.cfg and back.schedule == m.schedule
    assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
    g = build_graph(desk[0], (0.5, 0.5))
    x = np.ones(g.n_vars)
    assert np.array_equal(back.logits(g, x, 10)[0], m.logits(g, x, 10)[0])


def test_checkpoint_rejects_mismatches():
    d = model_to_dict(small_model())
    with pytest.raises(ValueError):
        model_from_dict(dict(d, v=99))
    with pytest.raises(ValueError):
        model_from_dict(dict(d, net={"layers": 3, "hidden": 8}))
    with pytest.raises(ValueError):
        model_from_dict(dict(d, params=d["params"][:-1]))
