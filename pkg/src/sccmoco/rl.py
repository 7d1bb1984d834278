"""Multi-objective PPO fine-tuning of the denoiser with KL fusion and a Pareto archive.

Inference is treated as a K-step decision process: the state is the noisy
variable vector with its time step, the action is the denoised point
estimate, and the only reward arrives after the last step. The policy is
factorized into independent Bernoulli variables, one per admissible triple.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .costmodel import Assignment, objectives
from .heuristics import repair
from .instance import Instance
from .neural.diffusion import cosine_steps, noise_sample
from .neural.graph import HeteroGraph, batch_graphs, build_graph
from .neural.model import Adam, Denoiser, bits_to_marginals, consistency_sample, save_checkpoint
from .neural.network import pooled, sigmoid
from .pareto import HvConfig, ObjectivePoint, ParetoArchive, PreferenceWeight, nondominated

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-6


def sample_preference(rng: np.random.Generator, chi: Sequence[float] = (1.0, 1.0)) -> PreferenceWeight:
    """Dirichlet(chi) draw; for two objectives with chi = (1, 1) this is w1 ~ U(0, 1)."""
    chi = np.asarray(chi, dtype=float)
    if len(chi) != 2 or np.any(chi <= 0):
        raise ValueError("concentration must hold two positive entries")
    w1 = float(rng.dirichlet(chi)[0])
    return PreferenceWeight.of(w1)


@dataclass(frozen=True)
class PpoConfig:
    eta_entropy: float = 0.01
    eta_value: float = 0.5
    eta_anchor: float = 1.0
    clip: float = 0.2
    gamma: float = 0.99
    buffer_size: int = 2048
    iterations: int = 10
    K: int = 3
    lr_actor: float = 3e-5
    lr_critic: float = 1e-3
    lr_distill: float = 3e-5
    epochs: int = 2
    minibatch: int = 64
    distill_epochs: int = 2
    archive_weights: int = 4  # sampled preferences per instance on each archive refresh
    critic_hidden: int = 64
    critic_warmup: int = 20  # value-only epochs over the buffer before each policy update
    weighted_fusion: bool = True  # scale each teacher's KL by the state's preference
    normalize_advantage: bool = True  # standardize advantages within each minibatch
    terminal_only: bool = True  # policy gradient only on final-step transitions
    seed: int = 0

    def validate(self) -> "PpoConfig":
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("eta_entropy", "eta_value", "eta_anchor", "lr_actor", "lr_critic", "lr_distill"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.K < 1 or self.buffer_size < 0 or self.iterations < 0 or self.critic_warmup < 0:
            raise ValueError("K must be positive; buffer size and iterations non-negative")
        if self.epochs < 1 or self.minibatch < 1 or self.distill_epochs < 0 or self.archive_weights < 0:
            raise ValueError("epochs and minibatch must be positive")
        return self


def paper_ppo_config(**overrides) -> PpoConfig:
    base = dict(K=3, gamma=0.99, clip=0.2, eta_entropy=0.01, eta_value=0.5, buffer_size=50_000, iterations=50)
    base.update(overrides)
    return PpoConfig(**base)


# ---------------------------------------------------------------------------
# transitions and rollouts


@dataclass(eq=False)
class Rollout:
    instance_id: str
    w: PreferenceWeight
    graph: HeteroGraph
    states: list[np.ndarray]  # x_k as bits
    times: list[int]
    actions: list[np.ndarray]
    logprobs: list[float]  # behavior log-probability of each action
    final_features: np.ndarray  # pooled embedding of the last state
    solution: Assignment
    reward: np.ndarray  # raw [-T, -E]
    reward_norm: np.ndarray  # divided by the instance scale

    @property
    def K(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class Transition:
    rollout: Rollout
    k: int

    @property
    def state(self) -> np.ndarray:
        return self.rollout.states[self.k]

    @property
    def t(self) -> int:
        return self.rollout.times[self.k]

    @property
    def action(self) -> np.ndarray:
        return self.rollout.actions[self.k]

    @property
    def behavior_logprob(self) -> float:
        return self.rollout.logprobs[self.k]

    @property
    def reward(self) -> np.ndarray:
        """Zero except after the last inference step."""
        r = self.rollout.reward
        return r if self.k == self.rollout.K - 1 else np.zeros_like(r)


@dataclass
class ReplayBuffer:
    capacity: int
    items: list[Transition] = field(default_factory=list)

    def add(self, tr: Transition) -> bool:
        if len(self.items) >= self.capacity:
            return False
        self.items.append(tr)
        return True

    @property
    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def __len__(self) -> int:
        return len(self.items)


def reward_scale(inst: Instance) -> np.ndarray:
    """Per-instance normalizer: the all-local objectives (1 where zero)."""
    T, E = objectives(inst, Assignment(inst.all_local))
    return np.array([T if T > 0 else 1.0, E if E > 0 else 1.0])


def bernoulli_logprob(probs: np.ndarray, a: np.ndarray) -> float:
    q = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.sum(np.where(a > 0, np.log(q), np.log1p(-q))))


def rollout(model: Denoiser, inst: Instance, w, K: int, rng: np.random.Generator, sample: bool = True) -> Rollout:
    """Run K inference steps; actions are Bernoulli draws when ``sample`` is set."""
    w = w if isinstance(w, PreferenceWeight) else PreferenceWeight(tuple(w))
    g = build_graph(inst, w)
    sched = model.schedule
    times = cosine_steps(K, sched.T)
    x = (rng.random(g.n_vars) < 0.5).astype(np.int8)
    states, actions, logps = [], [], []
    feats = None
    probs = np.zeros(g.n_vars)
    for k, t in enumerate(times):
        z, cache = model.logits(g, x, t)
        probs = sigmoid(z)
        a = (rng.random(g.n_vars) < probs).astype(np.int8) if sample else (probs > 0.5).astype(np.int8)
        states.append(x)
        actions.append(a)
        logps.append(bernoulli_logprob(probs, a))
        if k == K - 1:
            feats = pooled(cache)[0]
        else:
            x = noise_sample(a, times[k + 1], sched, rng)
    q = (actions[-1] + probs) / 2.0 if sample else probs
    sol = repair(inst, bits_to_marginals(inst, q)) if inst.pairs else Assignment()
    T, E = objectives(inst, sol)
    reward = np.array([-T, -E])
    return Rollout(inst.id, w, g, states, list(times), actions, logps, feats, sol, reward, reward / reward_scale(inst))


def fill_buffer(model: Denoiser, instances: Sequence[Instance], cfg: PpoConfig, rng: np.random.Generator) -> ReplayBuffer:
    buf = ReplayBuffer(cfg.buffer_size)
    while not buf.full and instances:
        inst = instances[int(rng.integers(len(instances)))]
        ro = rollout(model, inst, sample_preference(rng), cfg.K, rng, sample=True)
        for k in range(ro.K):
            if not buf.add(Transition(ro, k)):
                break
    return buf


# ---------------------------------------------------------------------------
# losses


def policy_logprob(model: Denoiser, g: HeteroGraph, x, t, a) -> float:
    return bernoulli_logprob(model.probs(g, x, t), np.asarray(a))


def advantage(r: float, V: float, k: int, K: int, gamma: float) -> float:
    if not 0 <= k <= K - 1:
        raise ValueError("step index out of range")
    return gamma ** (K - 1 - k) * r - V


def clipped_surrogate(ratio, A, clip: float):
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * A, np.clip(ratio, 1 - clip, 1 + clip) * A)


def bernoulli_entropy(probs: np.ndarray) -> np.ndarray:
    q = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    h = -(q * np.log(q) + (1 - q) * np.log1p(-q))
    return np.where((probs <= 0) | (probs >= 1), 0.0, h)


def bernoulli_kl(p, q) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    q = np.clip(np.asarray(q, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    return p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))


# ---------------------------------------------------------------------------
# critic


@dataclass
class Critic:
    """Two-layer value network over standardized pooled state features.

    The input statistics are frozen at the first buffer the critic sees; the
    output layer starts at zero so early advantages are the raw returns.
    """

    params: dict[str, np.ndarray]
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None

    @classmethod
    def create(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "Critic":
        return cls(
            {
                "W1": rng.normal(0, math.sqrt(2.0 / in_dim), (in_dim, hidden)),
                "b1": np.zeros(hidden),
                "w2": np.zeros((hidden, 1)),
                "b2": np.zeros(1),
            }
        )

    def fit_scaler(self, feats: np.ndarray) -> None:
        if self.mu is None:
            self.mu = feats.mean(axis=0)
            self.sd = feats.std(axis=0) + 1e-6

    def _scaled(self, feats: np.ndarray) -> np.ndarray:
        return feats if self.mu is None else (feats - self.mu) / self.sd

    def value(self, feats: np.ndarray) -> np.ndarray:
        a = np.maximum(self._scaled(feats) @ self.params["W1"] + self.params["b1"], 0)
        return (a @ self.params["w2"] + self.params["b2"]).reshape(-1)

    def loss_and_grads(self, feats: np.ndarray, target: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        X = self._scaled(feats)
        pre = X @ self.params["W1"] + self.params["b1"]
        a = np.maximum(pre, 0)
        v = (a @ self.params["w2"] + self.params["b2"]).reshape(-1)
        diff = v - target
        loss = float(np.mean(diff**2))
        dv = (2 * diff / len(diff))[:, None]
        da = (dv @ self.params["w2"].T) * (pre > 0)
        return loss, {"W1": X.T @ da, "b1": da.sum(0), "w2": a.T @ dv, "b2": dv.sum(0)}

    def to_dict(self) -> dict:
        out = {k: v.tolist() for k, v in self.params.items()}
        if self.mu is not None:
            out.update(mu=self.mu.tolist(), sd=self.sd.tolist())
        return out


# ---------------------------------------------------------------------------
# updates


def _minibatch_forward(model: Denoiser, trs: Sequence[Transition]):
    g = batch_graphs([tr.rollout.graph for tr in trs])
    x = np.concatenate([tr.state for tr in trs]).astype(float)
    t = np.array([tr.t for tr in trs], dtype=float)
    z, cache = model.logits(g, x, t)
    return g, z, cache


def _finite(grads: dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(v)) for v in grads.values())


def ppo_update(
    actor: Denoiser,
    critic: Critic,
    buffer: ReplayBuffer,
    objective: int,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> dict:
    """Clipped-ratio policy update plus value regression for one objective.

    The behavior log-probabilities stored in the buffer define the ratio
    denominator. Returns mean losses; a non-finite minibatch is skipped with
    parameters untouched.
    """
    if not len(buffer):
        raise ValueError("empty replay buffer")
    items = buffer.items
    if cfg.terminal_only:
        # earlier steps act on near-noise states, so their actions barely move the reward
        items = [tr for tr in items if tr.k == tr.rollout.K - 1] or items
    all_feats = np.stack([tr.rollout.final_features for tr in items])
    all_targets = np.array([tr.rollout.reward_norm[objective] for tr in items])
    critic.fit_scaler(all_feats)
    opt_a = Adam(lr=cfg.lr_actor, weight_decay=0.0)
    opt_c = Adam(lr=cfg.lr_critic, weight_decay=0.0)
    # the baseline should explain the between-instance spread before the actor relies on it
    for _ in range(cfg.critic_warmup):
        order = rng.permutation(len(items))
        for s in range(0, len(items), cfg.minibatch):
            idx = order[s : s + cfg.minibatch]
            _, c_grads = critic.loss_and_grads(all_feats[idx], all_targets[idx])
            if _finite(c_grads):
                opt_c.step(critic.params, c_grads)
    report = {"policy_loss": [], "value_loss": [], "entropy": [], "skipped": 0}
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        for s in range(0, len(items), cfg.minibatch):
            trs = [items[i] for i in order[s : s + cfg.minibatch]]
            B = len(trs)
            feats = np.stack([tr.rollout.final_features for tr in trs])
            target = np.array([tr.rollout.reward_norm[objective] for tr in trs])
            V = critic.value(feats)
            A = np.array([advantage(target[b], V[b], tr.k, tr.rollout.K, cfg.gamma) for b, tr in enumerate(trs)])
            if cfg.normalize_advantage and B > 1:
                A = (A - A.mean()) / (A.std() + 1e-8)

            g, z, cache = _minibatch_forward(actor, trs)
            q = sigmoid(z)
            a = np.concatenate([tr.action for tr in trs]).astype(float)
            gid = g.graph_of["x"]
            qc = np.clip(q, PROB_CLAMP, 1 - PROB_CLAMP)
            lp_var = a * np.log(qc) + (1 - a) * np.log1p(-qc)
            logp = np.bincount(gid, weights=lp_var, minlength=B)
            old = np.array([tr.behavior_logprob for tr in trs])
            ratio = np.exp(np.clip(logp - old, -50, 50))
            surr = clipped_surrogate(ratio, A, cfg.clip)
            policy_loss = -float(np.mean(surr))
            n_var = max(len(q), 1)
            entropy = float(np.sum(bernoulli_entropy(q)) / n_var)
            value_loss, c_grads = critic.loss_and_grads(feats, target)

            # d(-mean surr)/d logp_b is -ratio*A/B where the unclipped branch is active
            active = np.where(A >= 0, ratio <= 1 + cfg.clip, ratio >= 1 - cfg.clip)
            dlogp = np.where(active, -ratio * A / B, 0.0)
            dz = dlogp[gid] * (a - q) + cfg.eta_entropy * z * q * (1 - q) / n_var
            a_grads = actor.backward(cache, dz)
            c_grads = {k: cfg.eta_value * v for k, v in c_grads.items()}
            if not (math.isfinite(policy_loss) and math.isfinite(value_loss) and _finite(a_grads) and _finite(c_grads)):
                report["skipped"] += 1
                continue
            opt_a.step(actor.params, a_grads)
            opt_c.step(critic.params, c_grads)
            report["policy_loss"].append(policy_loss)
            report["value_loss"].append(value_loss)
            report["entropy"].append(entropy)
    mean = lambda v: float(np.mean(v)) if v else 0.0  # noqa: E731
    return {
        "policy_loss": mean(report["policy_loss"]),
        "value_loss": mean(report["value_loss"]),
        "entropy": mean(report["entropy"]),
        "skipped": report["skipped"],
    }


def kl_distill(
    student: Denoiser,
    teachers: Sequence[Denoiser],
    anchor: Denoiser,
    buffer: ReplayBuffer,
    cfg: PpoConfig,
    rng: np.random.Generator,
    eta_anchor: float | None = None,
    weighted: bool | None = None,
) -> float:
    """Pull ``student`` toward every teacher and, weighted, toward the anchor.

    With ``weighted`` set, teacher ``i`` is scaled per state by ``w_i`` so
    that a latency-oriented state learns mostly from the latency teacher.
    """
    eta = cfg.eta_anchor if eta_anchor is None else eta_anchor
    weighted = cfg.weighted_fusion if weighted is None else weighted
    items = buffer.items
    if not items or cfg.distill_epochs == 0:
        return 0.0
    chunks = [[items[i] for i in range(s, min(s + cfg.minibatch, len(items)))] for s in range(0, len(items), cfg.minibatch)]
    targets = []
    for trs in chunks:
        g = batch_graphs([tr.rollout.graph for tr in trs])
        x = np.concatenate([tr.state for tr in trs]).astype(float)
        t = np.array([tr.t for tr in trs], dtype=float)
        targets.append(([m.probs(g, x, t) for m in teachers], anchor.probs(g, x, t)))
    opt = Adam(lr=cfg.lr_distill, weight_decay=0.0)
    losses = []
    for _ in range(cfg.distill_epochs):
        for c in rng.permutation(len(chunks)):
            trs = chunks[c]
            tp, ap = targets[c]
            g, z, cache = _minibatch_forward(student, trs)
            q = sigmoid(z)
            n = max(len(q), 1)
            # each teacher counts in proportion to the state's own preference for its objective
            wv = np.array([tr.rollout.w.w for tr in trs])[g.graph_of["x"]] if weighted else np.ones((n, len(tp)))
            loss = float((sum((wv[:, i] * bernoulli_kl(p, q)).sum() for i, p in enumerate(tp)) + eta * bernoulli_kl(ap, q).sum()) / n)
            dz = (sum(wv[:, i] * (q - p) for i, p in enumerate(tp)) + eta * (q - ap)) / n
            grads = student.backward(cache, dz)
            if not (math.isfinite(loss) and _finite(grads)):
                continue
            opt.step(student.params, grads)
            losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


# ---------------------------------------------------------------------------
# archive and driver


def instance_hv_ref(inst: Instance) -> HvConfig:
    s = reward_scale(inst)
    return HvConfig(1.1 * s[0], 1.1 * s[1], mode="instance")


def refresh_archive(model: Denoiser, instances: Sequence[Instance], archive: ParetoArchive, cfg: PpoConfig, rng: np.random.Generator) -> None:
    for inst in instances:
        weights = [PreferenceWeight((1.0, 0.0)), PreferenceWeight((0.0, 1.0))]
        weights += [sample_preference(rng) for _ in range(cfg.archive_weights)]
        for w in weights:
            ro = rollout(model, inst, w, cfg.K, rng, sample=False)
            archive.insert(inst.id, -ro.reward, ro.solution)


def mo_cmpo(
    model: Denoiser,
    instances: Sequence[Instance],
    cfg: PpoConfig = PpoConfig(),
    rng: np.random.Generator | None = None,
    log_path: str | Path | None = None,
    ckpt_dir: str | Path | None = None,
) -> tuple[Denoiser, ParetoArchive, list[dict]]:
    """Fine-tune a pretrained denoiser; returns the final policy, archive and per-iteration log."""
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    anchor = model.copy()
    archive = ParetoArchive()
    refresh_archive(anchor, instances, archive, cfg, rng)
    feat_dim = 4 * anchor.cfg.hidden
    critics = [Critic.create(feat_dim, cfg.critic_hidden, rng) for _ in range(2)]
    history: list[dict] = []
    fh = Path(log_path).open("w") if log_path else None
    try:
        if fh:
            fh.write(json.dumps({"config": asdict(cfg), "net": asdict(anchor.cfg), "schedule": anchor.schedule.to_dict()}) + "\n")
        for j in range(cfg.iterations):
            buf = fill_buffer(anchor, instances, cfg, rng)
            rollouts = {id(tr.rollout): tr.rollout for tr in buf.items}.values()
            rec: dict = {
                "j": j,
                "mean_reward_T": float(np.mean([-r.reward[0] for r in rollouts])) if buf.items else 0.0,
                "mean_reward_E": float(np.mean([-r.reward[1] for r in rollouts])) if buf.items else 0.0,
            }
            subs = []
            for i in range(2):
                sub = anchor.copy()
                if buf.items:
                    rep = ppo_update(sub, critics[i], buf, i, cfg, rng)
                    rec[f"policy_loss_{i + 1}"] = rep["policy_loss"]
                    rec[f"value_loss_{i + 1}"] = rep["value_loss"]
                subs.append(sub)
            student = anchor.copy()
            rec["kl_loss"] = kl_distill(student, subs, anchor, buf, cfg, rng)
            anchor = student
            refresh_archive(anchor, instances, archive, cfg, rng)
            rec["archive_hv_per_instance"] = {inst.id: archive.hv(inst.id, instance_hv_ref(inst)) for inst in instances}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if ckpt_dir:
                save_checkpoint(anchor, Path(ckpt_dir) / f"mocmpo-{j:03d}.json", extra={"critics": [c.to_dict() for c in critics]})
            log.info("iteration %d: T=%.3f E=%.3f kl=%.4f", j, rec["mean_reward_T"], rec["mean_reward_E"], rec["kl_loss"])
    finally:
        if fh:
            fh.close()
    return anchor, archive, history


def policy_front(
    model: Denoiser,
    inst: Instance,
    weights: Sequence[PreferenceWeight],
    rng: np.random.Generator,
    K: int = 3,
    samples: int = 1,
) -> list[tuple[ObjectivePoint, Assignment]]:
    """Non-dominated set of consistency-sampled and repaired solutions over ``weights``."""
    out = []
    for w in weights:
        g = build_graph(inst, w)
        for _ in range(samples):
            res = consistency_sample(model, g, K, rng)
            x = repair(inst, bits_to_marginals(inst, res.marginals)) if inst.pairs else Assignment()
            out.append((ObjectivePoint(*objectives(inst, x)), x))
    keep = nondominated([pt for pt, _ in out])
    return [out[i] for i in keep]


def weight_grid(n: int) -> list[PreferenceWeight]:
    return [PreferenceWeight.of(k / (n - 1)) for k in range(n)] if n > 1 else [PreferenceWeight((0.5, 0.5))]
