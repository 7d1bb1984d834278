"""Consistency training, few-step sampling, optimizer and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..costmodel import Assignment
from ..instance import Instance
from ..pareto import PreferenceWeight
from .diffusion import NoiseSchedule, cosine_steps, noise_sample
from .graph import HeteroGraph, batch_graphs, build_graph
from .network import NetConfig, backward, forward, init_params, param_shapes, sigmoid

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EPS = 1e-12


@dataclass
class Denoiser:
    cfg: NetConfig
    schedule: NoiseSchedule
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, cfg: NetConfig = NetConfig(), schedule: NoiseSchedule = NoiseSchedule(), seed: int = 0) -> "Denoiser":
        return cls(cfg, schedule, init_params(cfg, np.random.default_rng(seed)))

    def copy(self) -> "Denoiser":
        return Denoiser(self.cfg, self.schedule, {k: v.copy() for k, v in self.params.items()})

    def logits(self, g: HeteroGraph, x_t, t):
        return forward(self.params, self.cfg, g, x_t, t)

    def probs(self, g: HeteroGraph, x_t, t) -> np.ndarray:
        z, _ = forward(self.params, self.cfg, g, x_t, t)
        return sigmoid(z)

    def backward(self, cache, d_logits) -> dict[str, np.ndarray]:
        return backward(self.params, self.cfg, cache, d_logits)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lr: float = 1e-4
    weight_decay: float = 2e-4  # L2 penalty added to the gradient
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int | None = None  # cosine decay horizon; None keeps lr fixed
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.step_count, self.total_steps) / self.total_steps
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.step_count += 1
        k = self.step_count
        for name, p in params.items():
            g = grads[name] + self.weight_decay * p
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**k)
            vhat = v / (1 - self.beta2**k)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# consistency loss


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient wrt ``z``."""
    n = max(len(z), 1)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.sum() / n), (sigmoid(z) - y) / n


@dataclass(frozen=True)
class TrainingExample:
    graph: HeteroGraph
    x0: np.ndarray  # one bit per variable node


def example_from_label(inst: Instance, x: Assignment, w: PreferenceWeight | tuple[float, float]) -> TrainingExample:
    g = build_graph(inst, w)
    return TrainingExample(g, assignment_bits(inst, x))


def assignment_bits(inst: Instance, x: Assignment) -> np.ndarray:
    chosen = set(x.triples())
    return np.array([1 if t in chosen else 0 for t in inst.triples], dtype=np.int8)


def bits_to_marginals(inst: Instance, bits: np.ndarray) -> np.ndarray:
    return np.asarray(bits, dtype=float).reshape(len(inst.pairs), inst.n_mecs)


def cm_loss(model: Denoiser, g: HeteroGraph, x0: np.ndarray, x_t, t, x_tb, tb, with_grad: bool = True):
    """BCE at (x_t, t) plus BCE at (x_tb, tb), each averaged per variable."""
    z1, c1 = model.logits(g, x_t, t)
    z2, c2 = model.logits(g, x_tb, tb)
    l1, d1 = bce_with_logits(z1, x0)
    l2, d2 = bce_with_logits(z2, x0)
    loss = l1 + l2
    if not with_grad:
        return loss, None
    grads = model.backward(c1, d1)
    g2 = model.backward(c2, d2)
    for k in grads:
        grads[k] += g2[k]
    return loss, grads


def cm_train_step(model: Denoiser, batch: Sequence[TrainingExample], rng: np.random.Generator, opt: Adam) -> float:
    """One consistency-training update on a batch; returns the loss before the step."""
    sched = model.schedule
    g = batch_graphs([ex.graph for ex in batch])
    x0 = np.concatenate([ex.x0 for ex in batch]).astype(float)
    t = int(rng.integers(1, sched.T + 1))
    tb = sched.t_boundary
    x_t = noise_sample(x0, t, sched, rng)
    x_tb = noise_sample(x0, tb, sched, rng)
    loss, grads = cm_loss(model, g, x0, x_t, t, x_tb, tb)
    bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
    if not math.isfinite(loss) or bad:
        raise FloatingPointError(f"non-finite consistency loss {loss} at t={t}; bad gradients: {bad[:5]}")
    opt.step(model.params, grads)
    return loss


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 2e-4
    seed: int = 0


def train_cm(
    model: Denoiser,
    examples: Sequence[TrainingExample],
    cfg: TrainConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    if not examples:
        raise ValueError("no training examples")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=cfg.steps)
    losses = []
    for step in range(cfg.steps):
        idx = rng.choice(len(examples), size=min(cfg.batch_size, len(examples)), replace=False)
        loss = cm_train_step(model, [examples[i] for i in idx], rng, opt)
        losses.append(loss)
        if on_step:
            on_step(step, loss)
    return losses


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SampleResult:
    marginals: np.ndarray  # per variable
    bits: np.ndarray
    forward_passes: int


def consistency_sample(
    model: Denoiser,
    g: HeteroGraph,
    K: int,
    rng: np.random.Generator,
    steps: Sequence[int] | None = None,
) -> SampleResult:
    """Few-step sampling: denoise from pure noise, then re-noise and re-denoise."""
    sched = model.schedule
    steps = list(steps) if steps is not None else cosine_steps(K, sched.T)
    if len(steps) != K or steps[0] != sched.T:
        raise ValueError("steps must start at T and hold K entries")
    x = (rng.random(g.n_vars) < 0.5).astype(np.int8)
    probs = model.probs(g, x, sched.T)
    for t in steps[1:]:
        point = (probs > 0.5).astype(np.int8)
        x = noise_sample(point, t, sched, rng)
        probs = model.probs(g, x, t)
    return SampleResult(probs, (probs > 0.5).astype(np.int8), K)


# ---------------------------------------------------------------------------
# gradient check


def grad_check(
    model: Denoiser,
    g: HeteroGraph,
    x0: np.ndarray,
    x_t,
    t,
    x_tb,
    tb,
    names: Sequence[str] | None = None,
    probes: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    _, grads = cm_loss(model, g, x0, x_t, t, x_tb, tb)
    names = list(names) if names is not None else list(model.params)
    picks = []
    for _ in range(probes):
        name = names[int(rng.integers(len(names)))]
        picks.append((name, int(rng.integers(model.params[name].size))))
    worst = 0.0
    for name, flat in picks:
        p = model.params[name].reshape(-1)
        orig = p[flat]
        p[flat] = orig + h
        lp, _ = cm_loss(model, g, x0, x_t, t, x_tb, tb, with_grad=False)
        p[flat] = orig - h
        lm, _ = cm_loss(model, g, x0, x_t, t, x_tb, tb, with_grad=False)
        p[flat] = orig
        num = (lp - lm) / (2 * h)
        ana = grads[name].reshape(-1)[flat]
        denom = max(abs(num), abs(ana), 1e-6)
        worst = max(worst, abs(num - ana) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def model_to_dict(model: Denoiser, extra: dict | None = None) -> dict:
    shapes = param_shapes(model.cfg)
    flat = np.concatenate([model.params[k].reshape(-1) for k in shapes]) if shapes else np.zeros(0)
    return {
        "v": CHECKPOINT_VERSION,
        "net": {"layers": model.cfg.layers, "hidden": model.cfg.hidden},
        "schedule": model.schedule.to_dict(),
        "names": list(shapes),
        "shapes": [list(s) for s in shapes.values()],
        "params": flat.tolist(),
        "extra": extra or {},
    }


def model_from_dict(data: dict) -> Denoiser:
    if data.get("v") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('v')!r}")
    cfg = NetConfig(**data["net"])
    sched = NoiseSchedule(**data["schedule"])
    flat = np.asarray(data["params"], dtype=float)
    params, pos = {}, 0
    expected = param_shapes(cfg)
    for name, shape in zip(data["names"], data["shapes"]):
        if tuple(shape) != expected.get(name):
            raise ValueError(f"parameter {name} has shape {shape}, expected {expected.get(name)}")
        size = int(np.prod(shape))
        params[name] = flat[pos : pos + size].reshape(shape).copy()
        pos += size
    if pos != len(flat) or set(params) != set(expected):
        raise ValueError("checkpoint parameter list does not match the architecture")
    return Denoiser(cfg, sched, params)


def save_checkpoint(model: Denoiser, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, extra)))


def load_checkpoint(path: str | Path) -> Denoiser:
    return model_from_dict(json.loads(Path(path).read_text()))
