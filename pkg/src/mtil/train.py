"""Sequential behavioural cloning over whole trajectories.

Each trajectory is unrolled from a zero state in temporal order, per-step
chunk losses are averaged, and the optimiser steps once per trajectory.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import Dataset, Trajectory, all_chunk_targets, chunk_targets
from .policy import Policy, PolicyConfig, gmm_nll_loss

log = logging.getLogger(__name__)


@dataclass
class EwcConfig:
    lam: float = 100.0
    fisher_samples: int = 64


@dataclass
class TrainConfig:
    epochs: int = 100
    lr0: float = 2e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss: str = "mse"  # or "gmm-nll"
    history_reset_interval: int | None = None
    ewc: EwcConfig | None = None
    grad_clip: float = 10.0
    seed: int = 0
    # "scan" runs the fused recurrence; "step" unrolls policy.step one
    # observation at a time. Both give the same loss and gradients.
    mode: str = "scan"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.loss not in ("mse", "gmm-nll"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.history_reset_interval is not None and self.history_reset_interval < 1:
            raise ValueError("history_reset_interval must be >= 1")
        if self.mode not in ("scan", "step"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if isinstance(self.ewc, dict):
            self.ewc = EwcConfig(**self.ewc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class FisherInfo:
    diag: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float


# ------------------------------------------------------------------ losses

def step_loss(policy: Policy, out, target: np.ndarray, kind: str) -> nx.DiffArray:
    """Loss of one step's output against its (K, A) target chunk."""
    if kind == "mse":
        return nx.mean(nx.square(out - target))
    logits, means, log_std = out.logits, out.means, out.log_stds
    M, A = means.shape
    return gmm_nll_loss(
        nx.reshape(logits, (1, M)), nx.reshape(means, (1, M * A)), nx.reshape(log_std, (M * A,)), target[:1]
    )


def trajectory_loss(
    policy: Policy,
    P: dict,
    traj: Trajectory,
    kind: str = "mse",
    mode: str = "scan",
    observer: Callable[[int, int], None] | None = None,
) -> nx.DiffArray:
    """Mean per-step loss over one trajectory, unrolled from the zero state."""
    c = policy.config
    K = c.chunk_K
    if traj.observations.shape[1] != c.obs_dim or traj.actions.shape[1] != c.action_dim:
        raise nx.ShapeError("trajectory dims do not match the policy")
    if (kind == "gmm-nll") != (c.head_kind == "gmm"):
        raise ValueError(f"loss {kind!r} does not fit head {c.head_kind!r}")
    T = len(traj)
    if mode == "scan":
        out = policy.sequence(traj.observations, P)
        if kind == "mse":
            return nx.mean(nx.square(out - all_chunk_targets(traj, K)))
        logits, means, log_std = out
        return gmm_nll_loss(logits, means, log_std, traj.actions)

    state = policy.reset()
    total = None
    for t in range(1, T + 1):
        state = policy.maybe_reset(state)
        if observer is not None:
            observer(state, t)
        out, state = policy.step(policy.encode(traj.observations[t - 1], P), state, P)
        lt = step_loss(policy, out, chunk_targets(traj, t, K), kind)
        total = lt if total is None else total + lt
    return nx.scale(total, 1.0 / T)


def prefix_step_loss(policy: Policy, P: dict, traj: Trajectory, t: int, kind: str = "mse") -> nx.DiffArray:
    """Loss at step ``t`` alone (1-based), with the state built from steps 1..t."""
    c = policy.config
    prefix = traj.observations[:t]
    target = chunk_targets(traj, t, c.chunk_K)
    out = policy.sequence(prefix, P)
    if kind == "mse":
        K = c.chunk_K
        return nx.mean(nx.square(out[(t - 1) * K:t * K] - target))
    logits, means, log_std = out
    return gmm_nll_loss(logits[t - 1:t], means[t - 1:t], log_std, target[:1])


# --------------------------------------------------------------- optimiser

def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        return lr0
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


def adamw_update(theta, grad, m, v, t: int, lr: float, betas=(0.9, 0.999), wd: float = 0.0, eps: float = 1e-8):
    """One decoupled-weight-decay Adam step; ``t`` is the 1-based step count.

    Returns ``(theta, m, v)`` as new arrays.
    """
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    theta = theta - lr * wd * theta
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class AdamW:
    """Moment buffers for a named parameter dict. Matrices get weight decay;
    vectors (biases, norms, decay rates, skips) do not."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
        self.betas, self.wd, self.eps = betas, weight_decay, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for k in params:
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(params[k])
            wd = self.wd if params[k].ndim >= 2 else 0.0
            params[k], self.m[k], self.v[k] = adamw_update(
                params[k], g, self.m[k], self.v[k], self.t, lr, self.betas, wd, self.eps
            )


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------- EWC

def ewc_penalty(P: dict, fisher: FisherInfo, lam: float) -> nx.DiffArray:
    """(lam / 2) * sum_p F_p (theta_p - anchor_p)^2."""
    total = nx.constant([0.0])
    if lam == 0:
        return total
    for k, F in fisher.diag.items():
        theta = P[k]
        total = total + nx.sum(nx.square(theta - fisher.anchor[k]) * F)
    return nx.scale(total, lam / 2.0)


def fisher_estimate(policy: Policy, dataset: Dataset, n_samples: int, seed: int = 0, kind: str = "mse") -> FisherInfo:
    """Empirical diagonal Fisher: mean squared per-step loss gradient."""
    rng = np.random.default_rng(seed)
    diag = {k: np.zeros_like(v) for k, v in policy.params.items()}
    for _ in range(n_samples):
        traj = dataset[int(rng.integers(len(dataset)))]
        t = int(rng.integers(1, len(traj) + 1))
        tape = nx.Tape()
        P = policy.bind(tape)
        loss = prefix_step_loss(policy, P, traj, t, kind)
        grads = tape.backward(loss)
        for k, var in P.items():
            g = grads.get(var.node)
            if g is not None:
                diag[k] += g * g
    for k in diag:
        diag[k] /= max(n_samples, 1)
    return FisherInfo(diag, {k: v.copy() for k, v in policy.params.items()})


# ----------------------------------------------------------------- training

def _grads(policy: Policy, traj: Trajectory, cfg: TrainConfig, fishers: list[FisherInfo]):
    tape = nx.Tape()
    P = policy.bind(tape)
    loss = trajectory_loss(policy, P, traj, cfg.loss, cfg.mode)
    value = float(loss.value.item())
    if not math.isfinite(value):
        raise nx.NonFiniteError(f"non-finite loss on trajectory seed={traj.seed}")
    if cfg.ewc is not None and cfg.ewc.lam > 0:
        for f in fishers:
            loss = loss + ewc_penalty(P, f, cfg.ewc.lam)
    g = tape.backward(loss)
    grads = {k: g.get(v.node, np.zeros_like(v.value)) for k, v in P.items()}
    return value, grads


def train_trajectory(
    policy: Policy,
    traj: Trajectory,
    cfg: TrainConfig,
    opt: AdamW,
    lr: float,
    fishers: list[FisherInfo] = (),
) -> float:
    """One optimiser update from one whole trajectory; returns its mean step loss."""
    value, grads = _grads(policy, traj, cfg, list(fishers))
    clip_grad_norm(grads, cfg.grad_clip)
    opt.step(policy.params, grads, lr)
    policy.invalidate()
    return value


def prepare_policy(policy_or_config, cfg: TrainConfig, dataset: Dataset) -> Policy:
    if isinstance(policy_or_config, PolicyConfig):
        policy = Policy.init(policy_or_config, cfg.seed)
    else:
        policy = policy_or_config.copy()
    c = policy.config
    if c.obs_dim != dataset.obs_dim or c.action_dim != dataset.action_dim:
        raise nx.ShapeError("dataset dims do not match the policy")
    return policy.with_config(history_reset_interval=cfg.history_reset_interval)


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    policy: Policy | PolicyConfig,
    fishers: list[FisherInfo] = (),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Policy, list[EpochRecord]]:
    """Train for ``cfg.epochs`` passes; trajectory order is reshuffled per epoch.

    ``policy`` is either a config (fresh init from ``cfg.seed``) or an existing
    policy, which is copied and trained further.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    policy = prepare_policy(policy, cfg, dataset)
    opt = AdamW(policy.params, cfg.betas, cfg.weight_decay, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    total = cfg.epochs * len(dataset)
    history: list[EpochRecord] = []
    update = 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(dataset))
        losses = []
        for i in order:
            lr = cosine_lr(update, total, cfg.lr0)
            losses.append(train_trajectory(policy, dataset[int(i)], cfg, opt, lr, fishers))
            update += 1
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), lr, time.perf_counter() - start)
        history.append(rec)
        log.debug("epoch %d loss %.6f lr %.2e", rec.epoch, rec.loss, rec.lr)
        if on_epoch is not None:
            on_epoch(rec)
    return policy, history


def write_log(history: list[EpochRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.lr), f"{r.seconds:.4f}"])
