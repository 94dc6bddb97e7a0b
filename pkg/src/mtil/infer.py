"""Closed-loop deployment with chunk buffering and exponential aggregation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .data import Trajectory
from .policy import GmmParams, Policy, gmm_sample, to_numpy_gmm


@dataclass(frozen=True)
class AggregationConfig:
    enabled: bool = True
    gamma: float = 0.9
    K: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.K < 1:
            raise ValueError("K must be >= 1")


class PredictionBuffer:
    """The most recent chunks, each tagged with the step ``j`` it was made at."""

    def __init__(self, K: int):
        self.K = K
        self._entries: deque[tuple[int, np.ndarray]] = deque(maxlen=K)

    def push(self, j: int, chunk: np.ndarray) -> None:
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape[0] != self.K:
            raise ValueError(f"chunk has {chunk.shape[0]} rows, buffer expects {self.K}")
        self.evict(j)
        self._entries.append((j, chunk))

    def evict(self, t: int) -> None:
        while self._entries and self._entries[0][0] + self.K <= t:
            self._entries.popleft()

    def candidates(self, t: int) -> list[tuple[int, np.ndarray]]:
        """(age, prediction for step t) for every chunk covering t."""
        return [(t - j, chunk[t - j]) for j, chunk in self._entries if j <= t < j + self.K]

    def __len__(self) -> int:
        return len(self._entries)


def aggregate(buffer: PredictionBuffer, t: int, cfg: AggregationConfig) -> np.ndarray:
    """Weighted mean of all buffered predictions for step t, weight gamma**age."""
    cands = buffer.candidates(t)
    if not cands:
        raise ValueError(f"no buffered prediction covers step {t}")
    ages = np.array([age for age, _ in cands], dtype=np.float64)
    w = cfg.gamma**ages
    preds = np.stack([p for _, p in cands])
    return (w[:, None] * preds).sum(axis=0) / w.sum()


class PolicyController:
    """Wraps a policy with its recurrent state and prediction buffer."""

    def __init__(self, policy: Policy, agg: AggregationConfig | None = None, gmm_sampling: bool = False):
        self.policy = policy
        K = policy.config.chunk_K
        self.agg = agg if agg is not None else AggregationConfig(enabled=False, K=K)
        if self.agg.K != K:
            raise ValueError(f"aggregation K={self.agg.K} differs from policy K={K}")
        self.gmm_sampling = gmm_sampling

    def reset(self, seed: int) -> None:
        self.state = self.policy.reset()
        self.buffer = PredictionBuffer(self.policy.config.chunk_K)
        self.rng = np.random.default_rng(seed)
        self.t = 0

    def act(self, obs: np.ndarray, env=None) -> np.ndarray:
        out, self.state = self.policy.act_step(obs, self.state)
        if isinstance(out, GmmParams):
            g = to_numpy_gmm(out)
            action = gmm_sample(g, self.rng) if self.gmm_sampling else g.mode_mean()
            chunk = action[None, :]
        else:
            chunk = out.value
        self.buffer.push(self.t, chunk)
        if self.agg.enabled:
            action = aggregate(self.buffer, self.t, self.agg)
        else:
            action = chunk[0]
        self.t += 1
        return action


class ExpertController:
    """Scripted privileged expert; reads the environment's latent state."""

    def reset(self, seed: int) -> None:
        pass

    def act(self, obs, env) -> np.ndarray:
        return env.expert_action()


class RandomController:
    def __init__(self, action_dim: int, low: float = -1.0, high: float = 1.0):
        self.action_dim, self.low, self.high = action_dim, low, high

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def act(self, obs, env=None) -> np.ndarray:
        return self.rng.uniform(self.low, self.high, self.action_dim)


def as_controller(actor, agg: AggregationConfig | None = None):
    if isinstance(actor, Policy):
        return PolicyController(actor, agg)
    if actor == "expert":
        return ExpertController()
    return actor


def rollout(actor, env, agg: AggregationConfig | None = None, seed: int = 0, t_max: int | None = None):
    """Run one episode; returns ``(trajectory, success)``."""
    if isinstance(actor, Policy):
        c = actor.config
        if c.obs_dim != env.spec.obs_dim or c.action_dim != env.spec.action_dim:
            raise ValueError("policy and environment dimensions differ")
    ctrl = as_controller(actor, agg)
    t_max = t_max or env.spec.horizon
    obs = env.reset(seed)
    ctrl.reset(seed)
    observations, actions = [], []
    done, success = False, False
    while not done and len(actions) < t_max:
        a = np.asarray(ctrl.act(obs, env), dtype=np.float64)
        observations.append(obs)
        actions.append(a)
        obs, done, success = env.step(a)
    traj = Trajectory(np.array(observations), np.array(actions), env.spec.task_id, seed, bool(success))
    return traj, bool(success)


def total_variation(actions: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(actions, axis=0), axis=1).sum())
