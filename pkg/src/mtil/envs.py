"""Toy partially observed tasks whose correct action depends on history.

``two-stage-reach``
    A 2-D point must visit A=(1, 0), come back to the origin, then visit
    B=(-1, 0). Only the position is observed, so standing at the origin after
    visiting A looks exactly like the start. The expert pauses at the origin
    for 12-18 steps before each departure, longer than a 10-step window.

``cue-recall:L=<delay>:m=<+1|-1>``
    A cue of +-1 is shown on the first step only. After ``L`` blank steps a
    go flag appears and the action's sign must equal ``m * cue``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Trajectory


class EpisodeDone(RuntimeError):
    """``step`` was called after the episode ended."""


class ExpertFailure(RuntimeError):
    """The scripted expert failed too often to build a dataset."""


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    horizon: int
    success: str
    task_id: str


class TwoStageReach:
    DT = 0.1
    RADIUS = 0.15
    GAIN = 10.0  # GAIN * DT == 1: the controller lands on a subgoal exactly
    A = np.array([1.0, 0.0])
    B = np.array([-1.0, 0.0])
    ORIGIN = np.zeros(2)
    # expert plan: hold at origin, go to A, go to origin, hold, go to B
    PLAN = (("hold", 0), ("goto", A), ("goto", ORIGIN), ("hold", 1), ("goto", B))
    HOLD_RANGE = (12, 18)

    def __init__(self, horizon: int = 400, obs_noise: float = 0.0):
        self.horizon = horizon
        self.obs_noise = obs_noise
        self.spec = EnvSpec(
            obs_dim=2,
            action_dim=2,
            horizon=horizon,
            success="visit A, return to origin, then visit B (radius 0.15)",
            task_id="two-stage-reach",
        )
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        # per-leg speed caps and pause lengths: the per-episode variation in demos
        self.speeds = self._rng.uniform(0.5, 1.0, size=len(self.PLAN))
        self.holds = self._rng.integers(self.HOLD_RANGE[0], self.HOLD_RANGE[1] + 1, size=2)
        self.held = 0
        self.pos = np.zeros(2)
        self.t = 0
        self.phase = 0  # index into PLAN of the expert's current stage
        self.visited_a = False
        self.returned = False
        self.failed = False
        self.success = False
        self._done = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        obs = self.pos.copy()
        if self.obs_noise > 0:
            obs += self._rng.normal(0.0, self.obs_noise, 2)
        return obs

    def step(self, action) -> tuple[np.ndarray, bool, bool]:
        if self._done:
            raise EpisodeDone("step after episode end; call reset")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        self.pos = self.pos + self.DT * a
        self.t += 1
        r = self.RADIUS
        if not self.visited_a and np.linalg.norm(self.pos - self.A) <= r:
            self.visited_a = True
        elif self.visited_a and not self.returned and np.linalg.norm(self.pos) <= r:
            self.returned = True
        if np.linalg.norm(self.pos - self.B) <= r:
            if self.visited_a and self.returned:
                self.success = not self.failed
            else:
                self.failed = True
        self._advance_plan()
        self._done = self.success or self.t >= self.horizon
        return self._observe(), self._done, self.success

    def _advance_plan(self) -> None:
        if self.phase >= len(self.PLAN):
            return
        kind, arg = self.PLAN[self.phase]
        if kind == "hold":
            self.held += 1
            if self.held >= self.holds[arg]:
                self.phase, self.held = self.phase + 1, 0
        elif np.linalg.norm(self.pos - arg) < 1e-6:
            self.phase += 1

    def expert_action(self) -> np.ndarray:
        """Proportional controller toward the current subgoal, capped per leg."""
        phase = min(self.phase, len(self.PLAN) - 1)
        kind, arg = self.PLAN[phase]
        goal = self.ORIGIN if kind == "hold" else arg
        cap = self.speeds[phase]
        return np.clip(self.GAIN * (goal - self.pos), -cap, cap)


class CueRecall:
    def __init__(self, L: int = 50, m: int = 1):
        if L < 0:
            raise ValueError("delay must be >= 0")
        if m not in (1, -1):
            raise ValueError("m must be +1 or -1")
        self.L, self.m = L, m
        self.horizon = L + 2
        self.spec = EnvSpec(
            obs_dim=2,
            action_dim=1,
            horizon=self.horizon,
            success="sign of the action at the go step equals m * cue",
            task_id=f"cue-recall:L={L}:m={m:+d}",
        )
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.cue = float(rng.choice([-1.0, 1.0]))
        self.t = 0
        self.success = False
        self._done = False
        return self._observe()

    @property
    def decision_step(self) -> int:
        """1-based index of the step whose action is scored."""
        return self.L + 2

    def _observe(self) -> np.ndarray:
        step = self.t + 1  # 1-based index of the step about to be taken
        return np.array([
            self.cue if step == 1 else 0.0,
            1.0 if step == self.decision_step else 0.0,
        ])

    def step(self, action) -> tuple[np.ndarray, bool, bool]:
        if self._done:
            raise EpisodeDone("step after episode end; call reset")
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        self.t += 1
        if self.t == self.decision_step:
            self.success = np.sign(a) == self.m * self.cue
        self._done = self.t >= self.horizon
        return self._observe(), self._done, bool(self.success)

    def expert_action(self) -> np.ndarray:
        if self.t + 1 == self.decision_step:
            return np.array([self.m * self.cue])
        return np.zeros(1)


LIFELONG_TASKS = ("cue-recall:L=10:m=+1", "cue-recall:L=30:m=-1", "cue-recall:L=50:m=+1")


def make_env(env_id: str, obs_noise: float = 0.0):
    """Build an environment from its string id."""
    if env_id == "two-stage-reach":
        return TwoStageReach(obs_noise=obs_noise)
    if env_id.startswith("cue-recall"):
        opts = dict(L="50", m="+1")
        for part in env_id.split(":")[1:]:
            match = re.fullmatch(r"(L|m)=([+-]?\d+)", part)
            if not match:
                raise ValueError(f"bad cue-recall option {part!r}")
            opts[match.group(1)] = match.group(2)
        return CueRecall(L=int(opts["L"]), m=int(opts["m"]))
    raise ValueError(f"unknown environment {env_id!r}")


def run_expert(env, seed: int) -> Trajectory:
    obs = env.reset(seed)
    observations, actions = [], []
    done, success = False, False
    while not done:
        a = env.expert_action()
        observations.append(obs)
        actions.append(a)
        obs, done, success = env.step(a)
    return Trajectory(np.array(observations), np.array(actions), env.spec.task_id, seed, success)


def generate_demos(env, n: int, seed: int, max_failure_rate: float = 0.1) -> Dataset:
    """``n`` successful expert demonstrations with seeds drawn from ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    ds = Dataset(env.spec.obs_dim, env.spec.action_dim)
    failures = 0
    while len(ds) < n:
        tr = run_expert(env, int(rng.integers(2**31)))
        if tr.success:
            ds.append(tr)
            continue
        failures += 1
        if failures > max_failure_rate * n:
            raise ExpertFailure(f"expert failed {failures} episodes while collecting {n} demos")
    return ds


def replay(env, traj: Trajectory) -> bool:
    """Execute a trajectory's actions open loop from its seed; report success."""
    env.reset(traj.seed)
    success = False
    for a in traj.actions:
        _, done, success = env.step(a)
        if done:
            break
    return success
