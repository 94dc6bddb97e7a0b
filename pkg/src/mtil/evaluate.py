"""Success rates, lifelong-learning metrics, and the experiment drivers."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import generate_demos, make_env
from .infer import AggregationConfig, RandomController, rollout
from .policy import Policy, PolicyConfig, checkpoint_bytes, preset
from .train import EwcConfig, FisherInfo, TrainConfig, fisher_estimate, train


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return (lo, hi)


def _episode(args) -> bool:
    actor, env_id, agg, seed = args
    return rollout(actor, make_env(env_id), agg, seed)[1]


def success_rate(
    actor,
    env_id: str,
    n_episodes: int = 100,
    base_seed: int = 0,
    agg: AggregationConfig | None = None,
    workers: int = 1,
) -> tuple[float, tuple[float, float]]:
    """Fraction of successful episodes with seeds base_seed .. base_seed+n-1."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    jobs = [(actor, env_id, agg, base_seed + i) for i in range(n_episodes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_episode, jobs, chunksize=max(1, n_episodes // (4 * workers))))
    else:
        env = make_env(env_id)
        results = [rollout(actor, env, agg, seed)[1] for actor, _, agg, seed in jobs]
    k = int(sum(results))
    return k / n_episodes, wilson_interval(k, n_episodes)


# ------------------------------------------------------------- lifelong

@dataclass
class AccuracyMatrix:
    """A[i][j]: success on task j after training through task i (0-based)."""

    A: np.ndarray
    base: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.base = np.asarray(self.base, dtype=np.float64)
        N = self.base.shape[0]
        if self.A.shape != (N, N):
            raise ValueError(f"A must be {N}x{N}")
        if ((self.A < 0) | (self.A > 1)).any() or ((self.base < 0) | (self.base > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def N(self) -> int:
        return self.base.shape[0]


def fwt(m: AccuracyMatrix) -> float:
    """Mean of A[i-1][i] - base[i] over tasks 2..N."""
    if m.N < 2:
        raise ValueError("forward transfer needs at least two tasks")
    return float(sum(m.A[i - 1, i] - m.base[i] for i in range(1, m.N)) / (m.N - 1))


def nbt(m: AccuracyMatrix) -> float:
    """Mean forgetting max(0, A[i][i] - A[N][i]) over tasks 1..N-1."""
    if m.N < 2:
        raise ValueError("backward transfer needs at least two tasks")
    last = m.N - 1
    return float(sum(max(0.0, m.A[i, i] - m.A[last, i]) for i in range(last)) / (m.N - 1))


def auc(m: AccuracyMatrix) -> float:
    """Mean of the final row."""
    return float(m.A[m.N - 1].mean())


@dataclass
class LifelongResult:
    matrix: AccuracyMatrix
    fwt: float
    nbt: float
    auc: float
    tasks: list[str]
    ewc: bool

    def to_dict(self) -> dict:
        return dict(
            tasks=self.tasks,
            ewc=self.ewc,
            A=self.matrix.A.tolist(),
            A_base=self.matrix.base.tolist(),
            fwt=self.fwt,
            nbt=self.nbt,
            auc=self.auc,
        )


def run_lifelong(
    tasks: Sequence[str],
    policy_config: PolicyConfig,
    cfg: TrainConfig,
    n_demos: int = 50,
    eval_episodes: int = 100,
    seed: int = 0,
    base_epochs: int = 0,
    datasets: list | None = None,
) -> LifelongResult:
    """Train tasks in order, filling row i of A after task i.

    EWC is active when ``cfg.ewc`` is set: after each task a Fisher estimate
    is taken and every later task is penalised against all earlier anchors.
    ``A_base[i]`` is the success of a policy trained from scratch on task i
    alone for ``base_epochs`` epochs; 0 scores the untrained initialisation,
    i.e. the starting point of learning task i from scratch.
    """
    if len(tasks) < 2:
        raise ValueError("need at least two tasks")
    N = len(tasks)
    if datasets is None:
        datasets = [generate_demos(make_env(t), n_demos, seed + 7919 * i) for i, t in enumerate(tasks)]
    cfg = dataclasses.replace(cfg, seed=seed)
    agg = AggregationConfig(enabled=False, K=policy_config.chunk_K)

    def evaluate(policy: Policy, j: int) -> float:
        return success_rate(policy, tasks[j], eval_episodes, 10_000 + 1000 * j, agg)[0]

    A = np.zeros((N, N))
    policy = Policy.init(policy_config, seed)
    fishers: list[FisherInfo] = []
    for i in range(N):
        policy, _ = train(datasets[i], cfg, policy, fishers)
        for j in range(N):
            A[i, j] = evaluate(policy, j)
        if cfg.ewc is not None:
            fishers.append(fisher_estimate(policy, datasets[i], cfg.ewc.fisher_samples, seed + i, cfg.loss))

    base = np.zeros(N)
    for i in range(N):
        scratch = Policy.init(policy_config, seed)
        if base_epochs > 0:
            scratch, _ = train(datasets[i], dataclasses.replace(cfg, epochs=base_epochs), scratch)
        base[i] = evaluate(scratch, i)
    m = AccuracyMatrix(A, base)
    return LifelongResult(m, fwt(m), nbt(m), auc(m), list(tasks), cfg.ewc is not None)


# --------------------------------------------------------------- reports

def fingerprint(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, bytes):
            h.update(p)
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


@dataclass
class MethodResult:
    method: str
    env: str
    rate: float
    lo: float
    hi: float
    episodes: int
    base_seed: int
    fingerprint: str


@dataclass
class Report:
    results: list[MethodResult] = field(default_factory=list)
    lifelong: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        d = json.loads(text)
        return cls([MethodResult(**r) for r in d.get("results", [])], d.get("lifelong", []), d.get("notes", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Report":
        return cls.from_json(Path(path).read_text())

    def rows(self) -> list[list[str]]:
        rows = [["method", "env", "rate", "ci_lo", "ci_hi", "episodes", "base_seed", "fingerprint"]]
        for r in self.results:
            rows.append([r.method, r.env, f"{r.rate:.4f}", f"{r.lo:.4f}", f"{r.hi:.4f}",
                         str(r.episodes), str(r.base_seed), r.fingerprint])
        return rows

    def lifelong_rows(self) -> list[list[str]]:
        rows = [["tasks", "ewc", "fwt", "nbt", "auc"]]
        for d in self.lifelong:
            rows.append([" > ".join(d["tasks"]), str(d["ewc"]), f"{d['fwt']:.4f}", f"{d['nbt']:.4f}", f"{d['auc']:.4f}"])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerows(self.rows())
        if self.lifelong:
            w.writerow([])
            w.writerows(self.lifelong_rows())
        return buf.getvalue()

    def to_text(self) -> str:
        out = [format_table(self.rows())]
        if self.lifelong:
            out.append(format_table(self.lifelong_rows()))
        return "\n\n".join(out) + "\n"


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def evaluate_policy(
    policy: Policy, env_id: str, method: str, episodes: int = 100, base_seed: int = 0,
    agg: AggregationConfig | None = None, workers: int = 1,
) -> MethodResult:
    rate, (lo, hi) = success_rate(policy, env_id, episodes, base_seed, agg, workers)
    fp = fingerprint(checkpoint_bytes(policy), env_id, episodes, base_seed, dataclasses.asdict(agg) if agg else None)
    return MethodResult(method, env_id, rate, lo, hi, episodes, base_seed, fp)


# ---------------------------------------------------------------- ablation

@dataclass
class AblationSettings:
    env_id: str
    n_demos: int = 100
    chunk_K: int = 8
    epochs: int = 60
    lr0: float = 1e-3
    episodes: int = 100
    gamma: float = 0.9
    aggregate: bool = True
    seed: int = 0
    short_history: int = 10
    policy_overrides: dict = field(default_factory=dict)


HISTORY_REGIMES = ("full", "reset-10", "markov-mlp")


def ablation_policies(s: AblationSettings, dataset=None) -> dict[str, Policy]:
    """Train the full-history, short-history and memoryless variants."""
    env = make_env(s.env_id)
    if dataset is None:
        dataset = generate_demos(env, s.n_demos, s.seed)
    obs_dim, act_dim = env.spec.obs_dim, env.spec.action_dim
    out = {}
    for regime in HISTORY_REGIMES:
        overrides = dict(chunk_K=s.chunk_K, **s.policy_overrides)
        reset = None
        if regime == "markov-mlp":
            overrides["backbone"] = "mlp"
            reset = 1
        elif regime == "reset-10":
            reset = s.short_history
        pc = preset("desk", obs_dim, act_dim, **overrides)
        cfg = TrainConfig(epochs=s.epochs, lr0=s.lr0, history_reset_interval=reset, seed=s.seed)
        out[regime], _ = train(dataset, cfg, pc)
    return out


def run_ablation(s: AblationSettings, workers: int = 1) -> Report:
    policies = ablation_policies(s)
    agg = AggregationConfig(enabled=s.aggregate, gamma=s.gamma, K=s.chunk_K)
    report = Report(notes={"ablation": dataclasses.asdict(s)})
    for regime, pol in policies.items():
        report.results.append(evaluate_policy(pol, s.env_id, regime, s.episodes, 100_000, agg, workers))
    return report


def random_baseline(env_id: str, episodes: int, base_seed: int = 0) -> float:
    env = make_env(env_id)
    return success_rate(RandomController(env.spec.action_dim), env_id, episodes, base_seed)[0]


__all__ = [
    "AccuracyMatrix",
    "AblationSettings",
    "EwcConfig",
    "LifelongResult",
    "MethodResult",
    "Report",
    "auc",
    "fwt",
    "nbt",
    "run_ablation",
    "run_lifelong",
    "success_rate",
    "wilson_interval",
]
