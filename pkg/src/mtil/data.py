"""Demonstration trajectories, chunk targets, and the ``.mtilds`` file format.

File layout (integers little-endian)::

    6 bytes   magic b"MTILDS"
    u16       format version (1)
    u32       obs_dim
    u32       action_dim
    u32       trajectory count n
    n x u32   trajectory lengths T_i
    per trajectory, in order:
        u16 task-id length, task-id bytes (UTF-8)
        i64 seed
        u8  success flag
    per trajectory, in order:
        T_i * obs_dim    float64 observations (row-major)
        T_i * action_dim float64 actions (row-major)

All headers precede the payload, so a reader can seek to any trajectory
without parsing the ones before it.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MTILDS"
VERSION = 1


class DatasetFormatError(ValueError):
    """The file is not a readable dataset (magic, version, truncation, dims)."""


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, action_dim)
    task_id: str = ""
    seed: int = 0
    success: bool = True

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("observations and actions must be 2-D")
        if len(self.observations) != len(self.actions):
            raise ValueError("observation and action counts differ")
        if len(self.actions) < 1:
            raise ValueError("trajectory must have at least one step")
        if not (np.isfinite(self.observations).all() and np.isfinite(self.actions).all()):
            raise ValueError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.seed == other.seed
            and self.success == other.success
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.actions, other.actions)
        )


@dataclass
class Dataset:
    obs_dim: int
    action_dim: int
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        for tr in self.trajectories:
            self._check(tr)

    def _check(self, tr: Trajectory) -> None:
        if tr.observations.shape[1] != self.obs_dim or tr.actions.shape[1] != self.action_dim:
            raise ValueError(
                f"trajectory dims ({tr.observations.shape[1]}, {tr.actions.shape[1]}) "
                f"!= dataset dims ({self.obs_dim}, {self.action_dim})"
            )

    def append(self, tr: Trajectory) -> None:
        self._check(tr)
        self.trajectories.append(tr)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]


def chunk_targets(traj: Trajectory, t: int, K: int) -> np.ndarray:
    """Actions a_t .. a_{t+K-1}, padded with the last action. ``t`` is 1-based."""
    T = len(traj)
    if not 1 <= t <= T:
        raise IndexError(f"t={t} outside 1..{T}")
    if K < 1:
        raise ValueError("K must be >= 1")
    idx = np.minimum(np.arange(t, t + K), T) - 1
    return traj.actions[idx]


def all_chunk_targets(traj: Trajectory, K: int) -> np.ndarray:
    """Chunk targets for every step stacked into a (T*K, action_dim) array."""
    T = len(traj)
    idx = np.minimum(np.arange(T)[:, None] + np.arange(K)[None, :], T - 1)
    return traj.actions[idx.ravel()]


# ------------------------------------------------------------------ file IO

def dataset_bytes(ds: Dataset) -> bytes:
    parts = [MAGIC, struct.pack("<HIII", VERSION, ds.obs_dim, ds.action_dim, len(ds))]
    parts.append(struct.pack(f"<{len(ds)}I", *(len(tr) for tr in ds)))
    for tr in ds:
        tid = tr.task_id.encode()
        parts.append(struct.pack("<H", len(tid)) + tid + struct.pack("<qB", int(tr.seed), bool(tr.success)))
    for tr in ds:
        parts.append(np.ascontiguousarray(tr.observations, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(tr.actions, dtype="<f8").tobytes())
    return b"".join(parts)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def parse_dataset(buf: bytes) -> Dataset:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetFormatError("truncated dataset file")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise DatasetFormatError("bad magic; not an MTILDS file")
    version, obs_dim, action_dim, n = struct.unpack("<HIII", take(14))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if obs_dim < 1 or action_dim < 1:
        raise DatasetFormatError("dataset dims must be positive")
    lengths = struct.unpack(f"<{n}I", take(4 * n))
    if any(T < 1 for T in lengths):
        raise DatasetFormatError("empty trajectory in header")
    metas = []
    for _ in range(n):
        (ln,) = struct.unpack("<H", take(2))
        tid = take(ln).decode()
        seed, ok = struct.unpack("<qB", take(9))
        metas.append((tid, seed, bool(ok)))
    trajs = []
    for T, (tid, seed, ok) in zip(lengths, metas):
        obs = np.frombuffer(take(8 * T * obs_dim), dtype="<f8").astype(np.float64).reshape(T, obs_dim)
        act = np.frombuffer(take(8 * T * action_dim), dtype="<f8").astype(np.float64).reshape(T, action_dim)
        trajs.append(Trajectory(obs, act, tid, seed, ok))
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after last trajectory")
    return Dataset(obs_dim, action_dim, trajs)


def export_csv(ds: Dataset, directory) -> list[Path]:
    """One CSV per trajectory: columns t, o0.., a0.. (t is 1-based)."""
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["t"] + [f"o{i}" for i in range(ds.obs_dim)] + [f"a{i}" for i in range(ds.action_dim)]
    paths = []
    for i, tr in enumerate(ds):
        path = out_dir / f"traj_{i:05d}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(len(tr)):
                w.writerow([t + 1, *(repr(float(v)) for v in tr.observations[t]), *(repr(float(v)) for v in tr.actions[t])])
        paths.append(path)
    return paths
