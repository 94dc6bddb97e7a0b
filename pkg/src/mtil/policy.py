"""Recurrent chunking policy: encoder -> SSM blocks -> linear or GMM head.

The same parameters serve two execution paths. :meth:`Policy.step` advances
one observation at a time (deployment, and the step-wise training route);
:meth:`Policy.sequence` runs a whole trajectory through the fused scan.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import DiffArray
from .ssm import BlockParams, HiddenState, mamba_block, mamba_block_seq

LOG_STD_BOUNDS = (-5.0, 2.0)
MIN_STD = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int
    action_dim: int
    chunk_K: int = 1
    d_model: int = 64
    d_state: int = 16
    n_layers: int = 4
    head_kind: str = "linear-chunk"  # or "gmm"
    gmm_components: int = 5
    backbone: str = "mamba"  # or "mlp" (memoryless baseline)
    expand: int = 1
    mlp_hidden: int = 128
    history_reset_interval: int | None = None

    def __post_init__(self):
        if self.chunk_K < 1:
            raise ValueError("chunk_K must be >= 1")
        if self.head_kind not in ("linear-chunk", "gmm"):
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if self.head_kind == "gmm" and self.chunk_K != 1:
            raise ValueError("gmm head requires chunk_K == 1")
        if self.gmm_components < 1:
            raise ValueError("gmm_components must be >= 1")
        if self.backbone not in ("mamba", "mlp"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.history_reset_interval is not None and self.history_reset_interval < 1:
            raise ValueError("history_reset_interval must be >= 1")
        for name in ("obs_dim", "action_dim", "d_model", "d_state", "n_layers", "expand", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


PRESETS = {
    # small enough to train on a laptop CPU
    "desk": dict(d_model=64, d_state=16, n_layers=4, chunk_K=8),
    # large configuration; constructible, too slow to train here
    "sim": dict(d_model=2048, d_state=512, n_layers=4, chunk_K=50),
}


def preset(name: str, obs_dim: int, action_dim: int, **overrides) -> PolicyConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PolicyConfig(obs_dim=obs_dim, action_dim=action_dim, **{**PRESETS[name], **overrides})


@dataclass
class PolicyState:
    layers: list[HiddenState]
    step_index: int = 0

    def norm(self) -> float:
        return float(sum(np.abs(s.numpy()).sum() for s in self.layers))


@dataclass
class GmmParams:
    """Diagonal Gaussian mixture. ``logits`` may contain -inf for zero weight."""

    logits: np.ndarray  # (M,)
    means: np.ndarray  # (M, A)
    log_stds: np.ndarray  # (M, A)

    @classmethod
    def from_weights(cls, weights, means, log_stds) -> "GmmParams":
        with np.errstate(divide="ignore"):
            logits = np.log(np.asarray(weights, dtype=np.float64))
        return cls(logits, np.atleast_2d(np.asarray(means, float)), np.atleast_2d(np.asarray(log_stds, float)))

    @property
    def weights(self) -> np.ndarray:
        z = np.exp(self.logits - self.logits.max())
        return z / z.sum()

    @property
    def log_weights(self) -> np.ndarray:
        return self.logits - np.logaddexp.reduce(self.logits)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def mode_mean(self) -> np.ndarray:
        """Mean of the highest-weight component."""
        return self.means[int(np.argmax(self.logits))].copy()


def gmm_nll(p: GmmParams, a) -> float:
    """Negative log-likelihood of one action, evaluated in log space."""
    a = np.asarray(a, dtype=np.float64)
    log_stds = p.log_stds
    if (log_stds < math.log(MIN_STD)).any():
        warnings.warn(f"GMM std below {MIN_STD}; clamping", RuntimeWarning, stacklevel=2)
        log_stds = np.maximum(log_stds, math.log(MIN_STD))
    z = (a[None, :] - p.means) / np.exp(log_stds)
    comp = -0.5 * (z * z).sum(axis=1) - log_stds.sum(axis=1) - 0.5 * a.size * _LOG_2PI
    return float(-np.logaddexp.reduce(p.log_weights + comp))


def gmm_sample(p: GmmParams, rng: np.random.Generator) -> np.ndarray:
    m = rng.choice(len(p.logits), p=p.weights)
    return p.means[m] + np.exp(p.log_stds[m]) * rng.standard_normal(p.means.shape[1])


def gmm_nll_loss(logits: DiffArray, means: DiffArray, log_std: DiffArray, targets: np.ndarray) -> DiffArray:
    """Mean NLL over a batch. logits (T, M), means (T, M*A), log_std (M*A,), targets (T, A)."""
    T, A = targets.shape
    M = logits.shape[1]
    z = (means - np.tile(targets, (1, M))) * nx.exp(nx.neg(log_std))
    sq = nx.reshape(nx.sum(nx.reshape(nx.square(z), (T * M, A)), axis=-1), (T, M))
    log_det = nx.sum(nx.reshape(log_std, (M, A)), axis=-1)
    comp = nx.scale(sq, -0.5) - log_det + (-0.5 * A * _LOG_2PI)
    return nx.neg(nx.mean(nx.logsumexp(nx.log_softmax(logits) + comp)))


class Policy:
    """Parameters plus the forward computations that use them."""

    def __init__(self, config: PolicyConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._const: dict[str, DiffArray] | None = None

    @classmethod
    def init(cls, config: PolicyConfig, seed: int = 0) -> "Policy":
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, np.ndarray] = {
            "enc.W": rng.normal(0.0, 1.0 / math.sqrt(c.obs_dim), (c.obs_dim, c.d_model)),
            "enc.b": np.zeros(c.d_model),
        }
        if c.backbone == "mamba":
            for i in range(c.n_layers):
                bp = BlockParams.init(c.d_model, c.d_state, rng, c.expand, c.n_layers)
                p.update(bp.named(f"blocks.{i}."))
            p["norm_f"] = np.ones(c.d_model)
            feat = c.d_model
        else:
            H = c.mlp_hidden
            p["mlp.W1"] = rng.normal(0.0, math.sqrt(2.0 / c.d_model), (c.d_model, H))
            p["mlp.b1"] = np.zeros(H)
            p["mlp.W2"] = rng.normal(0.0, math.sqrt(2.0 / H), (H, H))
            p["mlp.b2"] = np.zeros(H)
            feat = H
        A = c.action_dim
        if c.head_kind == "linear-chunk":
            p["head.W"] = rng.normal(0.0, 0.5 / math.sqrt(feat), (feat, c.chunk_K * A))
            p["head.b"] = np.zeros(A)
        else:
            M = c.gmm_components
            p["head.W_logit"] = rng.normal(0.0, 0.1 / math.sqrt(feat), (feat, M))
            p["head.b_logit"] = np.zeros(M)
            p["head.W_mu"] = rng.normal(0.0, 0.5 / math.sqrt(feat), (feat, M * A))
            p["head.b_mu"] = rng.normal(0.0, 0.5, M * A)
            p["head.log_std"] = np.full(M * A, -1.0)
        return cls(config, p)

    def copy(self) -> "Policy":
        return Policy(self.config, {k: v.copy() for k, v in self.params.items()})

    def with_config(self, **changes) -> "Policy":
        return Policy(dataclasses.replace(self.config, **changes), self.params)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def bind(self, tape: nx.Tape | None = None) -> dict[str, DiffArray]:
        """Parameters as tape variables, or cached constants when ``tape`` is None."""
        if tape is not None:
            return {k: tape.variable(v) for k, v in self.params.items()}
        if self._const is None:
            self._const = {k: DiffArray(v) for k, v in self.params.items()}
        return self._const

    def invalidate(self) -> None:
        """Drop cached constants after parameters are modified in place."""
        self._const = None

    # ---------------------------------------------------------------- pieces

    def _blocks(self, P) -> list[BlockParams]:
        return [BlockParams.from_named(P, f"blocks.{i}.") for i in range(self.config.n_layers)]

    def encode(self, o, P=None) -> DiffArray:
        P = P or self.bind()
        o = o if isinstance(o, DiffArray) else nx.constant(o)
        if o.shape[-1] != self.config.obs_dim:
            raise nx.ShapeError(f"observation width {o.shape[-1]} != obs_dim {self.config.obs_dim}")
        return o @ P["enc.W"] + P["enc.b"]

    def reset(self) -> PolicyState:
        c = self.config
        n = c.n_layers if c.backbone == "mamba" else 0
        E = c.expand * c.d_model
        return PolicyState([HiddenState.zeros(E, c.d_state) for _ in range(n)], 0)

    def maybe_reset(self, s: PolicyState, interval: int | None = None) -> PolicyState:
        """Zero the state when the history window boundary is reached."""
        interval = interval if interval is not None else self.config.history_reset_interval
        if interval is not None and s.step_index % interval == 0 and s.step_index > 0:
            layers = [HiddenState(np.zeros_like(h.numpy()), s.step_index) for h in s.layers]
            return PolicyState(layers, s.step_index)
        return s

    def _head(self, f: DiffArray, P, T: int | None):
        """Map features to the output. T is None for a single step."""
        c = self.config
        K, A = c.chunk_K, c.action_dim
        if c.head_kind == "linear-chunk":
            raw = f @ P["head.W"]
            rows = K if T is None else T * K
            return nx.reshape(raw, (rows, A)) + P["head.b"]
        logits = f @ P["head.W_logit"] + P["head.b_logit"]
        means = f @ P["head.W_mu"] + P["head.b_mu"]
        log_std = nx.clip(P["head.log_std"], *LOG_STD_BOUNDS)
        return logits, means, log_std

    def _mlp(self, x: DiffArray, P) -> DiffArray:
        h = nx.relu(x @ P["mlp.W1"] + P["mlp.b1"])
        return nx.relu(h @ P["mlp.W2"] + P["mlp.b2"])

    # ----------------------------------------------------------------- steps

    def step(self, x, s: PolicyState, P=None):
        """Advance the state by one embedding and predict.

        Returns ``(out, state)`` where ``out`` is a (K, action_dim) chunk for
        the linear head, or a :class:`GmmParams` of DiffArrays for the gmm head.
        """
        P = P or self.bind()
        x = x if isinstance(x, DiffArray) else nx.constant(x)
        if self.config.backbone == "mamba":
            layers = []
            for bp, h in zip(self._blocks(P), s.layers):
                x, h = mamba_block(x, h, bp)
                layers.append(h)
            f = nx.rmsnorm(x) * P["norm_f"]
        else:
            layers = []
            f = self._mlp(x, P)
        out = self._head(f, P, None)
        if self.config.head_kind == "gmm":
            logits, means, log_std = out
            M, A = self.config.gmm_components, self.config.action_dim
            out = GmmParams(logits, nx.reshape(means, (M, A)), nx.reshape(log_std, (M, A)))
            _check_finite_out(out.logits, out.means)
        else:
            _check_finite_out(out)
        return out, PolicyState(layers, s.step_index + 1)

    def act_step(self, o, s: PolicyState, P=None):
        """encode + maybe_reset + step; the unit both training and rollout use."""
        s = self.maybe_reset(s)
        return self.step(self.encode(o, P), s, P)

    def sequence(self, obs, P=None, reset_every: int | None = None):
        """Run a full (T, obs_dim) observation sequence from the zero state.

        Linear head: returns a (T*K, action_dim) stack of chunks. GMM head:
        returns ``(logits (T, M), means (T, M*A), log_std (M*A,))``.
        """
        P = P or self.bind()
        reset_every = reset_every if reset_every is not None else self.config.history_reset_interval
        x = self.encode(obs, P)
        T = x.shape[0]
        if self.config.backbone == "mamba":
            for bp in self._blocks(P):
                x, _ = mamba_block_seq(x, None, bp, reset_every)
            f = nx.rmsnorm(x) * P["norm_f"]
        else:
            f = self._mlp(x, P)
        return self._head(f, P, T)


def _check_finite_out(*arrays) -> None:
    for a in arrays:
        v = a.value if isinstance(a, DiffArray) else a
        if not np.isfinite(v).all():
            raise nx.NonFiniteError("policy output is not finite")


def to_numpy_gmm(p: GmmParams) -> GmmParams:
    def v(a):
        return a.value if isinstance(a, DiffArray) else np.asarray(a)

    return GmmParams(v(p.logits), v(p.means), v(p.log_stds))


# ------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes  magic b"MTILCK\x00\x01"
#   u32      format version (1)
#   u32      length L of the JSON record, then L bytes UTF-8 JSON
#            {"config": {...PolicyConfig...}, "meta": {...}}
#   u32      parameter count P, then per parameter, in sorted name order:
#            u16 name length, name bytes (UTF-8), u8 ndim, ndim x u32 dims,
#            prod(dims) x float64 little-endian values

CKPT_MAGIC = b"MTILCK\x00\x01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(policy: Policy, meta: dict | None = None) -> bytes:
    record = json.dumps({"config": policy.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(record)), record]
    names = sorted(policy.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(policy.params[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(policy: Policy, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(policy, meta))


def load_checkpoint(path) -> tuple[Policy, dict]:
    buf = Path(path).read_bytes()
    return parse_checkpoint(buf)


def parse_checkpoint(buf: bytes) -> tuple[Policy, dict]:
    r = _Reader(buf, CheckpointError)
    if r.take(8) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, n = r.unpack("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    record = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.remaining():
        raise CheckpointError("trailing bytes in checkpoint")
    try:
        config = PolicyConfig.from_dict(record["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid config record: {e}") from e
    expected = {k: v.shape for k, v in Policy.init(config).params.items()}
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError("parameter names or shapes do not match the config")
    return Policy(config, params), record.get("meta", {})


class _Reader:
    def __init__(self, buf: bytes, error: type[Exception]):
        self.buf, self.pos, self.error = buf, 0, error

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise self.error("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.buf) - self.pos
