"""Selective state-space layer and the gated residual block built around it.

Per channel ``d`` the layer keeps ``N`` state entries and updates them as::

    delta_t = softplus(dt_up(dt_down(x_t)) + dt_bias)      # (D,)
    B_t, C_t = x_t @ W_B, x_t @ W_C                        # (N,), shared by channels
    Abar_t[d] = exp(delta_t[d] * a[d]),  a = -exp(a_log)
    h_t[d, n] = Abar_t[d] * h_{t-1}[d, n] + delta_t[d] * B_t[n] * x_t[d]
    y_t[d]    = sum_n C_t[n] * h_t[d, n] + skip[d] * x_t[d]

``ssm_step`` composes this from tape primitives; ``ssm_scan`` runs the whole
sequence as one fused tape op with a hand-written backward pass. The two are
kept independent so each can check the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DiffArray

Array = "np.ndarray | DiffArray"


@dataclass
class SsmLayerParams:
    a_log: Array  # (D,)
    dt_down: Array  # (D, R)
    dt_up: Array  # (R, D)
    dt_bias: Array  # (D,)
    W_B: Array  # (D, N)
    W_C: Array  # (D, N)
    skip: Array  # (D,)

    @property
    def D(self) -> int:
        return self.a_log.shape[0]

    @property
    def N(self) -> int:
        return self.W_B.shape[1]

    @classmethod
    def init(cls, D: int, N: int, rng: np.random.Generator, dt_rank: int | None = None) -> "SsmLayerParams":
        R = dt_rank or max(1, math.ceil(D / 16))
        # a spans [-1, -1/64] log-uniformly across channels
        a_log = np.linspace(0.0, -math.log(64.0), D) if D > 1 else np.zeros(1)
        # softplus(bias) in [0.01, 0.1], log-uniform
        dt = np.exp(rng.uniform(math.log(0.01), math.log(0.1), D))
        dt_bias = dt + np.log(-np.expm1(-dt))
        return cls(
            a_log=a_log,
            dt_down=rng.normal(0.0, 1.0 / math.sqrt(D), (D, R)),
            dt_up=rng.normal(0.0, 0.1 / math.sqrt(R), (R, D)),
            dt_bias=dt_bias,
            W_B=rng.normal(0.0, 1.0 / math.sqrt(D), (D, N)),
            W_C=rng.normal(0.0, 1.0 / math.sqrt(D), (D, N)),
            skip=np.ones(D),
        )

    def named(self, prefix: str = "") -> dict[str, Array]:
        return {prefix + k: v for k, v in vars(self).items()}

    @classmethod
    def from_named(cls, named: dict, prefix: str = "") -> "SsmLayerParams":
        return cls(**{k: named[prefix + k] for k in cls.__dataclass_fields__})


@dataclass
class HiddenState:
    h: Array  # (D, N)
    step_index: int = 0

    @classmethod
    def zeros(cls, D: int, N: int) -> "HiddenState":
        return cls(np.zeros((D, N)), 0)

    def numpy(self) -> np.ndarray:
        return self.h.value if isinstance(self.h, DiffArray) else np.asarray(self.h)


@dataclass
class SelectiveParams:
    delta: Array  # (D,) or (T, D)
    B: Array  # (N,) or (T, N)
    C: Array  # (N,) or (T, N)


def _lift(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else nx.constant(x)


def selective_params(x, p: SsmLayerParams) -> SelectiveParams:
    """Input-dependent step size and state projections for one input or a sequence."""
    x = _lift(x)
    if x.shape[-1] != p.D:
        raise nx.ShapeError(f"input width {x.shape[-1]} != channel count {p.D}")
    delta = nx.softplus(x @ p.dt_down @ p.dt_up + p.dt_bias)
    return SelectiveParams(delta=delta, B=x @ p.W_B, C=x @ p.W_C)


def decay_rate(a_log) -> DiffArray:
    return nx.neg(nx.exp(a_log))


def discretize(sp: SelectiveParams, a_log) -> tuple[DiffArray, DiffArray]:
    """Zero-order hold on the state, Euler on the input: (Abar (D,), Bbar (D, N))."""
    delta = _lift(sp.delta)
    abar = nx.exp(delta * decay_rate(a_log))
    D, N = delta.shape[0], _lift(sp.B).shape[0]
    bbar = nx.reshape(delta, (D, 1)) @ nx.reshape(sp.B, (1, N))
    return abar, bbar


def ssm_step(h_prev: HiddenState, x, p: SsmLayerParams) -> tuple[HiddenState, DiffArray]:
    """One recurrence update built from tape primitives. ``x`` has shape (D,)."""
    x = _lift(x)
    D, N = p.D, p.N
    sp = selective_params(x, p)
    abar, _ = discretize(sp, p.a_log)
    # Bbar * x folded into one outer product: (delta * x) outer B
    drive = nx.reshape(sp.delta * x, (D, 1)) @ nx.reshape(sp.B, (1, N))
    decay = nx.reshape(abar, (D, 1)) @ nx.constant(np.ones((1, N)))
    h = decay * _lift(h_prev.h) + drive
    y = h @ sp.C + p.skip * x
    return HiddenState(h, h_prev.step_index + 1), y


def selective_scan(u, delta, a, B, C, h0: np.ndarray, reset: np.ndarray | None = None):
    """Fused recurrence over a sequence; returns ``(y, hT)``.

    ``u``, ``delta`` are (T, D); ``a`` is (D,); ``B``, ``C`` are (T, N).
    ``reset[t]`` zeroes the state before step ``t`` is applied. ``y`` excludes
    the skip term. ``h0`` and the returned ``hT`` are plain arrays (no gradient).
    """
    u, delta, a, B, C = (_lift(v) for v in (u, delta, a, B, C))
    uv, dv, av, Bv, Cv = u.value, delta.value, a.value, B.value, C.value
    T, D = uv.shape
    N = Bv.shape[1]
    if T < 1:
        raise ValueError("empty sequence")
    if h0.shape != (D, N):
        raise nx.ShapeError(f"h0 shape {h0.shape} != {(D, N)}")
    if reset is None:
        reset = np.zeros(T, dtype=bool)

    abar = np.exp(dv * av)  # (T, D)
    drive = (dv * uv)[:, :, None] * Bv[:, None, :]  # (T, D, N)
    H = np.empty((T, D, N))
    h = h0
    for t in range(T):
        if reset[t]:
            h = np.zeros((D, N))
        h = abar[t][:, None] * h + drive[t]
        H[t] = h
    y = np.einsum("tdn,tn->td", H, Cv)
    hT = H[-1].copy()

    def vjp(gy):
        GH = np.empty((T, D, N))
        g = np.zeros((D, N))
        for t in range(T - 1, -1, -1):
            g = g + gy[t][:, None] * Cv[t][None, :]
            GH[t] = g
            g = abar[t][:, None] * g
            if reset[t]:
                g = np.zeros((D, N))
        Hprev = np.empty_like(H)
        Hprev[0] = h0
        Hprev[1:] = H[:-1]
        Hprev[reset] = 0.0
        gC = np.einsum("td,tdn->tn", gy, H)
        g_abar = np.einsum("tdn,tdn->td", GH, Hprev) * abar
        g_drive = np.einsum("tdn,tn->td", GH, Bv)  # d/d(delta * u)
        gB = np.einsum("tdn,td->tn", GH, dv * uv)
        gdelta = g_abar * av + g_drive * uv
        ga = (g_abar * dv).sum(axis=0)
        gu = g_drive * dv
        return gu, gdelta, ga, gB, gC

    out = nx.custom_op("selective_scan", [u, delta, a, B, C], y, vjp)
    if not np.isfinite(hT).all():
        raise nx.NonFiniteError("state diverged")
    return out, hT


def reset_mask(T: int, every: int | None, start_index: int = 0) -> np.ndarray:
    """True where the state is zeroed before the step (step index multiple of ``every``)."""
    if every is None:
        return np.zeros(T, dtype=bool)
    if every < 1:
        raise ValueError("reset interval must be >= 1")
    return (start_index + np.arange(T)) % every == 0


def ssm_scan(
    xs, p: SsmLayerParams, h0: HiddenState | None = None, reset_every: int | None = None
) -> tuple[DiffArray, HiddenState]:
    """Whole-sequence version of :func:`ssm_step`; xs is (T, D)."""
    xs = _lift(xs)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("ssm_scan needs a non-empty (T, D) sequence")
    if h0 is None:
        h0 = HiddenState.zeros(p.D, p.N)
    T = xs.shape[0]
    sp = selective_params(xs, p)
    mask = reset_mask(T, reset_every, h0.step_index)
    y, hT = selective_scan(xs, sp.delta, decay_rate(p.a_log), sp.B, sp.C, h0.numpy(), mask)
    ys = y + xs * p.skip
    return ys, HiddenState(hT, h0.step_index + T)


# ------------------------------------------------------------------- block

@dataclass
class BlockParams:
    norm: Array  # (d_model,)
    W_in: Array  # (d_model, E)
    W_gate: Array  # (d_model, E)
    W_out: Array  # (E, d_model)
    ssm: SsmLayerParams = field(default=None)

    @classmethod
    def init(cls, d_model: int, d_state: int, rng: np.random.Generator, expand: int = 1,
             n_layers: int = 1, dt_rank: int | None = None) -> "BlockParams":
        E = expand * d_model
        return cls(
            norm=np.ones(d_model),
            W_in=rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, E)),
            W_gate=rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, E)),
            W_out=rng.normal(0.0, 1.0 / math.sqrt(E * n_layers), (E, d_model)),
            ssm=SsmLayerParams.init(E, d_state, rng, dt_rank),
        )

    def named(self, prefix: str = "") -> dict[str, Array]:
        out = {prefix + k: getattr(self, k) for k in ("norm", "W_in", "W_gate", "W_out")}
        out.update(self.ssm.named(prefix + "ssm."))
        return out

    @classmethod
    def from_named(cls, named: dict, prefix: str = "") -> "BlockParams":
        return cls(
            **{k: named[prefix + k] for k in ("norm", "W_in", "W_gate", "W_out")},
            ssm=SsmLayerParams.from_named(named, prefix + "ssm."),
        )


def mamba_block(x, h_prev: HiddenState, bp: BlockParams) -> tuple[DiffArray, HiddenState]:
    """Pre-norm gated SSM block with a residual connection, one step."""
    x = _lift(x)
    n = nx.rmsnorm(x) * bp.norm
    h, y = ssm_step(h_prev, n @ bp.W_in, bp.ssm)
    out = x + (y * nx.silu(n @ bp.W_gate)) @ bp.W_out
    return out, h


def mamba_block_seq(
    xs, h0: HiddenState | None, bp: BlockParams, reset_every: int | None = None
) -> tuple[DiffArray, HiddenState]:
    """:func:`mamba_block` over a (T, d_model) sequence via the fused scan."""
    xs = _lift(xs)
    n = nx.rmsnorm(xs) * bp.norm
    ys, hT = ssm_scan(n @ bp.W_in, bp.ssm, h0, reset_every)
    return xs + (ys * nx.silu(n @ bp.W_gate)) @ bp.W_out, hT
