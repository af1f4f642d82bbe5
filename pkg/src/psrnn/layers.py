"""Trainable layer primitives: GRU cell, PReLU, Adam, step-decay schedule.

The recurrent cell follows the gated form

    z_t = g(Wz x_t + Uz h_{t-1})
    r_t = g(Wr x_t + Ur h_{t-1})
    h_t = z_t * h_{t-1} + (1 - z_t) * tanh(W x_t + U (r_t * h_{t-1}) + b)

where g is sigmoid by default. A tanh gate variant is selectable through
`gate_activation`, since negative gates are a defensible alternative reading
of the recurrence, but it is not the default.

All parameters are stored float32; every forward/backward runs in float64
internally. Backward passes are exact gradients of the unrolled recurrence,
checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, UsageError

GATE_ACTIVATIONS = ("sigmoid", "tanh")


def sigmoid64(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both tails stay accurate down to underflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class GruParams:
    """Six weight matrices plus the candidate bias of the gated cell."""

    Wz: np.ndarray
    Uz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.Wz.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Wz.shape[1]

    def validate(self):
        h, d = self.Wz.shape
        for name in ("Wz", "Wr", "W"):
            if getattr(self, name).shape != (h, d):
                raise ShapeError(f"{name} must have shape {(h, d)}")
        for name in ("Uz", "Ur", "U"):
            if getattr(self, name).shape != (h, h):
                raise ShapeError(f"{name} must have shape {(h, h)}")
        if self.b.shape != (h,):
            raise ShapeError(f"b must have shape {(h,)}")

    def named(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("Wz", "Uz", "Wr", "Ur", "W", "U", "b")}


@dataclass
class GruStep:
    """One recorded recurrence step: inputs, gates, output, pre-activations."""

    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h: np.ndarray
    az: np.ndarray
    ar: np.ndarray
    ac: np.ndarray
    c: np.ndarray


class _P64:
    """Float64 view of GruParams with transposes cached for the hot loop."""

    def __init__(self, p: GruParams):
        for k, v in p.named().items():
            setattr(self, k, v.astype(np.float64))
        self.WzT = self.Wz.T
        self.UzT = self.Uz.T
        self.WrT = self.Wr.T
        self.UrT = self.Ur.T
        self.WT = self.W.T
        self.UT = self.U.T


def _gate_fn(gate_activation: str):
    if gate_activation == "sigmoid":
        return sigmoid64, lambda g: g * (1.0 - g)
    if gate_activation == "tanh":
        return np.tanh, lambda g: 1.0 - g * g
    raise UsageError(f"gate_activation must be one of {GATE_ACTIVATIONS}")


def gru_forward(params: GruParams, x_t: np.ndarray, h_prev: np.ndarray,
                gate_activation: str = "sigmoid") -> GruStep:
    """Run one recurrence step; accepts (d,) vectors or (batch, d) stacks."""
    params.validate()
    squeeze = x_t.ndim == 1
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
    if x.shape[1] != params.input_dim or h.shape[1] != params.hidden:
        raise ShapeError(
            f"step dims {x.shape[1]}/{h.shape[1]} != params "
            f"{params.input_dim}/{params.hidden}"
        )
    if x.shape[0] != h.shape[0]:
        raise ShapeError(f"batch mismatch: {x.shape[0]} vs {h.shape[0]}")
    step = _step_forward(_P64(params), x, h, gate_activation)
    if squeeze:
        step = GruStep(**{k: v[0] for k, v in step.__dict__.items()})
    return step


def _step_forward(p: _P64, x: np.ndarray, h_prev: np.ndarray, gate_activation: str) -> GruStep:
    act, _ = _gate_fn(gate_activation)
    az = x @ p.WzT + h_prev @ p.UzT
    ar = x @ p.WrT + h_prev @ p.UrT
    z = act(az)
    r = act(ar)
    ac = x @ p.WT + (r * h_prev) @ p.UT + p.b
    c = np.tanh(ac)
    h = z * h_prev + (1.0 - z) * c
    return GruStep(x=x, h_prev=h_prev, z=z, r=r, h=h, az=az, ar=ar, ac=ac, c=c)


def gru_sequence_forward(params: GruParams, xs: Sequence[np.ndarray], h0: np.ndarray,
                         gate_activation: str = "sigmoid") -> list[GruStep]:
    """Unroll the recurrence over xs (each (batch, d)), starting from h0."""
    p = _P64(params)
    h = np.asarray(h0, dtype=np.float64)
    steps = []
    for x in xs:
        step = _step_forward(p, np.asarray(x, dtype=np.float64), h, gate_activation)
        steps.append(step)
        h = step.h
    return steps


def _zero_grads(params: GruParams) -> dict[str, np.ndarray]:
    return {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.named().items()}


def gru_sequence_backward(params: GruParams, steps: Sequence[GruStep],
                          grads_h_per_step: Sequence[np.ndarray] | None = None,
                          grad_h_final: np.ndarray | None = None,
                          gate_activation: str = "sigmoid"):
    """Exact gradients through the unrolled recurrence.

    grads_h_per_step holds the upstream gradient flowing into each step's
    output h_t (None entries allowed); grad_h_final is extra gradient on the
    last state. Returns (param_grads, grad_h0, grad_x_per_step) in float64.
    """
    if not steps:
        raise UsageError("cannot backpropagate through an empty step sequence")
    p = _P64(params)
    _, act_deriv = _gate_fn(gate_activation)
    grads = _zero_grads(params)
    carried = np.zeros_like(steps[-1].h)
    if grad_h_final is not None:
        carried = carried + grad_h_final
    grad_xs: list[np.ndarray | None] = [None] * len(steps)
    for t in range(len(steps) - 1, -1, -1):
        s = steps[t]
        gh = carried
        if grads_h_per_step is not None and grads_h_per_step[t] is not None:
            gh = gh + grads_h_per_step[t]
        dz = gh * (s.h_prev - s.c)
        dc = gh * (1.0 - s.z)
        dh_prev = gh * s.z
        dac = dc * (1.0 - s.c * s.c)
        rh = s.r * s.h_prev
        grads["W"] += dac.T @ s.x
        grads["U"] += dac.T @ rh
        grads["b"] += dac.sum(axis=0)
        drh = dac @ p.U
        dr = drh * s.h_prev
        dh_prev = dh_prev + drh * s.r
        dar = dr * act_deriv(s.r)
        daz = dz * act_deriv(s.z)
        grads["Wr"] += dar.T @ s.x
        grads["Ur"] += dar.T @ s.h_prev
        grads["Wz"] += daz.T @ s.x
        grads["Uz"] += daz.T @ s.h_prev
        dh_prev = dh_prev + dar @ p.Ur + daz @ p.Uz
        grad_xs[t] = dac @ p.W + dar @ p.Wr + daz @ p.Wz
        carried = dh_prev
    return grads, carried, grad_xs


def gru_backward(steps: Sequence[GruStep], params: GruParams,
                 grad_h_final: np.ndarray | None = None,
                 grads_h_per_step: Sequence[np.ndarray] | None = None,
                 gate_activation: str = "sigmoid"):
    """Float32 wrapper over gru_sequence_backward for recorded GruSteps."""
    steps2 = [
        s if s.x.ndim == 2 else GruStep(**{k: np.atleast_2d(v) for k, v in s.__dict__.items()})
        for s in steps
    ]
    gfin = None if grad_h_final is None else np.atleast_2d(np.asarray(grad_h_final, dtype=np.float64))
    gper = None
    if grads_h_per_step is not None:
        gper = [
            None if g is None else np.atleast_2d(np.asarray(g, dtype=np.float64))
            for g in grads_h_per_step
        ]
    grads, gh0, gxs = gru_sequence_backward(params, steps2, gper, gfin, gate_activation)
    squeeze = steps[0].x.ndim == 1
    param_grads = GruParams(**{k: v.astype(np.float32) for k, v in grads.items()})
    if squeeze:
        return param_grads, gh0[0].astype(np.float32), [g[0].astype(np.float32) for g in gxs]
    return param_grads, gh0.astype(np.float32), [g.astype(np.float32) for g in gxs]


# ---------------------------------------------------------------------------
# Fast sweep path used by the network
#
# The input-side projections of all steps share no recurrence, so they are
# hoisted into one matrix product per sweep; only the hidden-side products
# stay inside the step loop. Weight gradients are likewise accumulated with
# single stacked products after the backward loop. This computes exactly the
# recurrence above, just with fewer BLAS calls.
# ---------------------------------------------------------------------------


class _SweepP64:
    def __init__(self, p: GruParams):
        h = p.hidden
        self.h = h
        w = np.concatenate([p.Wz, p.Wr, p.W], axis=0).astype(np.float64)
        self.Wstack = w              # (3h, in)
        self.WstackT = np.ascontiguousarray(w.T)
        uzr = np.concatenate([p.Uz, p.Ur], axis=0).astype(np.float64)
        self.Uzr = uzr               # (2h, h)
        self.UzrT = np.ascontiguousarray(uzr.T)
        self.U = p.U.astype(np.float64)
        self.UT = np.ascontiguousarray(self.U.T)
        self.b = p.b.astype(np.float64)


@dataclass
class GruSweepCache:
    xs: np.ndarray       # (n, b, in)
    h_prevs: np.ndarray  # (n, b, h)
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    hs: np.ndarray
    gate_activation: str


def gru_sweep_forward(params: GruParams, xs: np.ndarray, h0: np.ndarray,
                      gate_activation: str = "sigmoid"):
    """Unroll over xs of shape (n_steps, batch, input_dim); returns (hs, cache)."""
    act, _ = _gate_fn(gate_activation)
    p = _SweepP64(params)
    n, b, _ = xs.shape
    h = p.h
    xproj = (xs.reshape(n * b, -1) @ p.WstackT).reshape(n, b, 3 * h)
    h_prevs = np.empty((n, b, h))
    zs = np.empty((n, b, h))
    rs = np.empty((n, b, h))
    cs = np.empty((n, b, h))
    hs = np.empty((n, b, h))
    ht = np.asarray(h0, dtype=np.float64)
    for t in range(n):
        h_prevs[t] = ht
        azar = xproj[t, :, : 2 * h] + ht @ p.UzrT
        zr = act(azar)
        z = zr[:, :h]
        r = zr[:, h:]
        ac = xproj[t, :, 2 * h :] + (r * ht) @ p.UT + p.b
        c = np.tanh(ac)
        ht = z * ht + (1.0 - z) * c
        zs[t], rs[t], cs[t], hs[t] = z, r, c, ht
    cache = GruSweepCache(xs=xs, h_prevs=h_prevs, z=zs, r=rs, c=cs, hs=hs,
                          gate_activation=gate_activation)
    return hs, cache


def gru_sweep_backward(params: GruParams, cache: GruSweepCache,
                       grads_h: np.ndarray, grad_h_final: np.ndarray | None = None):
    """Gradients for gru_sweep_forward; grads_h is (n, b, h) upstream."""
    p = _SweepP64(params)
    _, act_deriv = _gate_fn(cache.gate_activation)
    n, b, h = cache.hs.shape
    d3 = np.empty((n, b, 3 * h))
    carried = np.zeros((b, h)) if grad_h_final is None else np.asarray(grad_h_final, dtype=np.float64)
    for t in range(n - 1, -1, -1):
        gh = carried + grads_h[t]
        z, r, c, h_prev = cache.z[t], cache.r[t], cache.c[t], cache.h_prevs[t]
        dz = gh * (h_prev - c)
        dc = gh * (1.0 - z)
        dh = gh * z
        dac = dc * (1.0 - c * c)
        drh = dac @ p.U
        dh += drh * r
        dar = (drh * h_prev) * act_deriv(r)
        daz = dz * act_deriv(z)
        d3[t, :, :h] = daz
        d3[t, :, h : 2 * h] = dar
        d3[t, :, 2 * h :] = dac
        dh += d3[t, :, : 2 * h] @ p.Uzr
        carried = dh
    flat_d3 = d3.reshape(n * b, 3 * h)
    flat_x = cache.xs.reshape(n * b, -1)
    g_wstack = flat_d3.T @ flat_x
    flat_hp = cache.h_prevs.reshape(n * b, h)
    g_uzr = d3[:, :, : 2 * h].reshape(n * b, 2 * h).T @ flat_hp
    flat_dac = d3[:, :, 2 * h :].reshape(n * b, h)
    g_u = flat_dac.T @ (cache.r * cache.h_prevs).reshape(n * b, h)
    grads = {
        "Wz": g_wstack[:h], "Wr": g_wstack[h : 2 * h], "W": g_wstack[2 * h :],
        "Uz": g_uzr[:h], "Ur": g_uzr[h:], "U": g_u,
        "b": flat_dac.sum(axis=0),
    }
    grad_xs = (flat_d3 @ p.Wstack).reshape(cache.xs.shape)
    return grads, carried, grad_xs


# ---------------------------------------------------------------------------
# PReLU
# ---------------------------------------------------------------------------


def prelu_forward(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """x if x >= 0 else alpha * x, with one slope per trailing channel."""
    if alpha.shape != (x.shape[-1],):
        raise ShapeError(f"alpha {alpha.shape} must match channels {x.shape[-1]}")
    return np.where(x >= 0, x, alpha * x)


def prelu_backward(x: np.ndarray, alpha: np.ndarray, grad_out: np.ndarray):
    """Gradients wrt the input and the per-channel slopes."""
    if alpha.shape != (x.shape[-1],):
        raise ShapeError(f"alpha {alpha.shape} must match channels {x.shape[-1]}")
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} != input {x.shape}")
    neg = x < 0
    grad_x = np.where(neg, alpha * grad_out, grad_out)
    axes = tuple(range(x.ndim - 1))
    grad_alpha = np.where(neg, grad_out * x, 0.0).sum(axis=axes)
    return grad_x, grad_alpha


def prelu(x: np.ndarray, alpha: np.ndarray, direction: str = "forward", grad_out=None):
    if direction == "forward":
        return prelu_forward(x, alpha)
    if direction == "backward":
        if grad_out is None:
            raise UsageError("backward direction needs grad_out")
        return prelu_backward(x, alpha, grad_out)
    raise UsageError(f"direction must be forward or backward, got {direction!r}")


# ---------------------------------------------------------------------------
# Adam with step decay
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise UsageError("beta1 and beta2 must lie in (0, 1)")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """Apply one bias-corrected Adam update in place; returns (params, state)."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad {name} shape {g.shape} != param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float32)
            state.v[name] = np.zeros(p.shape, dtype=np.float32)
        m = state.m[name].astype(np.float64) * b1 + (1.0 - b1) * g
        v = state.v[name].astype(np.float64) * b2 + (1.0 - b2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps_adam)
        p[...] = (p.astype(np.float64) - update).astype(np.float32)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: lr(i) = base_lr * decay_ratio ** (#milestones passed)."""

    base_lr: float = 0.001
    decay_ratio: float = 0.1
    milestones: tuple[int, ...] = (50_000, 75_000, 85_000)
    total_iters: int = 100_000

    def __post_init__(self):
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise UsageError(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.total_iters:
            raise UsageError(f"milestones {ms} must stay below total {self.total_iters}")


def scaled_schedule(total_iters: int, base_lr: float = 0.001, decay_ratio: float = 0.1) -> LrSchedule:
    """Shrink the reference 100k-iteration schedule proportionally.

    Milestones land at 50/75/85% of the run; for very short runs, collided
    or out-of-range milestones are dropped rather than rejected.
    """
    ms: list[int] = []
    for frac in (0.5, 0.75, 0.85):
        v = int(round(total_iters * frac))
        if 0 < v < total_iters and (not ms or v > ms[-1]):
            ms.append(v)
    return LrSchedule(base_lr=base_lr, decay_ratio=decay_ratio,
                      milestones=tuple(ms), total_iters=total_iters)


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    if not 0 <= iteration < schedule.total_iters:
        raise UsageError(
            f"iteration {iteration} outside [0, {schedule.total_iters})"
        )
    passed = sum(1 for m in schedule.milestones if m <= iteration)
    return schedule.base_lr * schedule.decay_ratio ** passed


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot_uniform(gen: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape).astype(np.float32)


def init_gru(gen: np.random.Generator, hidden: int, input_dim: int) -> GruParams:
    def w():
        return glorot_uniform(gen, (hidden, input_dim), input_dim, hidden)

    def u():
        return glorot_uniform(gen, (hidden, hidden), hidden, hidden)

    return GruParams(Wz=w(), Uz=u(), Wr=w(), Ur=u(), W=w(), U=u(),
                     b=np.zeros(hidden, dtype=np.float32))
