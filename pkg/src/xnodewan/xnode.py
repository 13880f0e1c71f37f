"""XNODE: a neural ODE along constant spatial paths.

For a spatial point x the hidden state solves dh/dt = N_vec(h, t, x) from
h(start) = N_init(value), and the model output is a linear readout of h.
Integration is classical RK4; gradients flow through the unrolled steps.

Two implementations share the same parameters:

* ``integrate_paths`` - batched torch, many paths in lockstep, optional
  forward tangents w.r.t. x (for the weak form's spatial derivatives);
* ``xnode_forward_tape`` - scalar reference on :class:`autodiff.AdTape`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from xnodewan import autodiff as ad
from xnodewan.domain import SubPathSchedule
from xnodewan.nets import (
    DTYPE, MlpConfig, MlpParams, init_params, mlp_apply, mlp_forward, params_to_leaves, unflatten_leaves,
)


class DivergenceError(FloatingPointError):
    """The ODE state became non-finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite ODE state at step {step}")
        self.step = step


@dataclass(frozen=True)
class XNodeConfig:
    d: int
    h_dim: int = 16
    vec_widths: tuple = (32, 32, 32)
    init_widths: tuple = (16,)
    activation: str = "tanh"

    def init_config(self) -> MlpConfig:
        return MlpConfig(1, tuple(self.init_widths), self.h_dim, self.activation)

    def vec_config(self) -> MlpConfig:
        return MlpConfig(self.h_dim + 1 + self.d, tuple(self.vec_widths), self.h_dim, self.activation)


@dataclass
class XNodeParams:
    theta1: MlpParams            # N_init: 1 -> h_dim
    theta2: MlpParams            # N_vec: (h, t, x) -> h_dim
    theta_tilde: torch.Tensor    # readout weights (h_dim,)

    def __post_init__(self):
        h = self.theta_tilde.numel()
        if self.theta1.config.output_dim != h or self.theta2.config.output_dim != h:
            raise ValueError("N_init output, N_vec output and readout width must all equal h_dim")
        if self.theta2.config.input_dim <= h:
            raise ValueError("N_vec input must be (h, t, x)")

    @property
    def h_dim(self) -> int:
        return self.theta_tilde.numel()

    @property
    def d(self) -> int:
        return self.theta2.config.input_dim - self.h_dim - 1

    def tensors(self) -> List[torch.Tensor]:
        return self.theta1.tensors() + self.theta2.tensors() + [self.theta_tilde]

    def requires_grad_(self, flag=True):
        for p in self.tensors():
            p.requires_grad_(flag)
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta1.flat(), self.theta2.flat(), self.theta_tilde.detach().numpy()])

    def to_dict(self) -> dict:
        return {
            "N_init": self.theta1.to_dict(),
            "N_vec": self.theta2.to_dict(),
            "readout": self.theta_tilde.detach().tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "XNodeParams":
        return cls(
            MlpParams.from_dict(doc["N_init"]),
            MlpParams.from_dict(doc["N_vec"]),
            torch.tensor(doc["readout"], dtype=DTYPE),
        )

    def clone(self) -> "XNodeParams":
        return XNodeParams.from_dict(self.to_dict())


def init_xnode(config: XNodeConfig, seed) -> XNodeParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta1 = init_params(config.init_config(), rng)
    theta2 = init_params(config.vec_config(), rng)
    bound = math.sqrt(6.0 / (config.h_dim + 1))
    readout = torch.tensor(rng.uniform(-bound, bound, config.h_dim), dtype=DTYPE)
    return XNodeParams(theta1, theta2, readout)


def save_xnode(params: XNodeParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()))


# -- time partitions ----------------------------------------------------------

def check_partition(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("time partition must be a non-empty 1-d sequence")
    if np.any(np.diff(times) <= 0):
        raise ValueError("time partition must be strictly increasing")
    return times


# -- generic RK4 (floats, tape Vars, lists of either, tensors) ------------------

def _combine(y, terms):
    """y + sum(c * k) for scalar coefficients c; lists are handled elementwise."""
    if isinstance(y, (list, tuple)):
        return [_combine(yi, [(c, k[i]) for c, k in terms]) for i, yi in enumerate(y)]
    out = y
    for c, k in terms:
        out = out + c * k
    return out


def _finite(y) -> bool:
    if isinstance(y, (list, tuple)):
        return all(_finite(v) for v in y)
    if isinstance(y, ad.Var):
        return math.isfinite(y.value)
    if isinstance(y, torch.Tensor):
        return bool(torch.isfinite(y).all())
    return bool(np.all(np.isfinite(y)))


def rk4_integrate(vecfield: Callable, h0, times: Sequence[float], substeps: int = 1, x=None) -> list:
    """Classical RK4 through ``times`` with ``substeps`` equal steps per interval.

    ``vecfield(h, t, x)`` returns the derivative of the state. Returns the
    state at every element of ``times`` (the first is ``h0``).
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    times = check_partition(times)
    states = [h0]
    y = h0
    step = 0
    for t0, t1 in zip(times[:-1], times[1:]):
        dt = (t1 - t0) / substeps
        for j in range(substeps):
            t = t0 + j * dt
            k1 = vecfield(y, t, x)
            k2 = vecfield(_combine(y, [(dt / 2, k1)]), t + dt / 2, x)
            k3 = vecfield(_combine(y, [(dt / 2, k2)]), t + dt / 2, x)
            k4 = vecfield(_combine(y, [(dt, k3)]), t + dt, x)
            y = _combine(y, [(dt / 6, k1), (dt / 3, k2), (dt / 3, k3), (dt / 6, k4)])
            step += 1
            if not _finite(y):
                raise DivergenceError(step)
        states.append(y)
    return states


# -- scalar tape reference ----------------------------------------------------

@dataclass
class TapeXNode:
    """XNODE parameters registered as leaves on one tape."""

    params: XNodeParams
    tape: ad.AdTape
    flat: Optional[Sequence[ad.Var]] = None   # existing leaves in XNodeParams.flat() order
    init_leaves: list = field(init=False)
    vec_leaves: list = field(init=False)
    readout_leaves: list = field(init=False)

    def __post_init__(self):
        p = self.params
        if self.flat is None:
            self.init_leaves = params_to_leaves(p.theta1, self.tape)
            self.vec_leaves = params_to_leaves(p.theta2, self.tape)
            self.readout_leaves = [self.tape.leaf(float(v)) for v in p.theta_tilde.tolist()]
            return
        n1, n2 = p.theta1.config.n_params, p.theta2.config.n_params
        if len(self.flat) != n1 + n2 + p.h_dim:
            raise ValueError(f"expected {n1 + n2 + p.h_dim} leaves, got {len(self.flat)}")
        self.init_leaves = unflatten_leaves(p.theta1.config, self.flat[:n1])
        self.vec_leaves = unflatten_leaves(p.theta2.config, self.flat[n1:n1 + n2])
        self.readout_leaves = list(self.flat[n1 + n2:])

    def leaves(self) -> List[ad.Var]:
        out = []
        for W, B in self.init_leaves + self.vec_leaves:
            for row in W:
                out.extend(row)
            out.extend(B)
        return out + self.readout_leaves

    def vecfield(self, h, t, x):
        t = t if isinstance(t, ad.Var) else self.tape.const(float(t))
        return mlp_forward(self.params.theta2, self.tape, list(h) + [t] + list(x), self.vec_leaves)

    def readout(self, h):
        acc = self.readout_leaves[0] * h[0]
        for w, v in zip(self.readout_leaves[1:], h[1:]):
            acc = acc + w * v
        return acc

    def lift(self, value):
        return mlp_forward(self.params.theta1, self.tape, [value], self.init_leaves)


def xnode_forward_tape(model: TapeXNode, x, times, init_value, substeps: int = 1):
    """Outputs (Vars) at each time; ``x`` and ``init_value`` may be Vars or floats."""
    h0 = model.lift(init_value)
    states = rk4_integrate(model.vecfield, h0, times, substeps, x=list(x))
    return [model.readout(h) for h in states], states


def temporal_derivative_tape(model: TapeXNode, x, h_state, t):
    return model.readout(model.vecfield(h_state, t, list(x)))


# -- batched torch path -------------------------------------------------------

def _vec(params: XNodeParams, h, t, x, dh, dt, dx):
    inp = torch.cat([h, t[:, None], x], dim=1)
    if dh is None:
        return mlp_apply(params.theta2, inp)[0], None
    dinp = torch.cat([dh, dt[:, :, None], dx], dim=2)
    return mlp_apply(params.theta2, inp, dinp)


def _refine(times: torch.Tensor, substeps: int) -> torch.Tensor:
    if substeps == 1:
        return times
    P, L = times.shape
    frac = torch.arange(substeps, dtype=DTYPE) / substeps
    t0 = times[:, :-1, None]
    dt = (times[:, 1:] - times[:, :-1])[:, :, None]
    fine = (t0 + frac * dt).reshape(P, -1)
    return torch.cat([fine, times[:, -1:]], dim=1)


def integrate_paths(
    params: XNodeParams,
    x: torch.Tensor,
    times: torch.Tensor,
    h0: torch.Tensor,
    dh0: Optional[torch.Tensor] = None,
    dstart: Optional[torch.Tensor] = None,
    substeps: int = 1,
):
    """Integrate ``P`` paths in lockstep.

    ``times`` is ``(P, L)``; rows are non-decreasing and padded by repeating
    their last time (zero-length steps leave the state unchanged). With
    ``dh0`` of shape ``(m, P, H)``, tangents along the first ``m`` spatial
    coordinates are propagated; ``dstart`` ``(m, P)`` is the tangent of each
    path's start time (moving entry points), later times have none.

    Returns states ``(P, L, H)`` and tangents ``(m, P, L, H)`` or ``None``.
    """
    P, L = times.shape
    fine = _refine(times, substeps)
    tangents = dh0 is not None
    if tangents:
        m = dh0.shape[0]
        dx = torch.zeros(m, P, x.shape[1], dtype=DTYPE)
        dx[torch.arange(m), :, torch.arange(m)] = 1.0
        if dstart is None:
            dstart = torch.zeros(m, P, dtype=DTYPE)
    y, dy = h0, dh0
    states, dstates = [y], [dy]
    n_fine = fine.shape[1]
    for k in range(n_fine - 1):
        t = fine[:, k]
        step = fine[:, k + 1] - t
        dtt = dst = None
        if tangents:
            # only the start time carries a tangent; intermediate sub-steps
            # interpolate it linearly towards the fixed next node
            if k < substeps:
                w0 = 1.0 - k / substeps
                dtt = dstart * w0
                dst = -dstart / substeps
            else:
                dtt = torch.zeros_like(dstart)
                dst = torch.zeros_like(dstart)
        hs = step[:, None]
        k1, d1 = _vec(params, y, t, x, dy, dtt, dx if tangents else None)
        y2 = y + 0.5 * hs * k1
        d2in = None if not tangents else dy + 0.5 * (dst[:, :, None] * k1 + hs * d1)
        k2, d2 = _vec(params, y2, t + 0.5 * step, x, d2in,
                      None if not tangents else dtt + 0.5 * dst, dx if tangents else None)
        y3 = y + 0.5 * hs * k2
        d3in = None if not tangents else dy + 0.5 * (dst[:, :, None] * k2 + hs * d2)
        k3, d3 = _vec(params, y3, t + 0.5 * step, x, d3in,
                      None if not tangents else dtt + 0.5 * dst, dx if tangents else None)
        y4 = y + hs * k3
        d4in = None if not tangents else dy + dst[:, :, None] * k3 + hs * d3
        k4, d4 = _vec(params, y4, t + step, x, d4in,
                      None if not tangents else dtt + dst, dx if tangents else None)
        incr = k1 + 2.0 * k2 + 2.0 * k3 + k4
        ynew = y + hs / 6.0 * incr
        if tangents:
            dincr = d1 + 2.0 * d2 + 2.0 * d3 + d4
            dy = dy + dst[:, :, None] / 6.0 * incr + hs / 6.0 * dincr
        y = ynew
        if (k + 1) % substeps == 0:
            states.append(y)
            dstates.append(dy)
    out = torch.stack(states, dim=1)
    if not bool(torch.isfinite(out).all()):
        bad = (~torch.isfinite(out)).any(dim=2).any(dim=0).nonzero()
        raise DivergenceError(int(bad[0]) * substeps)
    dout = torch.stack(dstates, dim=2) if tangents else None
    return out, dout


def lift(params: XNodeParams, values: torch.Tensor, dvalues: Optional[torch.Tensor] = None):
    """Initial hidden state N_init(value) for ``(P,)`` values, tangents ``(m, P)``."""
    if dvalues is None:
        return mlp_apply(params.theta1, values[:, None])[0], None
    return mlp_apply(params.theta1, values[:, None], dvalues[:, :, None])


def readout(params: XNodeParams, h: torch.Tensor) -> torch.Tensor:
    return h @ params.theta_tilde


def temporal_derivative(params: XNodeParams, x: torch.Tensor, h_state: torch.Tensor, t: torch.Tensor):
    """d/dt of the output: the readout of the vector field (no time differencing)."""
    v, _ = _vec(params, h_state, t, x, None, None, None)
    return readout(params, v)


def xnode_forward(params: XNodeParams, x, times, init_value, substeps: int = 1) -> torch.Tensor:
    """Outputs at each time of one path."""
    times = torch.as_tensor(check_partition(times))[None, :]
    x = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(1, -1)
    value = torch.as_tensor(float(init_value), dtype=DTYPE).reshape(1)
    h0, _ = lift(params, value)
    states, _ = integrate_paths(params, x, times, h0, substeps=substeps)
    return readout(params, states)[0]


def pad_times(lists: Sequence[Sequence[float]]) -> torch.Tensor:
    L = max(len(ts) for ts in lists)
    out = np.empty((len(lists), L))
    for i, ts in enumerate(lists):
        out[i, :len(ts)] = ts
        out[i, len(ts):] = ts[-1]
    return torch.as_tensor(out)


def predict_grid(params: XNodeParams, points, times, h: Callable, substeps: int = 1) -> torch.Tensor:
    """Values over ``points x times`` on a time-independent domain, rows in input order."""
    points = torch.as_tensor(np.asarray(points, dtype=np.float64))
    times = check_partition(times)
    P = points.shape[0]
    grid = torch.as_tensor(np.repeat(times[None, :], P, axis=0))
    h0, _ = lift(params, h(points))
    states, _ = integrate_paths(params, points, grid, h0, substeps=substeps)
    return readout(params, states)


def predict_timevarying(
    params: XNodeParams, schedule: SubPathSchedule, h: Callable, g: Callable, substeps: int = 1
) -> List[torch.Tensor]:
    """Values at each sub-path's collocation times (one tensor per sub-path).

    Sub-paths starting at t = 0 as the first sub-path are lifted from the
    initial datum, all others from the boundary datum at their entry time.
    """
    if len(schedule) == 0:
        return []
    x = torch.as_tensor(schedule.x)[None, :].repeat(len(schedule), 1)
    starts = torch.as_tensor([ts[0] for ts in schedule.times])
    values = initial_values(schedule, x, starts, h, g)
    h0, _ = lift(params, values)
    states, _ = integrate_paths(params, x, pad_times(schedule.times), h0, substeps=substeps)
    out = readout(params, states)
    return [out[i, :len(ts)] for i, ts in enumerate(schedule.times)]


def initial_values(schedule_or_flags, x: torch.Tensor, starts: torch.Tensor, h: Callable, g: Callable):
    """Initial datum per sub-path: h(x) for a first sub-path entering at 0, else g(entry, x)."""
    if isinstance(schedule_or_flags, SubPathSchedule):
        from_h = torch.zeros(len(starts), dtype=torch.bool)
        from_h[0] = float(starts[0]) == 0.0
    else:
        from_h = torch.as_tensor(schedule_or_flags, dtype=torch.bool)
    hv = h(x)
    gv = g(starts, x)
    return torch.where(from_h, hv, gv)
