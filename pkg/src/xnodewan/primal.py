"""Primal solution models behind one interface.

``evaluate(plan, domain, problem)`` returns a :class:`UEval` on the current
collocation; ``predict(t, x, domain, problem)`` gives values at arbitrary
space-time points (no gradients).
"""
from __future__ import annotations

from typing import List

import numpy as np
import torch

from xnodewan.domain import Domain, SamplePlan, build_subpath_times
from xnodewan.nets import DTYPE, MlpParams, mlp_apply
from xnodewan.weakform import PdeProblem, UEval, value_and_grads
from xnodewan import xnode as xn

BOUNDARY_TOL = 1e-9


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def interior_points(plan: SamplePlan, domain: Domain):
    """Pi_T x S_r (point-major), restricted to D for time-varying domains."""
    n_T = plan.times.size
    t = np.tile(plan.times, plan.interior.shape[0])
    x = np.repeat(plan.interior, n_T, axis=0)
    if domain.time_varying:
        keep = domain.contains(t, x)
        t, x = t[keep], x[keep]
    return _t(t), _t(x)


class DnnPrimal:
    """Plain network on concatenated (t, x)."""

    kind = "dnn"

    def __init__(self, params: MlpParams):
        self.params = params

    def tensors(self) -> List[torch.Tensor]:
        return self.params.tensors()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "net": self.params.to_dict()}

    def evaluate(self, plan: SamplePlan, domain: Domain, problem: PdeProblem) -> UEval:
        t, x = interior_points(plan, domain)
        d = x.shape[1]
        z = torch.cat([t[:, None], x], dim=1)
        dz = torch.eye(d + 1, dtype=DTYPE)[:, None, :].expand(d + 1, z.shape[0], d + 1)
        u, du = mlp_apply(self.params, z, dz)
        du = du[:, :, 0]
        bt, bx = _t(plan.boundary_t), _t(plan.boundary_x)
        ub = mlp_apply(self.params, torch.cat([bt[:, None], bx], dim=1))[0][:, 0]
        x0 = _t(plan.initial)
        u0 = mlp_apply(self.params, torch.cat([torch.zeros(x0.shape[0], 1, dtype=DTYPE), x0], dim=1))[0][:, 0]
        return UEval(t, x, u[:, 0], du[1:].T, du[0], bt, bx, ub, x0, u0)

    def predict(self, t, x, domain: Domain = None, problem: PdeProblem = None) -> torch.Tensor:
        t, x = _t(t), _t(x)
        with torch.no_grad():
            return mlp_apply(self.params, torch.cat([t[:, None], x], dim=1))[0][:, 0]


class ExactPrimal:
    """The closed-form solution as a primal (benchmark oracle). Optional affine distortion."""

    kind = "exact"

    def __init__(self, scale: float = 1.0, shift: float = 0.0):
        self.scale = scale
        self.shift = shift

    def tensors(self):
        return []

    def _u(self, problem):
        return lambda t, x: self.scale * problem.exact_u(t, x) + self.shift

    def evaluate(self, plan, domain, problem) -> UEval:
        t, x = interior_points(plan, domain)
        u, ut, ux = value_and_grads(self._u(problem), t, x)
        bt, bx = _t(plan.boundary_t), _t(plan.boundary_x)
        x0 = _t(plan.initial)
        fn = self._u(problem)
        return UEval(t, x, u, ux, ut, bt, bx, fn(bt, bx), x0, fn(torch.zeros(x0.shape[0], dtype=DTYPE), x0))

    def predict(self, t, x, domain=None, problem=None):
        return self._u(problem)(_t(t), _t(x))


class XNodePrimal:
    """XNODE along constant spatial paths (full paths or sub-paths)."""

    kind = "xnode"

    def __init__(self, params: xn.XNodeParams, substeps: int = 1, eval_grid: int = 20):
        self.params = params
        self.substeps = substeps
        self.eval_grid = eval_grid

    def tensors(self):
        return self.params.tensors()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "substeps": self.substeps, **self.params.to_dict()}

    # -- initial data with spatial tangents --------------------------------
    def _start_values(self, problem, x, starts, from_h, dstart=None):
        """Initial datum per path and its x-tangent ``(d, P)``.

        Entries that move with x (``dstart``) contribute dg/dt * d(entry)/dx.
        """
        zero_t = torch.zeros(x.shape[0], dtype=DTYPE)
        hv, _, hx = value_and_grads(lambda t, z: problem.h(z), zero_t, x)
        if bool(from_h.all()):
            return hv, hx.T
        gv, gt, gx = value_and_grads(problem.g, starts, x)
        dg = gx.T
        if dstart is not None:
            dg = dg + gt[None, :] * dstart
        values = torch.where(from_h, hv, gv)
        tangents = torch.where(from_h[None, :], hx.T, dg)
        return values, tangents

    def evaluate(self, plan: SamplePlan, domain: Domain, problem: PdeProblem) -> UEval:
        p = self.params
        if domain.time_varying:
            return self._evaluate_timevarying(plan, domain, problem)
        X = _t(plan.interior)
        P, n_T = X.shape[0], plan.times.size
        d = X.shape[1]
        grid = _t(np.repeat(plan.times[None, :], P, axis=0))
        v, dv = self._start_values(problem, X, grid[:, 0], torch.ones(P, dtype=torch.bool))
        h0, dh0 = xn.lift(p, v, dv)
        states, dstates = xn.integrate_paths(p, X, grid, h0, dh0, substeps=self.substeps)
        u = xn.readout(p, states)                       # (P, n_T)
        du = xn.readout(p, dstates)                     # (d, P, n_T)
        t = grid.reshape(-1)
        xr = X.repeat_interleave(n_T, dim=0)
        du_dt = xn.temporal_derivative(p, xr, states.reshape(P * n_T, -1), t)
        B = _t(plan.boundary)
        bgrid = _t(np.repeat(plan.times[None, :], B.shape[0], axis=0))
        bh0, _ = xn.lift(p, problem.h(B))
        bstates, _ = xn.integrate_paths(p, B, bgrid, bh0, substeps=self.substeps)
        ub = xn.readout(p, bstates).reshape(-1)
        return UEval(
            t, xr, u.reshape(-1), du.permute(1, 2, 0).reshape(P * n_T, d), du_dt,
            _t(plan.boundary_t), _t(plan.boundary_x), ub, X, u[:, 0],
        )

    def _evaluate_timevarying(self, plan, domain, problem) -> UEval:
        p = self.params
        times = plan.times
        xs, lists, from_h, starts, dstarts, slots = [], [], [], [], [], []
        for j, x in enumerate(plan.interior):
            sched = build_subpath_times(domain, x, times)
            for i, (ts, ix) in enumerate(zip(sched.times, sched.grid_index)):
                row = len(lists)
                xs.append(x)
                lists.append(ts)
                first = i == 0 and ts[0] == 0.0
                from_h.append(first)
                starts.append(ts[0])
                dstarts.append(np.zeros(domain.d) if first else domain.entry_time_gradient(x, ts[0]))
                for col, k in enumerate(ix):
                    if k >= 0:
                        slots.append((row, col, times[k]))
        X = _t(np.asarray(xs))
        d = domain.d
        v, dv = self._start_values(problem, X, _t(starts), torch.as_tensor(from_h),
                                   _t(np.asarray(dstarts)).T)
        h0, dh0 = xn.lift(p, v, dv)
        states, dstates = xn.integrate_paths(p, X, xn.pad_times(lists), h0, dh0,
                                             dstart=_t(np.asarray(dstarts)).T, substeps=self.substeps)
        rows = torch.as_tensor([s[0] for s in slots])
        cols = torch.as_tensor([s[1] for s in slots])
        t = _t([s[2] for s in slots])
        xr = X[rows]
        hs = states[rows, cols]
        u = xn.readout(p, hs)
        du = xn.readout(p, dstates[:, rows, cols])      # (d, N)
        du_dt = xn.temporal_derivative(p, xr, hs, t)
        bt, bx = plan.boundary_t, plan.boundary_x
        ub, keep = self._values_at(bt, bx, domain, problem, times)
        x0 = _t(plan.initial)
        h00, _ = xn.lift(p, problem.h(x0))
        u0 = xn.readout(p, h00)
        return UEval(t, xr, u, du.T, du_dt, _t(bt)[keep], _t(bx)[keep], ub, x0, u0,
                     excluded=int((~keep).sum()))

    def _values_at(self, t, x, domain, problem, grid):
        """Values at arbitrary (t, x) by integrating the containing sub-path.

        ``grid`` supplies the intermediate integration nodes; ``t`` is
        inserted. Points in no sub-path are dropped (mask returned).
        """
        t = np.asarray(t, dtype=np.float64)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lists, starts, from_h, keep = [], [], [], np.zeros(t.size, dtype=bool)
        cache = {}
        for k in range(t.size):
            key = tuple(x[k])
            if key not in cache:
                cache[key] = domain.entry_exit_points(x[k])
            for i, (lo, hi) in enumerate(cache[key]):
                if lo - BOUNDARY_TOL <= t[k] <= hi + BOUNDARY_TOL:
                    tk = min(max(t[k], lo), hi)
                    inner = grid[(grid > lo) & (grid < tk)]
                    ts = [lo] + inner.tolist() + ([tk] if tk > lo else [])
                    lists.append(ts)
                    starts.append(lo)
                    from_h.append(i == 0 and lo == 0.0)
                    keep[k] = True
                    break
        if not lists:
            return torch.zeros(0, dtype=DTYPE), keep
        X = _t(x[keep])
        v, _ = self._start_values(problem, X, _t(starts), torch.as_tensor(from_h))
        h0, _ = xn.lift(self.params, v)
        states, _ = xn.integrate_paths(self.params, X, xn.pad_times(lists), h0, substeps=self.substeps)
        return xn.readout(self.params, states[:, -1]), keep

    def predict(self, t, x, domain: Domain, problem: PdeProblem) -> torch.Tensor:
        """Values at arbitrary points; NaN where a point lies in no sub-path."""
        grid = np.linspace(0.0, domain.T, self.eval_grid)
        with torch.no_grad():
            vals, keep = self._values_at(t, x, domain, problem, grid)
        out = torch.full((np.asarray(t).size,), float("nan"), dtype=DTYPE)
        out[torch.as_tensor(keep)] = vals
        return out
