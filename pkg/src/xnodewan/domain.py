"""Spatio-temporal domains: membership, sampling, boundary cutoffs, entry/exit
times of constant spatial paths and the time collocation of each sub-path.

Points are numpy arrays: times ``(N,)`` and spatial points ``(N, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

MAX_REJECTION_ATTEMPTS = 10**6
BISECTION_TOL = 1e-10


class GeometryError(RuntimeError):
    """Degenerate domain: rejection sampling could not find enough points."""


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


class Domain:
    """Base class. Subclasses fill in the geometry of one domain kind."""

    kind: str = "abstract"
    time_varying: bool = False
    d: int
    T: float

    # -- geometry contract -------------------------------------------------
    def contains(self, t, x) -> np.ndarray:
        raise NotImplementedError

    def omega_max(self) -> dict:
        raise NotImplementedError

    def entry_exit_points(self, x) -> List[Tuple[float, float]]:
        return [(0.0, self.T)] if self.contains(np.zeros(1), np.atleast_2d(x))[0] else []

    def entry_time_gradient(self, x, tau: float) -> np.ndarray:
        """d(entry time)/dx for the sub-path of ``x`` starting at ``tau``."""
        return np.zeros(self.d)

    def boundary_distance(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    # -- sampling ------------------------------------------------------------
    def sample_interior(self, rng, n) -> np.ndarray:
        """Uniform spatial points in Omega (time-independent) or Omega_max."""
        raise NotImplementedError

    def sample_boundary(self, rng, n) -> np.ndarray:
        """Uniform spatial points on the boundary of Omega (time-independent kinds)."""
        raise NotImplementedError

    def sample_initial(self, rng, n) -> np.ndarray:
        return self.sample_interior(rng, n)

    def sample_boundary_spacetime(self, rng, n) -> Tuple[np.ndarray, np.ndarray]:
        t = rng.uniform(0.0, self.T, n)
        return t, self.sample_boundary(rng, n)

    def sample_spacetime(self, rng, n) -> Tuple[np.ndarray, np.ndarray]:
        """Uniform points in D (rejection within [0, T] x Omega_max when time-varying)."""
        if not self.time_varying:
            return rng.uniform(0.0, self.T, n), self.sample_interior(rng, n)
        ts, xs, attempts = [], [], 0
        need = n
        while need > 0:
            batch = max(2 * need, 64)
            attempts += batch
            if attempts > MAX_REJECTION_ATTEMPTS:
                raise GeometryError(f"{self.kind}: rejection sampling exceeded {MAX_REJECTION_ATTEMPTS} attempts")
            t = rng.uniform(0.0, self.T, batch)
            x = self.sample_interior(rng, batch)
            keep = self.contains(t, x)
            ts.append(t[keep])
            xs.append(x[keep])
            need -= int(keep.sum())
        return np.concatenate(ts)[:n], np.concatenate(xs)[:n]

    # -- measures --------------------------------------------------------------
    @property
    def volume(self) -> float:
        """Measure of D (integral over t of |Omega(t)|)."""
        raise NotImplementedError

    @property
    def boundary_measure(self) -> float:
        """Integral over t of the surface measure of the boundary of Omega(t)."""
        raise NotImplementedError

    @property
    def initial_measure(self) -> float:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass
class HyperCube(Domain):
    d: int = 1
    T: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    kind: str = field(default="hypercube", init=False)

    def contains(self, t, x):
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def omega_max(self):
        return {"shape": "box", "lo": [self.lo] * self.d, "hi": [self.hi] * self.d}

    def boundary_distance(self, t, x):
        x = _as_tensor(x)
        width = self.hi - self.lo
        s = (x - self.lo) * (self.hi - x) * (4.0 / width**2)
        return torch.prod(s, dim=-1)

    def sample_interior(self, rng, n):
        return rng.uniform(self.lo, self.hi, (n, self.d))

    def sample_boundary(self, rng, n):
        x = rng.uniform(self.lo, self.hi, (n, self.d))
        face = rng.integers(0, 2 * self.d, n)
        axis, side = face // 2, face % 2
        x[np.arange(n), axis] = np.where(side == 0, self.lo, self.hi)
        return x

    @property
    def volume(self):
        return self.T * (self.hi - self.lo) ** self.d

    @property
    def boundary_measure(self):
        return self.T * 2 * self.d * (self.hi - self.lo) ** (self.d - 1)

    @property
    def initial_measure(self):
        return (self.hi - self.lo) ** self.d

    def describe(self):
        return {"kind": self.kind, "d": self.d, "T": self.T, "lo": self.lo, "hi": self.hi}


@dataclass
class Ball(Domain):
    center: Sequence[float] = (0.0,)
    radius: float = 1.0
    d: int = 1
    T: float = 1.0
    kind: str = field(default="ball", init=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if self.center.size == 1 and self.d > 1:
            self.center = np.full(self.d, float(self.center[0]))
        if self.center.size != self.d:
            raise ValueError("center must have d coordinates")

    def contains(self, t, x):
        x = np.atleast_2d(x)
        return np.sum((x - self.center) ** 2, axis=1) <= self.radius**2 * (1 + 1e-12)

    def omega_max(self):
        return {"shape": "ball", "center": self.center.tolist(), "radius": self.radius}

    def boundary_distance(self, t, x):
        x = _as_tensor(x)
        c = torch.as_tensor(self.center)
        return (self.radius**2 - torch.sum((x - c) ** 2, dim=-1)) / self.radius**2

    def _directions(self, rng, n):
        g = rng.standard_normal((n, self.d))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def sample_interior(self, rng, n):
        u = self._directions(rng, n)
        r = self.radius * rng.uniform(0.0, 1.0, n) ** (1.0 / self.d)
        return self.center + u * r[:, None]

    def sample_boundary(self, rng, n):
        return self.center + self.radius * self._directions(rng, n)

    @property
    def _unit_volume(self):
        return math.pi ** (self.d / 2) / math.gamma(self.d / 2 + 1)

    @property
    def volume(self):
        return self.T * self._unit_volume * self.radius**self.d

    @property
    def boundary_measure(self):
        return self.T * self.d * self._unit_volume * self.radius ** (self.d - 1)

    @property
    def initial_measure(self):
        return self._unit_volume * self.radius**self.d

    def describe(self):
        return {"kind": self.kind, "d": self.d, "T": self.T, "center": self.center.tolist(), "radius": self.radius}


@dataclass
class Hourglass1D(Domain):
    """|x - 0.5| <= 0.5 (1 - t) for t <= 0.5 and |x - 0.5| <= 0.5 t for t >= 0.5, on [0, 1]."""

    d: int = field(default=1, init=False)
    T: float = field(default=1.0, init=False)
    kind: str = field(default="hourglass1d", init=False)
    time_varying: bool = field(default=True, init=False)

    @staticmethod
    def half_width(t):
        t = np.asarray(t, dtype=np.float64)
        return 0.5 * np.maximum(t, 1.0 - t)

    def contains(self, t, x):
        x = np.atleast_2d(x)[:, 0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape)
        inside_t = (t >= 0.0) & (t <= self.T)
        return inside_t & (np.abs(x - 0.5) <= self.half_width(t) + 1e-12)

    def omega_max(self):
        return {"shape": "box", "lo": [0.0], "hi": [1.0]}

    def entry_exit_points(self, x):
        x = float(np.asarray(x).reshape(-1)[0])
        delta = abs(x - 0.5)
        if delta > 0.5:
            return []
        if delta <= 0.25:
            return [(0.0, 1.0)]
        return [(0.0, 1.0 - 2.0 * delta), (2.0 * delta, 1.0)]

    def entry_time_gradient(self, x, tau):
        x = float(np.asarray(x).reshape(-1)[0])
        if tau == 0.0:
            return np.zeros(1)
        return np.array([2.0 * math.copysign(1.0, x - 0.5)])

    def boundary_distance(self, t, x):
        t = _as_tensor(t)
        x = _as_tensor(x)[..., 0]
        w = 0.5 * torch.maximum(t, 1.0 - t)
        return (w - torch.abs(x - 0.5)) / w

    def sample_interior(self, rng, n):
        return rng.uniform(0.0, 1.0, (n, 1))

    def sample_initial(self, rng, n):
        return rng.uniform(0.0, 1.0, (n, 1))

    def sample_boundary(self, rng, n):
        raise GeometryError("hourglass boundary is time-dependent; use sample_boundary_spacetime")

    def sample_boundary_spacetime(self, rng, n):
        t = rng.uniform(0.0, self.T, n)
        side = np.where(rng.integers(0, 2, n) == 0, -1.0, 1.0)
        x = 0.5 + side * self.half_width(t)
        return t, x[:, None]

    @property
    def volume(self):
        return 0.75

    @property
    def boundary_measure(self):
        return 2.0 * self.T

    @property
    def initial_measure(self):
        return 1.0

    def describe(self):
        return {"kind": self.kind, "d": 1, "T": 1.0}


@dataclass
class GeneralTimeVarying(Domain):
    """A domain given by an indicator on (t, x) and a covering box Omega_max.

    ``indicator(t, x) -> bool array`` is vectorised. ``distance(t, x)`` is a
    torch callable vanishing on the lateral boundary and positive inside;
    ``interval_solver(x)`` may replace the bisection entry/exit search.
    Boundary points on the lateral boundary are drawn from the entry/exit
    times of uniformly drawn constant paths, which is only approximately
    uniform on the boundary surface.
    """

    indicator: Callable = None
    lo: Sequence[float] = (0.0,)
    hi: Sequence[float] = (1.0,)
    T: float = 1.0
    distance: Optional[Callable] = None
    interval_solver: Optional[Callable] = None
    scan_points: int = 2001
    kind: str = field(default="general", init=False)
    time_varying: bool = field(default=True, init=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        self.d = self.lo.size
        self._measures = None

    def contains(self, t, x):
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return np.asarray(self.indicator(t, x), dtype=bool)

    def omega_max(self):
        return {"shape": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    def _inside(self, t, x):
        return bool(self.contains(np.array([t]), np.atleast_2d(x))[0])

    def _bisect(self, x, a, b, inside_at_a):
        while b - a > BISECTION_TOL:
            m = 0.5 * (a + b)
            if self._inside(m, x) == inside_at_a:
                a = m
            else:
                b = m
        return a, b

    def entry_exit_points(self, x):
        if self.interval_solver is not None:
            return [tuple(map(float, p)) for p in self.interval_solver(x)]
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        grid = np.linspace(0.0, self.T, self.scan_points)
        inside = self.contains(grid, np.repeat(x, grid.size, axis=0))
        pairs = []
        entry = 0.0 if inside[0] else None
        for k in range(1, grid.size):
            if inside[k] == inside[k - 1]:
                continue
            a, b = self._bisect(x, grid[k - 1], grid[k], inside[k - 1])
            if inside[k]:
                entry = b
            else:
                pairs.append((entry, a))
                entry = None
        if entry is not None:
            pairs.append((entry, self.T))
        return pairs

    def entry_time_gradient(self, x, tau, h=1e-6):
        if tau == 0.0:
            return np.zeros(self.d)
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        out = np.zeros(self.d)
        for i in range(self.d):
            e = np.zeros(self.d)
            e[i] = h
            taus = []
            for s in (+1, -1):
                cand = [p[0] for p in self.entry_exit_points(x + s * e) if p[0] > 0.0]
                if not cand:
                    return np.zeros(self.d)
                taus.append(min(cand, key=lambda c: abs(c - tau)))
            out[i] = (taus[0] - taus[1]) / (2 * h)
        return out

    def boundary_distance(self, t, x):
        if self.distance is None:
            raise GeometryError("general domain needs a distance callable for the test-function cutoff")
        return self.distance(_as_tensor(t), _as_tensor(x))

    def sample_interior(self, rng, n):
        return rng.uniform(self.lo, self.hi, (n, self.d))

    def sample_initial(self, rng, n):
        xs, attempts, need = [], 0, n
        while need > 0:
            batch = max(2 * need, 64)
            attempts += batch
            if attempts > MAX_REJECTION_ATTEMPTS:
                raise GeometryError("Omega(0) is empty or degenerate")
            x = self.sample_interior(rng, batch)
            x = x[self.contains(np.zeros(batch), x)]
            xs.append(x)
            need -= len(x)
        return np.concatenate(xs)[:n]

    def sample_boundary(self, rng, n):
        raise GeometryError("general domain boundary is time-dependent; use sample_boundary_spacetime")

    def sample_boundary_spacetime(self, rng, n):
        ts, xs, attempts = [], [], 0
        while len(ts) < n:
            attempts += 1
            if attempts > MAX_REJECTION_ATTEMPTS:
                raise GeometryError("could not find lateral boundary points")
            x = self.sample_interior(rng, 1)[0]
            cands = []
            for lo_t, hi_t in self.entry_exit_points(x):
                if lo_t > 0.0:
                    cands.append(lo_t)
                if hi_t < self.T:
                    cands.append(hi_t)
            if cands:
                ts.append(cands[rng.integers(0, len(cands))])
                xs.append(x)
        return np.asarray(ts), np.asarray(xs)

    def _estimate_measures(self):
        if self._measures is None:
            rng = np.random.default_rng(12345)
            n = 200_000
            t = rng.uniform(0.0, self.T, n)
            x = self.sample_interior(rng, n)
            box = float(np.prod(self.hi - self.lo))
            frac = self.contains(t, x).mean()
            frac0 = self.contains(np.zeros(n), x).mean()
            self._measures = (self.T * box * frac, box * frac0)
        return self._measures

    @property
    def volume(self):
        return self._estimate_measures()[0]

    @property
    def boundary_measure(self):
        # the lateral surface of a general indicator domain is not computable
        # from membership alone; diagnostics fall back to unit measure
        return 1.0

    @property
    def initial_measure(self):
        return self._estimate_measures()[1]

    def describe(self):
        return {"kind": self.kind, "d": self.d, "T": self.T, "lo": self.lo.tolist(), "hi": self.hi.tolist()}


# -- plan and schedules ---------------------------------------------------------

@dataclass
class SamplePlan:
    times: np.ndarray            # Pi_T, (n_T,)
    interior: np.ndarray         # S_r, (N_r, d)
    boundary: np.ndarray         # S_b, (N_b, d); empty for time-varying domains
    boundary_t: np.ndarray       # lateral boundary points in space-time
    boundary_x: np.ndarray
    initial: np.ndarray          # points in Omega(0)


@dataclass
class SubPathSchedule:
    x: np.ndarray
    intervals: List[Tuple[float, float]]
    times: List[np.ndarray]
    # index into Pi_T of each element of ``times[i]``; -1 for inserted anchors
    grid_index: List[np.ndarray]

    def __len__(self):
        return len(self.intervals)


def sample_times(rng, n_T: int, T: float) -> np.ndarray:
    if n_T < 1:
        raise ValueError("n_T must be >= 1")
    if n_T == 1:
        return np.array([0.0])
    inner = np.sort(rng.uniform(0.0, T, n_T - 2))
    return np.concatenate([[0.0], inner, [T]])


def sample_plan(domain: Domain, n_T: int, N_r: int, N_b: int, seed) -> SamplePlan:
    """Random collocation for one outer iteration; deterministic given ``seed``."""
    if min(n_T, N_r, N_b) < 1:
        raise ValueError("all counts must be >= 1")
    rng = _as_rng(seed)
    times = sample_times(rng, n_T, domain.T)
    interior = domain.sample_interior(rng, N_r)
    if domain.time_varying:
        boundary = np.zeros((0, domain.d))
        bt, bx = domain.sample_boundary_spacetime(rng, N_b * n_T)
        initial = domain.sample_initial(rng, N_r)
    else:
        boundary = domain.sample_boundary(rng, N_b)
        bt = np.repeat(times[None, :], N_b, axis=0).ravel()
        bx = np.repeat(boundary, n_T, axis=0)
        initial = interior
    return SamplePlan(times, interior, boundary, bt, bx, initial)


def entry_exit_points(domain: Domain, x) -> List[Tuple[float, float]]:
    return domain.entry_exit_points(x)


def build_subpath_times(domain: Domain, x, times, intervals=None) -> SubPathSchedule:
    """Assign the partition ``times`` to the constant sub-paths of ``x``.

    Each list starts at the entry time, takes the partition times in
    (entry, exit], and ends with the exit time when the path leaves the
    domain strictly before the horizon.
    """
    times = np.asarray(times, dtype=np.float64)
    if intervals is None:
        intervals = domain.entry_exit_points(x)
    lists, index = [], []
    for lo_t, hi_t in intervals:
        sel = np.nonzero((times > lo_t) & (times <= hi_t))[0]
        first = np.nonzero(times == lo_t)[0]
        ts = [lo_t] + times[sel].tolist()
        ix = [int(first[0]) if first.size else -1] + sel.tolist()
        if hi_t < domain.T and not np.any(times == hi_t) and hi_t > lo_t:
            ts.append(hi_t)
            ix.append(-1)
        lists.append(np.asarray(ts))
        index.append(np.asarray(ix, dtype=np.int64))
    return SubPathSchedule(np.asarray(x, dtype=np.float64).reshape(-1), list(intervals), lists, index)


def boundary_distance(domain: Domain, t, x) -> torch.Tensor:
    return domain.boundary_distance(_as_tensor(t), _as_tensor(x))


def omega_max(domain: Domain) -> dict:
    return domain.omega_max()


def boundary_distance_with_grad(domain: Domain, t, x):
    """Cutoff value ``(N,)`` and its spatial gradient ``(N, d)``."""
    t = _as_tensor(t).detach()
    x = _as_tensor(x).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        s = domain.boundary_distance(t, x)
        (g,) = torch.autograd.grad(s.sum(), x)
    return s.detach(), g
