"""Parabolic problems, the weak residual and the WAN loss terms.

Problem callables take torch tensors: ``t`` of shape ``(N,)`` and ``x`` of
shape ``(N, d)``; they return ``(N,)`` (``a`` returns ``(N, d, d)``, ``b``
returns ``(N, d)``). ``a=None`` means the identity and ``b=None`` means no
drift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from xnodewan.domain import Ball, Domain, HyperCube, Hourglass1D, boundary_distance_with_grad
from xnodewan.nets import DTYPE, MlpParams, mlp_apply

LOSS_FLOOR = 1e-12
MANUFACTURE_TOL = 1e-6


class ManufactureError(ValueError):
    """The assembled problem does not reproduce its exact solution."""


class ConfigurationError(ValueError):
    pass


def reaction_u2(u, t, x):
    return -u * u


@dataclass
class PdeProblem:
    d: int
    f: Callable
    g: Callable
    h: Callable
    c: Callable = reaction_u2
    a: Optional[Callable] = None
    b: Optional[Callable] = None
    exact_u: Optional[Callable] = None
    name: str = "custom"

    def check_ellipticity(self, domain: Domain, n: int = 1000, seed: int = 0) -> float:
        """Smallest eigenvalue of the symmetric part of ``a`` over sampled points."""
        if self.a is None:
            return 1.0
        rng = np.random.default_rng(seed)
        t, x = domain.sample_spacetime(rng, n)
        A = self.a(torch.as_tensor(t), torch.as_tensor(x))
        sym = 0.5 * (A + A.transpose(1, 2))
        return float(torch.linalg.eigvalsh(sym).min())


@dataclass
class LossBreakdown:
    l_int: torch.Tensor
    l_bdry: torch.Tensor
    l_init: torch.Tensor
    total: torch.Tensor
    residual: torch.Tensor
    phi_norm_sq: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_int", "l_bdry", "l_init", "total", "residual", "phi_norm_sq")}


# -- derivatives of closed-form functions ------------------------------------

def value_and_grads(fn: Callable, t: torch.Tensor, x: torch.Tensor, create_graph: bool = False):
    """``fn(t, x)`` with its partial derivatives in t ``(N,)`` and x ``(N, d)``.

    ``fn`` must be pointwise (output i depends only on input i).
    """
    t = t.detach().clone().requires_grad_(True)
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        v = fn(t, x)
        gt, gx = torch.autograd.grad(v.sum(), (t, x), create_graph=create_graph, allow_unused=True)
    gt = torch.zeros_like(t) if gt is None else gt
    gx = torch.zeros_like(x) if gx is None else gx
    if not create_graph:
        return v.detach(), gt.detach(), gx.detach()
    return v, gt, gx


def _pde_operator_autograd(u_fn, a, b, c, t, x):
    """du/dt - div(a grad u) + b . grad u + c(u) by exact autograd."""
    t = t.detach().clone().requires_grad_(True)
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        u = u_fn(t, x)
        ut, ux = torch.autograd.grad(u.sum(), (t, x), create_graph=True, materialize_grads=True)
        flux = ux if a is None else torch.einsum("nij,nj->ni", a(t, x), ux)
        div = torch.zeros_like(u)
        for i in range(x.shape[1]):
            if not flux.requires_grad:
                break
            (gi,) = torch.autograd.grad(flux[:, i].sum(), x, create_graph=True, materialize_grads=True)
            div = div + gi[:, i]
        out = ut - div + c(u, t, x)
        if b is not None:
            out = out + (b(t, x) * ux).sum(dim=1)
    return out.detach()


def _pde_operator_fd(u_fn, a, b, c, t, x, step=1e-3):
    """Same operator from Richardson-extrapolated central differences."""

    def central(fn, z, i, h):
        e = torch.zeros_like(z)
        e[:, i] = h
        return (fn(z + e) - fn(z - e)) / (2 * h)

    def operator(h):
        d = x.shape[1]
        ut = (u_fn(t + h, x) - u_fn(t - h, x)) / (2 * h)
        ux = torch.stack([central(lambda z: u_fn(t, z), x, j, h) for j in range(d)], dim=1)
        if a is None:
            u0 = u_fn(t, x)
            div = torch.zeros_like(u0)
            for i in range(d):
                e = torch.zeros_like(x)
                e[:, i] = h
                div = div + (u_fn(t, x + e) - 2 * u0 + u_fn(t, x - e)) / h**2
        else:
            def flux_i(z, i):
                grads = torch.stack([central(lambda w: u_fn(t, w), z, j, h) for j in range(d)], dim=1)
                return torch.einsum("nj,nj->n", a(t, z)[:, i, :], grads)
            div = sum(central(lambda z, i=i: flux_i(z, i), x, i, h) for i in range(d))
        out = ut - div + c(u_fn(t, x), t, x)
        if b is not None:
            out = out + (b(t, x) * ux).sum(dim=1)
        return out

    return (4.0 * operator(step / 2) - operator(step)) / 3.0


def manufacture(exact_u: Callable, domain: Domain, c: Callable = reaction_u2, a=None, b=None,
                name: str = "manufactured", n_check: int = 1000, seed: int = 0) -> PdeProblem:
    """Forcing and boundary/initial data that make ``exact_u`` the solution.

    The forcing uses exact autograd derivatives; the residual is then
    re-checked at ``n_check`` random interior points with finite differences.
    """

    def f(t, x):
        return _pde_operator_autograd(exact_u, a, b, c, t, x)

    def g(t, x):
        return exact_u(t, x)

    def h(x):
        return exact_u(torch.zeros(x.shape[0], dtype=DTYPE), x)

    problem = PdeProblem(domain.d, f, g, h, c, a, b, exact_u, name)
    if n_check:
        worst, point = manufacture_residual(problem, domain, n_check, seed)
        if worst > MANUFACTURE_TOL:
            raise ManufactureError(f"{name}: residual {worst:.3e} at (t, x) = {point}")
    return problem


def manufacture_residual(problem: PdeProblem, domain: Domain, n: int = 1000, seed: int = 0):
    """Max |PDE residual| of the exact solution, derivatives by finite differences."""
    rng = np.random.default_rng(seed)
    t, x = domain.sample_spacetime(rng, n)
    # keep the FD stencil inside [0, T]
    t = np.clip(t, 1e-3, domain.T - 1e-3)
    tt, xx = torch.as_tensor(t), torch.as_tensor(x)
    lhs = _pde_operator_fd(problem.exact_u, problem.a, problem.b, problem.c, tt, xx)
    res = (lhs - problem.f(tt, xx)).abs()
    k = int(torch.argmax(res))
    return float(res[k]), (float(t[k]), x[k].tolist())


# -- benchmark presets -------------------------------------------------------

def _u_example1(t, x):
    return 2.0 * torch.sin(0.5 * math.pi * x[:, 0]) * torch.cos(0.5 * math.pi * x[:, 1]) * torch.exp(-t)


def _u_example3(t, x):
    d = x.shape[1]
    i = torch.arange(1, d + 1, dtype=DTYPE)
    prod = torch.prod(torch.sin(0.5 * math.pi * x + 0.5 * math.pi * i), dim=1)
    return (0.5 * math.pi) ** d * 2.0 * torch.exp(-t) * prod


def _u_example4(t, x):
    return 2.0 * torch.sin(0.5 * math.pi * x[:, 0]) * torch.exp(-t)


def example1_forcing(t, x):
    """Closed-form forcing of the hypercube example, for cross-checking."""
    s = torch.sin(0.5 * math.pi * x[:, 0])
    c = torch.cos(0.5 * math.pi * x[:, 1])
    return (math.pi**2 - 2) * s * c * torch.exp(-t) - 4 * s**2 * c**2 * torch.exp(-2 * t)


PRESETS = {
    "example1": "hypercube [0,1]^d, u = 2 sin(pi x1/2) cos(pi x2/2) exp(-t), d >= 2",
    "example2": "ball B(0.5, 0.5) in R^d, same solution as example1, d >= 2 (default 5)",
    "example3": "hypercube [0,1]^d scalability family, u = (pi/2)^d 2 exp(-t) prod sin(pi x_i/2 + pi i/2)",
    "example4": "1-d hourglass time-varying domain, u = 2 sin(pi x/2) exp(-t)",
}


def preset(name: str, d: Optional[int] = None, check: bool = True):
    """``(problem, domain)`` for a named benchmark."""
    n_check = 1000 if check else 0
    if name == "example1":
        d = 5 if d is None else d
        if d < 2:
            raise ConfigurationError("example1 needs d >= 2")
        domain = HyperCube(d=d)
        return manufacture(_u_example1, domain, name=name, n_check=n_check), domain
    if name == "example2":
        d = 5 if d is None else d
        if d < 2:
            raise ConfigurationError("example2 needs d >= 2")
        domain = Ball(center=[0.5] * d, radius=0.5, d=d)
        return manufacture(_u_example1, domain, name=name, n_check=n_check), domain
    if name == "example3":
        d = 4 if d is None else d
        domain = HyperCube(d=d)
        return manufacture(_u_example3, domain, name=name, n_check=n_check), domain
    if name == "example4":
        if d not in (None, 1):
            raise ConfigurationError("example4 is one-dimensional")
        domain = Hourglass1D()
        return manufacture(_u_example4, domain, name=name, n_check=n_check), domain
    raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


def solution_norm(problem: PdeProblem, domain: Domain, n: int = 200_000, seed: int = 0) -> float:
    """Monte Carlo L2 norm of the exact solution over D."""
    rng = np.random.default_rng(seed)
    t, x = domain.sample_spacetime(rng, n)
    u = problem.exact_u(torch.as_tensor(t), torch.as_tensor(x))
    return math.sqrt(float((u**2).mean()) * domain.volume)


# -- test function and estimators ---------------------------------------------

def phi_apply(phi_params: MlpParams, domain: Domain, t: torch.Tensor, x: torch.Tensor, tangents: bool = True):
    """Cutoff times network at interior points; returns ``(phi, dphi_dx)``.

    The cutoff vanishes on the spatial boundary, so phi(t, .) is zero there.
    """
    s, sx = boundary_distance_with_grad(domain, t, x)
    z = torch.cat([t[:, None], x], dim=1)
    if not tangents:
        net, _ = mlp_apply(phi_params, z)
        return s * net[:, 0], None
    d = x.shape[1]
    dz = torch.zeros(d, z.shape[0], d + 1, dtype=DTYPE)
    dz[torch.arange(d), :, torch.arange(d) + 1] = 1.0
    net, dnet = mlp_apply(phi_params, z, dz)
    net = net[:, 0]
    dnet = dnet[:, :, 0].T
    return s * net, sx * net[:, None] + s[:, None] * dnet


def test_function(phi_params: MlpParams, domain: Domain, t, x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(t, dtype=np.float64)).reshape(-1)
    x = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(t.shape[0], -1)
    return phi_apply(phi_params, domain, t, x, tangents=False)[0]


@dataclass
class UEval:
    """Primal values and derivatives at the interior points, plus boundary and initial values."""

    t: torch.Tensor
    x: torch.Tensor
    u: torch.Tensor
    du_dx: torch.Tensor
    du_dt: torch.Tensor
    bt: torch.Tensor
    bx: torch.Tensor
    ub: torch.Tensor
    x0: torch.Tensor
    u0: torch.Tensor
    excluded: int = 0


def weak_residual(u: UEval, phi: torch.Tensor, dphi_dx: torch.Tensor, problem: PdeProblem, volume: float):
    """Monte Carlo estimate of B(u, phi) - f(phi)."""
    n = u.u.shape[0]
    if phi.shape[0] != n or dphi_dx.shape[0] != n:
        raise ValueError(f"point count mismatch: primal {n}, test function {phi.shape[0]}")
    t, x = u.t, u.x
    if problem.a is None:
        diffusion = (u.du_dx * dphi_dx).sum(dim=1)
    else:
        diffusion = torch.einsum("nij,nj,ni->n", problem.a(t, x), u.du_dx, dphi_dx)
    integrand = u.du_dt * phi + diffusion + (problem.c(u.u, t, x) - problem.f(t, x)) * phi
    if problem.b is not None:
        integrand = integrand + (problem.b(t, x) * u.du_dx).sum(dim=1) * phi
    return volume * integrand.mean(), integrand


def loss_int(residual: torch.Tensor, phi_norm_sq: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(residual**2, min=LOSS_FLOOR) / torch.clamp(phi_norm_sq, min=LOSS_FLOOR))


def _mse_measure(values, targets, measure):
    if values.numel() == 0:
        raise ConfigurationError("empty point set in a boundary/initial loss")
    return measure * ((values - targets) ** 2).mean()


def loss_init(u0_values, h_values, measure: float = 1.0):
    return _mse_measure(u0_values, h_values, measure)


def loss_bdry(ub_values, g_values, measure: float = 1.0):
    return _mse_measure(ub_values, g_values, measure)


def assemble(u: UEval, phi_params: MlpParams, problem: PdeProblem, domain: Domain, alpha: float, gamma: float):
    phi, dphi = phi_apply(phi_params, domain, u.t, u.x)
    residual, _ = weak_residual(u, phi, dphi, problem, domain.volume)
    phi_norm_sq = domain.volume * (phi**2).mean()
    li = loss_int(residual, phi_norm_sq)
    lb = loss_bdry(u.ub, problem.g(u.bt, u.bx), domain.boundary_measure)
    l0 = loss_init(u.u0, problem.h(u.x0), domain.initial_measure)
    total = li + alpha * lb + gamma * l0
    return LossBreakdown(li, lb, l0, total, residual, phi_norm_sq)


def total_loss(problem: PdeProblem, domain: Domain, primal, phi_params: MlpParams, plan, alpha: float, gamma: float):
    """All three estimators on one graph; one backward pass gives every gradient."""
    u = primal.evaluate(plan, domain, problem)
    return assemble(u, phi_params, problem, domain, alpha, gamma)
