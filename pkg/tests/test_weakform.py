import math

import numpy as np
import pytest
import torch

from xnodewan.domain import Ball, HyperCube, Hourglass1D, sample_plan
from xnodewan.nets import MlpConfig, MlpParams, init_params, mlp_apply
from xnodewan.primal import DnnPrimal, ExactPrimal, XNodePrimal
from xnodewan.trainer import AdamState, adam_step
from xnodewan import xnode as xn
from xnodewan.weakform import (
    ConfigurationError,
    LOSS_FLOOR,
    ManufactureError,
    PdeProblem,
    UEval,
    example1_forcing,
    loss_bdry,
    loss_init,
    loss_int,
    manufacture,
    manufacture_residual,
    phi_apply,
    preset,
    solution_norm,
    test_function as make_test_function,
    total_loss,
    value_and_grads,
    weak_residual,
)

T64 = torch.float64


def constant_net(d, value):
    cfg = MlpConfig(d + 1, (3,), 1)
    flat = np.zeros(cfg.n_params)
    flat[-1] = value
    return MlpParams.from_flat(cfg, flat)


# -- test function --------------------------------------------------------------------

def test_test_function_zero_on_boundary():
    rng = np.random.default_rng(0)
    phi = init_params(MlpConfig(3, (8, 8), 1), 1)
    cube = HyperCube(d=2)
    b = cube.sample_boundary(rng, 1000)
    vals = make_test_function(phi, cube, rng.uniform(size=1000), b)
    assert float(vals.abs().max()) < 1e-14
    hg = Hourglass1D()
    t, x = hg.sample_boundary_spacetime(rng, 1000)
    vals = make_test_function(init_params(MlpConfig(2, (8,), 1), 2), hg, t, x)
    assert float(vals.abs().max()) < 1e-14


def test_test_function_zero_params():
    cfg = MlpConfig(3, (4,), 1)
    phi = MlpParams.from_flat(cfg, np.zeros(cfg.n_params))
    vals = make_test_function(phi, HyperCube(d=2), np.random.rand(20), np.random.rand(20, 2))
    assert torch.all(vals == 0)


def test_test_function_cube_midpoint():
    # cutoff 4 x (1 - x): x (1 - x) = 0.25 at the midpoint, normalisation 4
    vals = make_test_function(constant_net(1, 1.0), HyperCube(d=1), [0.0, 0.7], [[0.5], [0.5]])
    np.testing.assert_allclose(vals.numpy(), [1.0, 1.0], atol=1e-15)


def test_phi_gradient_matches_autograd():
    rng = np.random.default_rng(3)
    phi = init_params(MlpConfig(3, (6, 6), 1), rng)
    ball = Ball(center=[0.5, 0.5], radius=0.5, d=2)
    t = torch.as_tensor(rng.uniform(size=7))
    x = torch.as_tensor(ball.sample_interior(rng, 7))
    val, grad = phi_apply(phi, ball, t, x)

    def direct(tt, xx):
        net = mlp_apply(phi, torch.cat([tt[:, None], xx], 1))[0][:, 0]
        return ball.boundary_distance(tt, xx) * net

    ref_v, _, ref_g = value_and_grads(direct, t, x)
    np.testing.assert_allclose(val.detach().numpy(), ref_v.numpy(), atol=1e-15)
    np.testing.assert_allclose(grad.detach().numpy(), ref_g.numpy(), atol=1e-13)


# -- weak residual ---------------------------------------------------------------------

def _ueval(t, x, u, ux, ut):
    empty = torch.zeros(0, dtype=T64)
    return UEval(t, x, u, ux, ut, empty, torch.zeros(0, x.shape[1], dtype=T64), empty,
                 torch.zeros(0, x.shape[1], dtype=T64), empty)


def test_residual_constant_u_vanishes():
    n = 50
    t, x = torch.rand(n, dtype=T64), torch.rand(n, 2, dtype=T64)
    problem = PdeProblem(2, f=lambda t, x: torch.zeros_like(t), g=None, h=None, c=lambda u, t, x: 0 * u)
    u = _ueval(t, x, torch.full((n,), 3.0, dtype=T64), torch.zeros(n, 2, dtype=T64), torch.zeros(n, dtype=T64))
    phi, dphi = phi_apply(init_params(MlpConfig(3, (5,), 1), 0), HyperCube(d=2), t, x)
    res, _ = weak_residual(u, phi, dphi, problem, 1.0)
    assert float(res) == 0.0


def test_residual_unit_forcing_is_minus_mean_phi():
    n = 200
    cube = HyperCube(d=2)
    t, x = torch.rand(n, dtype=T64), torch.rand(n, 2, dtype=T64)
    problem = PdeProblem(2, f=lambda t, x: torch.ones_like(t), g=None, h=None, c=lambda u, t, x: 0 * u)
    u = _ueval(t, x, torch.zeros(n, dtype=T64), torch.zeros(n, 2, dtype=T64), torch.zeros(n, dtype=T64))
    phi, dphi = phi_apply(init_params(MlpConfig(3, (5,), 1), 4), cube, t, x)
    res, _ = weak_residual(u, phi, dphi, problem, cube.volume)
    assert abs(float(res) + float(phi.mean()) * cube.volume) < 1e-15


def test_residual_shape_mismatch():
    n = 5
    t, x = torch.rand(n, dtype=T64), torch.rand(n, 1, dtype=T64)
    u = _ueval(t, x, torch.zeros(n, dtype=T64), torch.zeros(n, 1, dtype=T64), torch.zeros(n, dtype=T64))
    problem = PdeProblem(1, f=lambda t, x: 0 * t, g=None, h=None)
    with pytest.raises(ValueError):
        weak_residual(u, torch.zeros(4, dtype=T64), torch.zeros(4, 1, dtype=T64), problem, 1.0)


def exact_residual_sample(problem, domain, phi, n, seed):
    plan = sample_plan(domain, 2, n, 1, seed)
    t = torch.as_tensor(np.random.default_rng(seed + 1000).uniform(0, domain.T, n))
    x = torch.as_tensor(plan.interior)
    u, ut, ux = value_and_grads(problem.exact_u, t, x)
    ue = _ueval(t, x, u, ux, ut)
    p, dp = phi_apply(phi, domain, t, x)
    res, integrand = weak_residual(ue, p, dp, problem, domain.volume)
    return float(res), domain.volume * float(integrand.std()) / math.sqrt(n)


def test_exact_solution_residual_within_mc_noise():
    problem, cube = preset("example1", 2)
    phi = init_params(MlpConfig(3, (10, 10), 1), 5)
    res, se = exact_residual_sample(problem, cube, phi, 100_000, 0)
    assert abs(res) < 4 * se


def test_mc_convergence_slope():
    problem, cube = preset("example1", 2)
    phi = init_params(MlpConfig(3, (10, 10), 1), 6)
    sizes = [100, 1000, 10_000]
    stds = []
    for n in sizes:
        vals = [exact_residual_sample(problem, cube, phi, n, s)[0] for s in range(40)]
        stds.append(np.std(vals))
    slope = np.polyfit(np.log(sizes), np.log(stds), 1)[0]
    assert abs(slope + 0.5) <= 0.15


# -- loss terms -------------------------------------------------------------------------

def test_loss_int_examples():
    assert float(loss_int(torch.tensor(2.0, dtype=T64), torch.tensor(4.0, dtype=T64))) == 0.0
    clamped = float(loss_int(torch.tensor(0.0, dtype=T64), torch.tensor(0.5, dtype=T64)))
    assert clamped == math.log(LOSS_FLOOR / 0.5)
    e_ratio = float(loss_int(torch.tensor(math.sqrt(math.e * 0.3), dtype=T64), torch.tensor(0.3, dtype=T64)))
    assert abs(e_ratio - 1.0) < 1e-15
    assert math.isfinite(float(loss_int(torch.tensor(0.0, dtype=T64), torch.tensor(0.0, dtype=T64))))


def test_loss_int_scale_invariant():
    problem, cube = preset("example1", 2, check=False)
    rng = np.random.default_rng(1)
    n = 300
    t = torch.as_tensor(rng.uniform(size=n))
    x = torch.as_tensor(rng.uniform(size=(n, 2)))
    primal = init_params(MlpConfig(3, (6,), 1), 1)
    u, ut, ux = value_and_grads(lambda tt, xx: mlp_apply(primal, torch.cat([tt[:, None], xx], 1))[0][:, 0], t, x)
    ue = _ueval(t, x, u, ux, ut)
    phi = init_params(MlpConfig(3, (6,), 1), 2)
    p, dp = phi_apply(phi, cube, t, x)
    base = None
    for lam in (1.0, -3.0, 0.01, 250.0):
        res, _ = weak_residual(ue, lam * p, lam * dp, problem, 1.0)
        val = float(loss_int(res, ((lam * p) ** 2).mean()))
        base = val if base is None else base
        assert abs(val - base) <= 1e-10 * abs(base)


def test_loss_init_bdry():
    h = torch.rand(20, dtype=T64)
    assert float(loss_init(h, h)) == 0.0
    assert abs(float(loss_bdry(h + 0.3, h, measure=4.0)) - 0.09 * 4.0) < 1e-15
    with pytest.raises(ConfigurationError):
        loss_init(torch.zeros(0, dtype=T64), torch.zeros(0, dtype=T64))
    with pytest.raises(ConfigurationError):
        loss_bdry(torch.zeros(0, dtype=T64), torch.zeros(0, dtype=T64))


def test_xnode_identity_lift_fits_initial_data():
    """N_init followed by the readout can learn the identity on the range of h."""
    problem, cube = preset("example1", 2, check=False)
    params = xn.init_xnode(xn.XNodeConfig(2, h_dim=8, vec_widths=(8,), init_widths=(16,)), 0)
    tensors = params.theta1.tensors() + [params.theta_tilde]
    state = AdamState.zeros_like(tensors)
    rng = np.random.default_rng(0)
    for step in range(1500):
        x = torch.as_tensor(rng.uniform(size=(256, 2)))
        v = problem.h(x)
        for p in tensors:
            p.requires_grad_(True)
        h0, _ = xn.lift(params, v)
        loss = ((xn.readout(params, h0) - v) ** 2).mean()
        grads = torch.autograd.grad(loss, tensors)
        for p in tensors:
            p.requires_grad_(False)
        adam_step(state, tensors, grads, 0.01 if step < 1000 else 0.002)
    x0 = torch.as_tensor(rng.uniform(size=(2000, 2)))
    h0, _ = xn.lift(params, problem.h(x0))
    assert float(loss_init(xn.readout(params, h0), problem.h(x0), cube.initial_measure)) < 1e-4


def test_total_loss_with_exact_oracle():
    problem, cube = preset("example1", 2)
    plan = sample_plan(cube, 10, 200, 100, 0)
    phi = init_params(MlpConfig(3, (8, 8), 1), 0)
    lb = total_loss(problem, cube, ExactPrimal(), phi, plan, 10.0, 10.0)
    assert float(lb.l_bdry) < 1e-6 and float(lb.l_init) < 1e-6
    # the oracle's residual is pure MC noise, far below the test function's norm
    assert float(lb.l_int) < -3.0


def test_total_loss_alpha_gamma_linearity():
    problem, cube = preset("example1", 2, check=False)
    plan = sample_plan(cube, 5, 50, 20, 1)
    phi = init_params(MlpConfig(3, (6,), 1), 1)
    primal = DnnPrimal(init_params(MlpConfig(3, (6,), 1), 2))
    zero = total_loss(problem, cube, primal, phi, plan, 0.0, 0.0)
    assert float(zero.total) == float(zero.l_int)
    one = total_loss(problem, cube, primal, phi, plan, 3.0, 0.0)
    two = total_loss(problem, cube, primal, phi, plan, 6.0, 0.0)
    assert abs(float(two.total - zero.total) - 2 * float(one.total - zero.total)) < 1e-12
    assert abs(float(one.total) - float(one.l_int + 3.0 * one.l_bdry)) < 1e-12


def torch_grad_check(make_loss, tensors, step=1e-6):
    """Max relative discrepancy between autograd and central differences over all entries."""
    for p in tensors:
        p.requires_grad_(True)
    grads = torch.autograd.grad(make_loss(), tensors, materialize_grads=True)
    for p in tensors:
        p.requires_grad_(False)
    worst = 0.0
    for p, g in zip(tensors, grads):
        flat, gflat = p.view(-1), g.reshape(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + step
            up = float(make_loss())
            flat[i] = old - step
            dn = float(make_loss())
            flat[i] = old
            fd = (up - dn) / (2 * step)
            worst = max(worst, abs(float(gflat[i]) - fd) / max(1.0, abs(float(gflat[i]))))
    return worst


@pytest.mark.parametrize("kind", ["dnn", "xnode"])
def test_total_loss_parameter_gradients(kind):
    problem, cube = preset("example1", 2, check=False)
    plan = sample_plan(cube, 4, 5, 3, 2)
    phi = init_params(MlpConfig(3, (3,), 1), 3)
    if kind == "dnn":
        primal = DnnPrimal(init_params(MlpConfig(3, (4,), 1), 4))
    else:
        primal = XNodePrimal(xn.init_xnode(xn.XNodeConfig(2, h_dim=2, vec_widths=(3,), init_widths=(2,)), 4))

    def make_loss():
        return total_loss(problem, cube, primal, phi, plan, 2.0, 3.0).total

    assert torch_grad_check(make_loss, primal.tensors() + phi.tensors()) < 1e-5


def test_timevarying_total_loss_gradients():
    problem, hg = preset("example4", check=False)
    plan = sample_plan(hg, 4, 5, 2, 0)
    plan.interior = np.array([[0.9], [0.5], [0.2], [0.3], [0.8]])
    phi = init_params(MlpConfig(2, (3,), 1), 3)
    primal = XNodePrimal(xn.init_xnode(xn.XNodeConfig(1, h_dim=2, vec_widths=(3,), init_widths=(2,)), 5))

    def make_loss():
        return total_loss(problem, hg, primal, phi, plan, 2.0, 3.0).total

    assert torch_grad_check(make_loss, primal.tensors() + phi.tensors()) < 1e-5


# -- manufactured solutions ---------------------------------------------------------------

def test_example1_forcing_closed_form():
    problem, cube = preset("example1", 2)
    rng = np.random.default_rng(0)
    t = torch.as_tensor(rng.uniform(size=500))
    x = torch.as_tensor(rng.uniform(size=(500, 2)))
    np.testing.assert_allclose(problem.f(t, x).numpy(), example1_forcing(t, x).numpy(), atol=1e-12)


def test_zero_solution():
    problem = manufacture(lambda t, x: 0.0 * t, HyperCube(d=2))
    t, x = torch.rand(10, dtype=T64), torch.rand(10, 2, dtype=T64)
    for v in (problem.f(t, x), problem.g(t, x), problem.h(x)):
        assert torch.all(v == 0)


def test_u_equals_t():
    problem = manufacture(lambda t, x: t + 0.0 * x[:, 0], HyperCube(d=1))
    t, x = torch.rand(10, dtype=T64), torch.rand(10, 1, dtype=T64)
    np.testing.assert_allclose(problem.f(t, x).numpy(), (1 - t**2).numpy(), atol=1e-15)


@pytest.mark.parametrize("name,d", [("example1", 2), ("example2", 3), ("example3", 2), ("example4", None)])
def test_preset_residuals(name, d):
    problem, domain = preset(name, d)
    worst, _ = manufacture_residual(problem, domain, 1000, 1)
    assert worst < 1e-6


def test_manufacture_error_reports_point():
    with pytest.raises(ManufactureError, match=r"at \(t, x\)"):
        manufacture(lambda t, x: torch.sin(400.0 * x[:, 0]) * torch.exp(-t), HyperCube(d=1))


def test_with_drift_and_matrix_diffusion():
    def a(t, x):
        A = torch.zeros(x.shape[0], 2, 2, dtype=T64)
        A[:, 0, 0] = 2.0 + x[:, 1]
        A[:, 1, 1] = 1.0
        A[:, 0, 1] = A[:, 1, 0] = 0.3
        return A

    problem = manufacture(lambda t, x: torch.sin(x[:, 0]) * torch.cos(x[:, 1]) * torch.exp(-t), HyperCube(d=2),
                          a=a, b=lambda t, x: torch.stack([x[:, 0], -t], 1), c=lambda u, t, x: u**3)
    assert problem.check_ellipticity(HyperCube(d=2)) > 0.5


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset("example9")
    with pytest.raises(ConfigurationError):
        preset("example1", 1)


def test_example3_norm_not_one_in_one_dimension():
    problem, cube = preset("example3", 1)
    # pi^2 (1 - e^-2)/4, the exact squared norm of pi e^-t cos(pi x / 2) on [0,1]^2
    exact_sq = math.pi**2 * (1 - math.exp(-2)) / 4
    assert abs(solution_norm(problem, cube, 400_000) ** 2 - exact_sq) < 0.02
    assert abs(exact_sq - 2.13) < 0.01
