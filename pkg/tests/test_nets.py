import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from xnodewan import autodiff as ad
from xnodewan.nets import (
    MlpConfig,
    MlpParams,
    ShapeError,
    init_params,
    lipschitz_bound,
    load_params,
    mlp_apply,
    mlp_forward,
    save_params,
    unflatten_leaves,
)


def test_param_count():
    assert MlpConfig(2, (3,), 1).n_params == 13
    assert init_params(MlpConfig(2, (3,), 1), 0).flat().size == 13
    assert MlpConfig(4, (), 3).n_params == 4 * 3 + 3


def test_init_deterministic_and_xavier():
    cfg = MlpConfig(3, (5, 7), 2)
    a, b = init_params(cfg, 11), init_params(cfg, 11)
    assert a.flat().tobytes() == b.flat().tobytes()
    for w, bias, (fi, fo) in zip(a.weights, a.biases, cfg.layer_sizes):
        assert float(w.abs().max()) <= math.sqrt(6.0 / (fi + fo))
        assert float(bias.abs().max()) == 0.0


def test_bad_widths_rejected():
    with pytest.raises(ValueError):
        MlpConfig(0, (3,), 1)
    with pytest.raises(ValueError):
        MlpConfig(2, (3,), 1, activation="sigmoid")


def test_zero_params_give_zero():
    cfg = MlpConfig(2, (4, 4), 1)
    params = MlpParams.from_flat(cfg, np.zeros(cfg.n_params))
    tape = ad.AdTape()
    assert mlp_forward(params, tape, [0.3, -2.0])[0].value == 0.0


def test_identity_linear_layer():
    cfg = MlpConfig(3, (), 3)
    params = MlpParams.from_flat(cfg, np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
    tape = ad.AdTape()
    out = mlp_forward(params, tape, [1.5, -2.0, 0.25])
    assert [v.value for v in out] == [1.5, -2.0, 0.25]


def test_tanh_oracle():
    params = MlpParams.from_flat(MlpConfig(1, (1,), 1), [1.0, 0.0, 2.0, 0.0])
    tape = ad.AdTape()
    out = mlp_forward(params, tape, [1.0])[0].value
    assert abs(out - 1.5231883119115298) < 1e-15


def test_shape_errors():
    params = init_params(MlpConfig(2, (3,), 1), 0)
    with pytest.raises(ShapeError):
        mlp_forward(params, ad.AdTape(), [1.0])
    with pytest.raises(ShapeError):
        mlp_apply(params, torch.zeros(4, 3, dtype=torch.float64))
    with pytest.raises(ShapeError):
        MlpParams.from_flat(params.config, np.zeros(5))


def _random_config(rng, max_width=8, max_depth=4):
    depth = int(rng.integers(0, max_depth + 1))
    widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=depth))
    return MlpConfig(int(rng.integers(1, 4)), widths, 1, "tanh")


def test_parameter_gradient_grad_check():
    rng = np.random.default_rng(7)
    for _ in range(10):
        cfg = _random_config(rng)
        params = init_params(cfg, rng)
        x = rng.uniform(-1, 1, cfg.input_dim)

        def f(tape, ws):
            return mlp_forward(params, tape, list(x), unflatten_leaves(cfg, ws))[0]

        assert ad.grad_check(f, params.flat()) < 1e-6


def test_relu_grad_check_away_from_kinks():
    rng = np.random.default_rng(5)
    cfg = MlpConfig(2, (6, 6), 1, "relu")
    params = init_params(cfg, rng)
    x = [0.4, -0.7]
    # pre-activations must stay >= 10*step away from 0
    tape = ad.AdTape()
    leaves = unflatten_leaves(cfg, [tape.leaf(v) for v in params.flat()])
    a = x
    for k, (W, B) in enumerate(leaves[:-1]):
        z = [sum(w.value * v for w, v in zip(row, a)) + b.value for row, b in zip(W, B)]
        assert min(abs(v) for v in z) > 1e-4
        a = [max(v, 0.0) for v in z]

    def f(tape, ws):
        return mlp_forward(params, tape, x, unflatten_leaves(cfg, ws))[0]

    assert ad.grad_check(f, params.flat()) < 1e-6


def test_batched_matches_tape_values_and_tangents():
    rng = np.random.default_rng(1)
    cfg = MlpConfig(3, (5, 4), 2)
    params = init_params(cfg, rng)
    X = rng.uniform(-1, 1, size=(6, 3))
    dX = torch.eye(3, dtype=torch.float64)[:, None, :].expand(3, 6, 3)
    y, dy = mlp_apply(params, torch.as_tensor(X), dX)
    for b in range(6):
        for i in range(3):
            tape = ad.AdTape(tangent_mode=True)
            xs = [tape.leaf(v, seed=1.0 if j == i else 0.0) for j, v in enumerate(X[b])]
            out = mlp_forward(params, tape, xs)
            for o in range(2):
                assert abs(out[o].value - float(y[b, o])) < 1e-14
                assert abs(tape.tangent(out[o]).value - float(dy[i, b, o])) < 1e-13


def test_batched_mixed_derivative_matches_tape():
    # d/dtheta of du/dx: torch reverse through manual tangents vs forward-over-reverse on the tape
    rng = np.random.default_rng(2)
    cfg = MlpConfig(2, (3,), 1)
    params = init_params(cfg, rng)
    x = [0.3, -0.6]
    direction = 1
    ref = ad.forward_tangent_then_backward(
        lambda tape, xs, ws: mlp_forward(params, tape, xs, unflatten_leaves(cfg, ws))[0],
        x, params.flat(), direction,
    )
    params.requires_grad_(True)
    dx = torch.zeros(1, 1, 2, dtype=torch.float64)
    dx[0, 0, direction] = 1.0
    _, dy = mlp_apply(params, torch.tensor([x], dtype=torch.float64), dx)
    grads = torch.autograd.grad(dy.sum(), params.tensors(), materialize_grads=True)
    flat = np.concatenate([g.numpy().ravel() for g in grads])
    np.testing.assert_allclose(flat, ref, atol=1e-13)


def test_save_load_roundtrip(tmp_path):
    params = init_params(MlpConfig(2, (3, 3), 1), 4)
    save_params(params, tmp_path / "p.json")
    again = load_params(tmp_path / "p.json")
    assert again.config == params.config
    assert again.flat().tobytes() == params.flat().tobytes()


def test_flat_order_layer_major_row_major():
    cfg = MlpConfig(2, (2,), 1)
    params = MlpParams.from_flat(cfg, np.arange(cfg.n_params, dtype=float))
    assert params.weights[0].tolist() == [[0.0, 1.0], [2.0, 3.0]]
    assert params.biases[0].tolist() == [4.0, 5.0]
    assert params.weights[1].tolist() == [[6.0, 7.0]]
    assert params.biases[1].tolist() == [8.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_lipschitz_bound_holds(seed):
    rng = np.random.default_rng(seed)
    cfg = MlpConfig(3, (6, 6), 2)
    params = init_params(cfg, rng)
    L = lipschitz_bound(params)
    x, y = rng.uniform(-2, 2, size=(2, 1, 3))
    fx = mlp_apply(params, torch.as_tensor(x))[0]
    fy = mlp_apply(params, torch.as_tensor(y))[0]
    assert float((fx - fy).abs().max()) <= L * float(np.abs(x - y).max()) + 1e-12
