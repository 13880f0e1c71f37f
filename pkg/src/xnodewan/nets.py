"""Feed-forward networks for the primal solution, the test function and the
XNODE sub-networks.

Parameters live in float64 torch tensors so the batched training path can use
torch autograd directly; the scalar tape (:mod:`xnodewan.autodiff`) reads the
same numbers through :func:`mlp_forward`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from xnodewan import autodiff as ad

DTYPE = torch.float64
ACTIVATIONS = ("tanh", "relu")


class ShapeError(ValueError):
    """Input dimension does not match the network configuration."""


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple = ()
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_sizes(self) -> List[tuple]:
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_sizes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }


@dataclass
class MlpParams:
    """Weights ``(fan_out, fan_in)`` and biases ``(fan_out,)`` per layer."""

    config: MlpConfig
    weights: List[torch.Tensor] = field(default_factory=list)
    biases: List[torch.Tensor] = field(default_factory=list)

    def tensors(self) -> List[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def requires_grad_(self, flag: bool = True) -> "MlpParams":
        for p in self.tensors():
            p.requires_grad_(flag)
        return self

    def flat(self) -> np.ndarray:
        """Layer-major, row-major weights then biases."""
        return np.concatenate([p.detach().numpy().ravel() for p in self.tensors()])

    @classmethod
    def from_flat(cls, config: MlpConfig, values: Sequence[float]) -> "MlpParams":
        values = np.asarray(values, dtype=np.float64)
        if values.size != config.n_params:
            raise ShapeError(f"expected {config.n_params} values, got {values.size}")
        weights, biases, k = [], [], 0
        for fi, fo in config.layer_sizes:
            weights.append(torch.tensor(values[k:k + fi * fo].reshape(fo, fi), dtype=DTYPE))
            k += fi * fo
            biases.append(torch.tensor(values[k:k + fo], dtype=DTYPE))
            k += fo
        return cls(config, weights, biases)

    def clone(self) -> "MlpParams":
        return MlpParams.from_flat(self.config, self.flat())

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "params": self.flat().tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpParams":
        cfg = doc["config"]
        config = MlpConfig(cfg["input_dim"], tuple(cfg["hidden_widths"]), cfg["output_dim"], cfg["activation"])
        return cls.from_flat(config, doc["params"])


def init_params(config: MlpConfig, seed) -> MlpParams:
    """Xavier-uniform weights, zero biases. ``seed`` may be an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fi, fo in config.layer_sizes:
        bound = np.sqrt(6.0 / (fi + fo))
        weights.append(torch.tensor(rng.uniform(-bound, bound, size=(fo, fi)), dtype=DTYPE))
        biases.append(torch.zeros(fo, dtype=DTYPE))
    return MlpParams(config, weights, biases)


def save_params(params: MlpParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()))


def load_params(path) -> MlpParams:
    return MlpParams.from_dict(json.loads(Path(path).read_text()))


# -- scalar tape path -------------------------------------------------------

def params_to_leaves(params: MlpParams, tape: ad.AdTape) -> List[List[ad.Var]]:
    """Register every parameter as a tape leaf, in flat order.

    Returns per layer ``[W rows..., b]`` as nested lists of Vars.
    """
    layers = []
    for w, b in zip(params.weights, params.biases):
        W = [[tape.leaf(float(v)) for v in row] for row in w.detach().tolist()]
        B = [tape.leaf(float(v)) for v in b.detach().tolist()]
        layers.append((W, B))
    return layers


def unflatten_leaves(config: MlpConfig, flat: Sequence[ad.Var]) -> List[tuple]:
    """Group Vars given in flat parameter order into the per-layer layout of :func:`params_to_leaves`."""
    if len(flat) != config.n_params:
        raise ShapeError(f"expected {config.n_params} parameter Vars, got {len(flat)}")
    layers, k = [], 0
    for fi, fo in config.layer_sizes:
        W = [list(flat[k + r * fi:k + (r + 1) * fi]) for r in range(fo)]
        k += fi * fo
        layers.append((W, list(flat[k:k + fo])))
        k += fo
    return layers


def mlp_forward(params, tape: ad.AdTape, inputs, leaves=None) -> List[ad.Var]:
    """Record the network on ``tape``.

    ``inputs`` are Vars or floats; ``leaves`` are the parameter leaves from
    :func:`params_to_leaves` (created on the fly when omitted).
    """
    config = params.config
    if len(inputs) != config.input_dim:
        raise ShapeError(f"input has length {len(inputs)}, network expects {config.input_dim}")
    if leaves is None:
        leaves = params_to_leaves(params, tape)
    act = ad.tanh if config.activation == "tanh" else ad.relu
    a = [x if isinstance(x, ad.Var) else tape.const(float(x)) for x in inputs]
    n_layers = len(leaves)
    for k, (W, B) in enumerate(leaves):
        z = []
        for row, bias in zip(W, B):
            acc = bias
            for wij, aj in zip(row, a):
                acc = acc + wij * aj
            z.append(acc)
        a = [act(v) for v in z] if k < n_layers - 1 else z
    return a


# -- batched torch path with forward tangents --------------------------------

def mlp_apply(params: MlpParams, x: torch.Tensor, dx: Optional[torch.Tensor] = None):
    """Batched forward with optional forward-mode tangents.

    ``x`` has shape ``(B, input_dim)``; ``dx`` stacks ``m`` tangent directions
    as ``(m, B, input_dim)``. Returns ``(y, dy)`` with ``dy`` of shape
    ``(m, B, output_dim)`` or ``None``. Tangent arithmetic is ordinary torch
    arithmetic, so reverse-mode through it gives parameter gradients of the
    input derivatives.
    """
    if x.shape[-1] != params.config.input_dim:
        raise ShapeError(f"input has width {x.shape[-1]}, network expects {params.config.input_dim}")
    relu = params.config.activation == "relu"
    n_layers = len(params.weights)
    a, da = x, dx
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        dz = None if da is None else da @ w.T
        if k < n_layers - 1:
            if relu:
                a = torch.relu(z)
                if dz is not None:
                    dz = dz * (z > 0).to(DTYPE)
            else:
                a = torch.tanh(z)
                if dz is not None:
                    dz = dz * (1.0 - a * a)
        else:
            a = z
        da = dz
    return a, da


def lipschitz_bound(params: MlpParams) -> float:
    """Product of max absolute row sums (infinity-norm bound, activations are 1-Lipschitz)."""
    bound = 1.0
    for w in params.weights:
        bound *= float(w.detach().abs().sum(dim=1).max())
    return bound
