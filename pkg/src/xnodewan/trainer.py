"""Alternating descent/ascent training (WAN and XNODE-WAN) and benchmark metrics."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from xnodewan.domain import Domain, sample_plan
from xnodewan.nets import MlpConfig, MlpParams, init_params
from xnodewan.primal import DnnPrimal, ExactPrimal, XNodePrimal
from xnodewan.weakform import LossBreakdown, PdeProblem, assemble, preset
from xnodewan.xnode import DivergenceError, XNodeConfig, init_xnode

log = logging.getLogger(__name__)

MAX_DIVERGENCE_RETRIES = 3


class TrainingAborted(RuntimeError):
    """Divergence persisted after the allowed learning-rate halvings."""


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: List[torch.Tensor]
    v: List[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: List[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])

    def copy(self) -> "AdamState":
        return AdamState([m.clone() for m in self.m], [v.clone() for v in self.v], self.step,
                         self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: List[torch.Tensor], grads: List[torch.Tensor], lr: float,
              ascent: bool = False) -> None:
    """In-place Adam update with bias correction. ``ascent`` flips the sign."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    sign = 1.0 if ascent else -1.0
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.add_(sign * lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


# -- configuration --------------------------------------------------------------

@dataclass
class TrainConfig:
    problem: str = "example1"
    d: int = 2
    N_r: int = 400
    N_b: int = 400
    n_T: int = 20
    K_u: int = 2
    K_phi: int = 1
    alpha: Optional[float] = None       # default 400000 d^2
    gamma: Optional[float] = None
    tau_primal: Optional[float] = None  # default 0.015 (xnode) / 0.00005 (dnn)
    tau_eta: float = 0.04
    max_epochs: int = 2000
    epsilon: float = 1e-3
    eval_every: int = 10
    eval_points: int = 2000
    final_eval_points: int = 2000
    eval_trials: int = 50
    seed: int = 0
    primal_kind: str = "xnode"
    h_dim: int = 16
    vec_widths: Tuple[int, ...] = (32, 32, 32)
    init_widths: Tuple[int, ...] = (16,)
    dnn_widths: Tuple[int, ...] = (40,) * 6
    phi_widths: Tuple[int, ...] = (40,) * 6
    activation: str = "tanh"
    substeps: int = 1
    record_wall_time: bool = True

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = 400000.0 * self.d**2
        if self.gamma is None:
            self.gamma = 400000.0 * self.d**2
        if self.tau_primal is None:
            self.tau_primal = 0.015 if self.primal_kind == "xnode" else 0.00005
        if self.primal_kind not in ("xnode", "dnn", "exact"):
            raise ValueError(f"unknown primal kind {self.primal_kind!r}")
        for name in ("vec_widths", "init_widths", "dnn_widths", "phi_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


@dataclass
class MetricsRecord:
    epoch: int
    wall_time_s: float
    l_int: float
    l_bdry: float
    l_init: float
    total: float
    rel_err: float = math.nan
    rel_err_se: float = math.nan


@dataclass
class TrainResult:
    primal: object
    phi: MlpParams
    history: List[MetricsRecord]
    final_error: Tuple[float, float]
    config: TrainConfig
    converged: bool
    retries: int = 0


# -- metrics ------------------------------------------------------------------

def relative_error(primal, problem: PdeProblem, domain: Domain, n_points: int, n_trials: int,
                   seed) -> Tuple[float, float]:
    """Mean and standard error over trials of ||u_model - u|| / ||u|| on fresh uniform points in D."""
    if problem.exact_u is None:
        raise ValueError("relative error needs an exact solution")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    errors = []
    for _ in range(n_trials):
        t, x = domain.sample_spacetime(rng, n_points)
        with torch.no_grad():
            pred = primal.predict(t, x, domain, problem)
            exact = problem.exact_u(torch.as_tensor(t), torch.as_tensor(x))
        ok = torch.isfinite(pred)
        if int((~ok).sum()):
            log.warning("%d evaluation points fell in no sub-path and were excluded", int((~ok).sum()))
        diff = (pred[ok] - exact[ok]) ** 2
        errors.append(math.sqrt(float(diff.sum()) / float((exact[ok] ** 2).sum())))
    errors = np.asarray(errors)
    se = float(errors.std(ddof=1) / math.sqrt(len(errors))) if len(errors) > 1 else 0.0
    return float(errors.mean()), se


def n_epsilon_t_epsilon(history: List[MetricsRecord], epsilon: float):
    """First epoch (1-based) and wall time with error <= epsilon; ``(None, None)`` if never."""
    if not history:
        raise ValueError("empty history")
    for rec in history:
        if not math.isnan(rec.rel_err) and rec.rel_err <= epsilon:
            return rec.epoch, rec.wall_time_s
    return None, None


# -- construction ---------------------------------------------------------------

def build_models(config: TrainConfig, d: int):
    """Primal and test-function parameters from the config, seeded deterministically."""
    rng = np.random.default_rng([config.seed, 1])
    if config.primal_kind == "xnode":
        xcfg = XNodeConfig(d, config.h_dim, config.vec_widths, config.init_widths, config.activation)
        primal = XNodePrimal(init_xnode(xcfg, rng), substeps=config.substeps, eval_grid=config.n_T)
    elif config.primal_kind == "dnn":
        primal = DnnPrimal(init_params(MlpConfig(d + 1, config.dnn_widths, 1, config.activation), rng))
    else:
        primal = ExactPrimal()
    phi_rng = np.random.default_rng([config.seed, 2])
    phi = init_params(MlpConfig(d + 1, config.phi_widths, 1, config.activation), phi_rng)
    return primal, phi


def _loss(primal, phi, problem, domain, plan, config, train_primal: bool) -> LossBreakdown:
    if train_primal:
        u = primal.evaluate(plan, domain, problem)
        return assemble(u, phi, problem, domain, config.alpha, config.gamma)
    # u-terms are constants for the test-function step
    with torch.no_grad():
        u = primal.evaluate(plan, domain, problem)
    return assemble(u, phi, problem, domain, config.alpha, config.gamma)


def train(config: TrainConfig, problem: PdeProblem = None, domain: Domain = None,
          on_epoch: Optional[Callable[[MetricsRecord], None]] = None,
          primal=None, phi: MlpParams = None) -> TrainResult:
    """Alternating min-max training.

    Each epoch draws a fresh collocation plan, takes ``K_u`` Adam descent
    steps on the primal and ``K_phi`` ascent steps on the test function.
    The relative error is estimated every ``eval_every`` epochs (and at the
    last epoch); training stops once it reaches ``epsilon``. Without an
    exact solution, training stops when the total loss reaches ``epsilon``.
    """
    if problem is None or domain is None:
        problem, domain = preset(config.problem, config.d)
    if primal is None or phi is None:
        p0, f0 = build_models(config, domain.d)
        primal = primal or p0
        phi = phi or f0
    primal_params = primal.tensors()
    phi_params = phi.tensors()
    for p in primal_params + phi_params:
        p.requires_grad_(False)
    primal_opt = AdamState.zeros_like(primal_params)
    phi_opt = AdamState.zeros_like(phi_params)
    plan_rng = np.random.default_rng([config.seed, 3])
    eval_rng = np.random.default_rng([config.seed, 4])
    lr = config.tau_primal
    benchmark = problem.exact_u is not None
    history: List[MetricsRecord] = []
    elapsed = 0.0
    retries = 0
    converged = False
    epoch = 0
    while epoch < config.max_epochs:
        snapshot = ([p.clone() for p in primal_params], [p.clone() for p in phi_params],
                    primal_opt.copy(), phi_opt.copy())
        start = time.perf_counter()
        try:
            plan = sample_plan(domain, config.n_T, config.N_r, config.N_b, plan_rng)
            for _ in range(config.K_u if primal_params else 0):
                for p in primal_params:
                    p.requires_grad_(True)
                loss = _loss(primal, phi, problem, domain, plan, config, True)
                if not torch.isfinite(loss.total):
                    raise DivergenceError(-1)
                grads = torch.autograd.grad(loss.total, primal_params)
                for p in primal_params:
                    p.requires_grad_(False)
                adam_step(primal_opt, primal_params, grads, lr)
            for _ in range(config.K_phi):
                for p in phi_params:
                    p.requires_grad_(True)
                loss = _loss(primal, phi, problem, domain, plan, config, False)
                if not torch.isfinite(loss.total):
                    raise DivergenceError(-1)
                grads = torch.autograd.grad(loss.l_int, phi_params)
                for p in phi_params:
                    p.requires_grad_(False)
                adam_step(phi_opt, phi_params, grads, config.tau_eta, ascent=True)
        except DivergenceError as exc:
            for p in primal_params + phi_params:
                p.requires_grad_(False)
            retries += 1
            if retries > MAX_DIVERGENCE_RETRIES:
                raise TrainingAborted(f"diverged at epoch {epoch + 1} after {MAX_DIVERGENCE_RETRIES} "
                                      f"learning-rate halvings ({exc})") from exc
            with torch.no_grad():
                for dst, src in zip(primal_params + phi_params, snapshot[0] + snapshot[1]):
                    dst.copy_(src)
            primal_opt, phi_opt = snapshot[2], snapshot[3]
            lr *= 0.5
            log.warning("divergence at epoch %d (%s); primal lr halved to %g", epoch + 1, exc, lr)
            continue
        elapsed += time.perf_counter() - start
        epoch += 1
        lb = loss.as_floats()
        rec = MetricsRecord(epoch, elapsed if config.record_wall_time else math.nan,
                            lb["l_int"], lb["l_bdry"], lb["l_init"], lb["total"])
        last = epoch == config.max_epochs
        if benchmark and (epoch % config.eval_every == 0 or last):
            rec.rel_err, _ = relative_error(primal, problem, domain, config.eval_points, 1, eval_rng)
            converged = rec.rel_err <= config.epsilon
        elif not benchmark:
            converged = rec.total <= config.epsilon
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if converged:
            break
    final = (math.nan, math.nan)
    if benchmark:
        final = relative_error(primal, problem, domain, config.final_eval_points, config.eval_trials,
                               np.random.default_rng([config.seed, 5]))
    return TrainResult(primal, phi, history, final, config, converged, retries)
