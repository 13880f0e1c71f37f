"""Weak adversarial networks with extended neural ODE primals for parabolic PDEs."""
from xnodewan.domain import Ball, GeneralTimeVarying, HyperCube, Hourglass1D, SamplePlan, sample_plan
from xnodewan.nets import MlpConfig, MlpParams, init_params, mlp_apply
from xnodewan.primal import DnnPrimal, ExactPrimal, XNodePrimal
from xnodewan.trainer import TrainConfig, TrainResult, n_epsilon_t_epsilon, relative_error, train
from xnodewan.weakform import PdeProblem, manufacture, preset
from xnodewan.xnode import XNodeConfig, XNodeParams, init_xnode

__version__ = "0.1.0"
