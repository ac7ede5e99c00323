"""Consistency distillation of a toy diffusion teacher, with ODE-error diagnostics."""

from .schedule import NoiseSchedule, TimeGrid, prior_sample, pf_drift, transition_sample
from .mixture import GaussianMixture, ring_mixture
from .nn import AdamState, Mlp, ParamSnapshot, adam_step, load_params, save_params, snapshot
from .solvers import SolverKind, f_solver, phi_ddim, phi_euler, phi_heun, reference_solution
from .distill import (
    ConsistencyHead,
    DistillConfig,
    GuidanceSpec,
    GuidedTeacher,
    LossKind,
    NoiseTeacher,
    cm_loss,
    direct_cm_loss,
    dsm_loss,
    guided_eps,
    sample_multistep,
    train_student,
    train_teacher,
)
from .metrics import MetricReport, evaluate_run, ode_error, sliced_wasserstein
from .config import RunConfig, parse_config, serialize_config
from .experiment import run_cell, run_sweep
from .plots import emit_plots

__version__ = "0.1.0"
