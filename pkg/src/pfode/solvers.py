"""Single-step PF-ODE solvers and their recursion over a time grid.

A noise model here is any callable ``eps(x, t, labels) -> array`` with the
shape of ``x``: the guided teacher, an analytic mixture, or a test double.
Euler and Heun integrate the drift ``-1/2 beta (x - eps / sigma)``; DDIM
uses the exact exponential update in the ``(x0, eps)`` parameterisation.
All steps go backward in time, ``t_prev < t``.
"""

import enum

import numpy as np

from .errors import DomainError, NumericError, OrderingError
from .schedule import TimeGrid, pf_drift

__all__ = [
    "SolverKind",
    "euler_step",
    "heun_step",
    "integrate",
    "eps_drift",
    "phi_euler",
    "phi_heun",
    "phi_ddim",
    "phi",
    "f_solver",
    "solve_to_zero",
    "reference_solution",
    "CountingEps",
]


class SolverKind(str, enum.Enum):
    EULER = "euler"
    HEUN = "heun"
    DDIM = "ddim"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise DomainError(f"unknown solver {value!r}; expected one of "
                              f"{[k.value for k in cls]}") from None

    @property
    def evals_per_step(self):
        return 2 if self is SolverKind.HEUN else 1


def euler_step(drift, x, t, t_next):
    return x + (t_next - t) * drift(x, t)


def heun_step(drift, x, t, t_next, predictor_only=False):
    h = t_next - t
    d0 = drift(x, t)
    x_pred = x + h * d0
    if predictor_only:
        return x_pred
    return x + 0.5 * h * (d0 + drift(x_pred, t_next))


def integrate(drift, x, times, method="heun"):
    """Step a generic ``drift(x, t)`` through ``times`` (either direction)."""
    step = {"euler": euler_step, "heun": heun_step}[method]
    for t, t_next in zip(times[:-1], times[1:]):
        x = step(drift, x, float(t), float(t_next))
    return x


def eps_drift(model, schedule, labels=None):
    """PF-ODE drift of a noise model, converting eps to a score via ``-eps / sigma``."""
    def drift(x, t):
        return _drift_at(model, schedule, labels, x, t)
    return drift


def _col(v, x):
    """Scalar stays scalar; per-row values become a column for broadcasting."""
    if type(v) is float:
        return v
    v = np.asarray(v, dtype=np.float64)
    return v if v.ndim == 0 else v.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def _check_order(t, t_prev, schedule):
    if type(t) is float and type(t_prev) is float:
        if not t_prev < t:
            raise OrderingError(f"solver steps go backward in time; got t={t}, t_prev={t_prev}")
        if t_prev < 0.0 or t > schedule.T:
            raise DomainError(f"times must lie in [0, {schedule.T}]")
        return
    t = np.asarray(t, dtype=np.float64)
    t_prev = np.asarray(t_prev, dtype=np.float64)
    if not np.all(t_prev < t):
        raise OrderingError(f"solver steps go backward in time; got t={t}, t_prev={t_prev}")
    if np.any(t_prev < 0.0) or np.any(t > schedule.T):
        raise DomainError(f"times must lie in [0, {schedule.T}]")


def _sub(a, b):
    if type(a) is float and type(b) is float:
        return a - b
    return np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)


def _drift_at(model, schedule, labels, x, t):
    sigma = _col(schedule.marginal_sigma(t), x)
    score = -model(x, t, labels) / sigma
    return pf_drift(schedule, x, t, score)


def phi_euler(model, x, t, t_prev, schedule, labels=None):
    """``x + (t_prev - t) v(x, t)``; ``t``/``t_prev`` may be per-row arrays."""
    _check_order(t, t_prev, schedule)
    h = _col(_sub(t_prev, t), x)
    return x + h * _drift_at(model, schedule, labels, x, t)


def phi_heun(model, x, t, t_prev, schedule, labels=None):
    """Predictor-corrector step; predictor only when ``t_prev`` hits the sigma floor."""
    _check_order(t, t_prev, schedule)
    h = _col(_sub(t_prev, t), x)
    d0 = _drift_at(model, schedule, labels, x, t)
    x_pred = x + h * d0
    # the corrector would evaluate the clamped score at t_prev ~ 0
    floor = schedule.in_floor_region(t_prev)
    if type(floor) is bool or np.ndim(floor) == 0:
        if floor:
            return x_pred
        return x + 0.5 * h * (d0 + _drift_at(model, schedule, labels, x_pred, t_prev))
    if floor.all():
        return x_pred
    out = x_pred.copy()
    rows = ~floor
    sub_labels = None if labels is None else np.asarray(labels)[rows]
    tp = np.asarray(t_prev)[rows]
    d1 = _drift_at(model, schedule, sub_labels, x_pred[rows], tp)
    out[rows] = x[rows] + 0.5 * h[rows] * (d0[rows] + d1)
    return out


def phi_ddim(model, x, t, t_prev, schedule, labels=None):
    """Deterministic DDIM: predict ``x0`` and re-noise it to ``t_prev`` with the same eps."""
    _check_order(t, t_prev, schedule)
    a_t = schedule.alpha(t)
    if (a_t < 1e-8) if type(a_t) is float else np.any(a_t < 1e-8):
        raise NumericError(f"alpha(t) = {np.min(a_t):.3e} too small for a DDIM step")
    a_t = _col(a_t, x)
    s_t = _col(schedule.marginal_sigma(t), x)
    eps = model(x, t, labels)
    x0 = (x - s_t * eps) / a_t
    if np.ndim(t_prev) == 0 and t_prev == 0.0:
        return x0
    return _col(schedule.alpha(t_prev), x) * x0 + _col(schedule.marginal_sigma(t_prev), x) * eps


_PHI = {
    SolverKind.EULER: phi_euler,
    SolverKind.HEUN: phi_heun,
    SolverKind.DDIM: phi_ddim,
}


def phi(kind):
    return _PHI[SolverKind.parse(kind)]


def f_solver(model, x, n, m, grid, kind, schedule, labels=None):
    """Apply the single-step solver across ``t_n -> t_{n-1} -> ... -> t_m``."""
    if not 0 <= m <= n <= grid.N:
        raise OrderingError(f"need 0 <= m <= n <= N, got m={m}, n={n}, N={grid.N}")
    step = phi(kind)
    nodes = grid.nodes
    for i in range(n, m, -1):
        x = step(model, x, float(nodes[i]), float(nodes[i - 1]), schedule, labels)
    return x


def solve_to_zero(model, x, n_start, grid, kind, schedule, labels=None):
    """Row-wise ``f_solver(x_i, n_i, 0)`` for a batch with per-row start indices.

    Rows are sorted by start index so every step acts on a contiguous
    prefix of the batch; rows that have not started yet are left untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    n_start = np.asarray(n_start, dtype=np.intp)
    if n_start.shape != x.shape[:1]:
        raise DomainError("one start index per row is required")
    if n_start.size and (n_start.min() < 0 or n_start.max() > grid.N):
        raise OrderingError("start indices must lie in [0, N]")
    order = np.argsort(-n_start, kind="stable")
    xs = x[order].copy()
    ns = n_start[order]
    ls = None if labels is None else np.asarray(labels)[order]
    step = phi(kind)
    nodes = grid.nodes
    top = int(ns[0]) if ns.size else 0
    for i in range(top, 0, -1):
        k = int(np.searchsorted(-ns, -i, side="right"))
        sub_labels = None if ls is None else ls[:k]
        xs[:k] = step(model, xs[:k], float(nodes[i]), float(nodes[i - 1]), schedule, sub_labels)
    out = np.empty_like(xs)
    out[order] = xs
    return out


def reference_solution(model, x, t, schedule, fine_N=2000, labels=None):
    """Heun on a fine uniform grid from ``t`` to 0, standing in for the exact flow."""
    fine_N = int(fine_N)
    if fine_N < 500:
        raise DomainError(f"fine_N must be >= 500, got {fine_N}")
    grid = TimeGrid.uniform(fine_N, t)
    return f_solver(model, x, fine_N, 0, grid, SolverKind.HEUN, schedule, labels)


class CountingEps:
    """Wraps a noise model and counts calls and evaluated rows."""

    def __init__(self, model):
        self.model = model
        self.calls = 0
        self.rows = 0

    def __call__(self, x, t, labels=None):
        self.calls += 1
        self.rows += np.shape(x)[0]
        return self.model(x, t, labels)
