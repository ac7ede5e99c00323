"""Variance-preserving forward diffusion and its probability-flow drift.

The forward SDE is ``dx = -1/2 beta(t) x dt + sqrt(beta(t)) dW`` with a
linear ``beta``.  Its transition kernel is Gaussian,
``x_t | x_0 ~ N(alpha(t) x_0, sigma(t)^2 I)`` with ``alpha^2 + sigma^2 = 1``,
so the terminal marginal is approximated by a standard normal prior.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "NoiseSchedule",
    "TimeGrid",
    "transition_sample",
    "prior_sample",
    "pf_drift",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta VP schedule on ``[0, T]``."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    sigma_floor: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.beta_min < self.beta_max):
            raise DomainError(
                f"need 0 < beta_min < beta_max, got {self.beta_min}, {self.beta_max}"
            )
        if not self.T > 0.0:
            raise DomainError(f"horizon T must be positive, got {self.T}")
        if not self.sigma_floor >= 0.0:
            raise DomainError(f"sigma_floor must be non-negative, got {self.sigma_floor}")

    # Python floats take a math-module fast path; solver loops call these
    # several times per step with scalar times.

    def _check(self, t):
        if type(t) is float:
            if not 0.0 <= t <= self.T:
                raise DomainError(f"t must lie in [0, {self.T}], got {t}")
            return t
        t = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > self.T):
            raise DomainError(f"t must lie in [0, {self.T}]")
        return t

    def beta(self, t):
        t = self._check(t)
        return self.beta_min + (t / self.T) * (self.beta_max - self.beta_min)

    def integrated_beta(self, t):
        """``int_0^t beta(s) ds``."""
        t = self._check(t)
        return self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.T)

    def alpha(self, t):
        b = self.integrated_beta(t)
        return math.exp(-0.5 * b) if type(b) is float else np.exp(-0.5 * b)

    def _raw_sigma(self, t):
        # -expm1 keeps 1 - alpha^2 accurate for small t
        b = self.integrated_beta(t)
        return math.sqrt(-math.expm1(-b)) if type(b) is float else np.sqrt(-np.expm1(-b))

    def marginal_sigma(self, t):
        t = self._check(t)
        raw = self._raw_sigma(t)
        if type(t) is float:
            return max(raw, self.sigma_floor) if t > 0.0 else 0.0
        return np.where(t > 0.0, np.maximum(raw, self.sigma_floor), 0.0)

    def in_floor_region(self, t):
        """True where the unclamped noise level is below ``sigma_floor``."""
        return self._raw_sigma(self._check(t)) < self.sigma_floor

    def grid(self, N):
        return TimeGrid.uniform(N, self.T)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretisation ``0 = t_0 < ... < t_N = T``."""

    N: int
    nodes: np.ndarray

    @classmethod
    def uniform(cls, N, T=1.0):
        N = int(N)
        if N < 1:
            raise DomainError(f"grid needs at least one interval, got N={N}")
        nodes = np.arange(N + 1, dtype=np.float64) * (T / N)
        nodes[0] = 0.0
        nodes[-1] = T
        nodes.setflags(write=False)
        return cls(N, nodes)

    @property
    def T(self):
        return float(self.nodes[-1])

    def __getitem__(self, i):
        return float(self.nodes[i])

    def __len__(self):
        return self.N + 1


def _broadcast_time(coef, x):
    if type(coef) is float:
        return coef
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    if coef.shape != x.shape[:1]:
        raise ShapeError(f"per-row times {coef.shape} do not match batch {x.shape}")
    return coef.reshape((-1,) + (1,) * (x.ndim - 1))


def transition_sample(schedule, x0, t, noise):
    """Draw ``x_t`` given ``x_0`` using externally supplied unit Gaussian noise.

    ``t`` is a scalar or one time per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    a = _broadcast_time(schedule.alpha(t), x0)
    s = _broadcast_time(schedule.marginal_sigma(t), x0)
    return a * x0 + s * noise


def prior_sample(schedule, dim, rng, n=None):
    """Standard normal draw(s) approximating the terminal marginal ``p_T``.

    Returns shape ``(dim,)`` when ``n`` is None, otherwise ``(n, dim)``.
    """
    dim = int(dim)
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    shape = (dim,) if n is None else (int(n), dim)
    return rng.standard_normal(shape)


def pf_drift(schedule, x, t, score):
    """Velocity of the empirical PF ODE, ``-1/2 beta(t) (x + score)``."""
    x = np.asarray(x, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    if x.shape != score.shape:
        raise ShapeError(f"x shape {x.shape} != score shape {score.shape}")
    b = _broadcast_time(schedule.beta(t), x)
    return -0.5 * b * (x + score)
