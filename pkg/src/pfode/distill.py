"""Teacher training, guidance and consistency distillation.

The teacher is a class-conditional noise predictor trained by denoising
score matching with label dropout, so one network serves both branches of
classifier-free guidance.  Students are :class:`ConsistencyHead` instances
trained with either the self-consistency loss (target: frozen student at
the previous grid node after one teacher solver step) or the direct loss
(target: the teacher's full solver output down to ``t = 0``).
"""

from dataclasses import dataclass, field, replace
import enum

import numpy as np

from .errors import ConfigError, DomainError, NumericError, OrderingError
from .nn import AdamState, Mlp, adam_step
from .schedule import prior_sample, transition_sample
from .solvers import SolverKind, phi, solve_to_zero

__all__ = [
    "LossKind",
    "GuidanceSpec",
    "NoiseTeacher",
    "GuidedTeacher",
    "guided_eps",
    "dsm_loss",
    "train_teacher",
    "ConsistencyHead",
    "consistency_forward",
    "DistillConfig",
    "squared_l2",
    "cm_loss",
    "direct_cm_loss",
    "train_student",
    "multistep_indices",
    "sample_multistep",
]


class LossKind(str, enum.Enum):
    CM = "cm"
    DIRECT = "direct"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower().replace("_", "").replace("-", "")
        aliases = {"cm": cls.CM, "consistency": cls.CM, "direct": cls.DIRECT, "directcm": cls.DIRECT}
        if v not in aliases:
            raise ConfigError(f"unknown loss kind {value!r}; expected 'cm' or 'direct'")
        return aliases[v]


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance scale and the conditioning label(s).

    ``label`` may be one class id or one id per row.
    """

    omega: float = 8.0
    label: object = None

    def __post_init__(self):
        if not self.omega >= 0.0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.omega}")


class NoiseTeacher:
    """Noise predictor ``sigma(t) x + net(x, t, c)``.

    The skip term is the exact noise for a standard normal marginal, so the
    network only learns the residual and the flow stays bounded where the
    prior's tails leave the training data.  ``prior_skip=False`` gives the
    bare network.
    """

    def __init__(self, net, schedule, prior_skip=True):
        self.net = net
        self.schedule = schedule
        self.prior_skip = prior_skip

    @property
    def num_classes(self):
        return self.net.num_classes

    @property
    def null_class(self):
        return self.net.null_class

    @property
    def params(self):
        return self.net.params

    @property
    def data_dim(self):
        return self.net.data_dim

    def _skip(self, x, t):
        if not self.prior_skip:
            return 0.0
        s = self.schedule.marginal_sigma(t)
        if np.ndim(s) > 0:
            s = s[:, None]
        return s * np.asarray(x, dtype=np.float64)

    def predict(self, x, t, labels=None):
        return self.net.predict(x, t, labels) + self._skip(x, t)

    __call__ = predict

    def forward(self, x, t, labels=None):
        return self.net.forward(x, t, labels) + self._skip(x, t)

    def backward(self, upstream):
        return self.net.backward(upstream)


class GuidedTeacher:
    """Noise model ``eps_u + omega (eps_c - eps_u)`` around a conditional teacher.

    ``net`` is anything with ``predict``/``num_classes``/``null_class``
    (a :class:`NoiseTeacher` or a bare :class:`~pfode.nn.Mlp`).
    """

    def __init__(self, net, omega):
        if net.num_classes < 1:
            raise ConfigError("guidance needs a class-conditional teacher")
        if not omega >= 0.0:
            raise ConfigError(f"guidance scale must be >= 0, got {omega}")
        self.net = net
        self.omega = float(omega)

    def _check(self, labels, batch):
        if labels is None:
            raise ConfigError("guided evaluation needs class labels")
        labels = np.broadcast_to(np.asarray(labels, dtype=np.intp), (batch,))
        if labels.size and (labels.min() < 0 or labels.max() >= self.net.num_classes):
            raise ConfigError(f"unknown class label; teacher has {self.net.num_classes} classes")
        return labels

    def __call__(self, x, t, labels=None):
        x = np.asarray(x, dtype=np.float64)
        if self.omega == 0.0:
            return self.net.predict(x, t, None)
        labels = self._check(labels, x.shape[0])
        if self.omega == 1.0:
            return self.net.predict(x, t, labels)
        # conditional and null branches share one stacked forward pass
        b = x.shape[0]
        t2 = t if np.ndim(t) == 0 else np.concatenate([t, t])
        null = np.full(b, self.net.null_class, dtype=np.intp)
        out = self.net.predict(np.concatenate([x, x]), t2, np.concatenate([labels, null]))
        eps_c, eps_u = out[:b], out[b:]
        return eps_u + self.omega * (eps_c - eps_u)


def guided_eps(teacher, x, t, spec):
    return GuidedTeacher(teacher, spec.omega)(x, t, spec.label)


def dsm_loss(teacher, x0, labels, schedule, rng, p_uncond=0.1):
    """Denoising score matching in the eps parameterisation.

    Returns ``(loss, grads)`` where ``loss`` is the batch mean of
    ``||eps_hat(alpha x0 + sigma eps, t, c) - eps||^2`` with ``t ~ U(0, T]``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    b = x0.shape[0]
    if b == 0:
        raise DomainError("empty batch")
    t = schedule.T * (1.0 - rng.random(b))
    eps = rng.standard_normal(x0.shape)
    xt = transition_sample(schedule, x0, t, eps)
    cond = np.array(labels, dtype=np.intp, copy=True)
    cond[rng.random(b) < p_uncond] = teacher.null_class
    diff = teacher.forward(xt, t, cond) - eps
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads = teacher.backward((2.0 / b) * diff)
    return loss, grads


def train_teacher(mixture, schedule, rng, steps=5000, batch_size=64, lr=1e-3,
                  hidden=(128, 128, 128), num_frequencies=8, p_uncond=0.1,
                  prior_skip=True, teacher=None):
    """Fit a conditional :class:`NoiseTeacher`; returns ``(teacher, loss_trace)``."""
    if teacher is None:
        net = Mlp(mixture.dim, hidden, num_classes=mixture.num_classes,
                  num_frequencies=num_frequencies, T=schedule.T, rng=rng)
        teacher = NoiseTeacher(net, schedule, prior_skip)
    opt = AdamState.for_params(teacher.params, lr=lr)
    trace = np.empty(int(steps))
    for k in range(int(steps)):
        x0, labels = mixture.sample(batch_size, rng)
        loss, grads = dsm_loss(teacher, x0, labels, schedule, rng, p_uncond)
        if not np.isfinite(loss):
            raise NumericError(f"teacher loss became non-finite at step {k}")
        adam_step(opt, teacher.params, grads)
        trace[k] = loss
    return teacher, trace


class ConsistencyHead:
    """``f(x, t) = c_skip(t) x + c_out(t) F(x, t)`` so that ``f(x, 0) = x``.

    ``backbone`` is an :class:`~pfode.nn.Mlp` (trainable) or a
    :class:`~pfode.nn.ParamSnapshot` (frozen target).  ``boundary=False``
    drops the skip path and exists only to demonstrate loss collapse.
    """

    def __init__(self, backbone, sigma_data=0.5, tau=10.0, boundary=True):
        self.backbone = backbone
        self.sigma_data = float(sigma_data)
        self.tau = float(tau)
        self.boundary = boundary

    def c_skip(self, t):
        t = np.asarray(t, dtype=np.float64)
        st = (t * self.tau) ** 2
        return self.sigma_data ** 2 / (st + self.sigma_data ** 2)

    def c_out(self, t):
        t = np.asarray(t, dtype=np.float64)
        s = t * self.tau
        return s / np.sqrt(s * s + self.sigma_data ** 2)

    def _coefs(self, x, t):
        if not self.boundary:
            return 0.0, 1.0
        cs, co = self.c_skip(t), self.c_out(t)
        if cs.ndim:
            cs, co = cs[:, None], co[:, None]
        return cs, co

    def __call__(self, x, t, labels=None):
        x = np.asarray(x, dtype=np.float64)
        cs, co = self._coefs(x, t)
        return cs * x + co * self.backbone.predict(x, t, labels)

    predict = __call__

    def forward(self, x, t, labels=None):
        x = np.asarray(x, dtype=np.float64)
        cs, co = self._coefs(x, t)
        self._co = co
        return cs * x + co * self.backbone.forward(x, t, labels)

    def backward(self, upstream):
        return self.backbone.backward(self._co * upstream)

    @property
    def params(self):
        return self.backbone.params

    @property
    def data_dim(self):
        return self.backbone.data_dim

    def frozen(self):
        return self.with_backbone(self.backbone.snapshot())

    def with_backbone(self, backbone):
        return ConsistencyHead(backbone, self.sigma_data, self.tau, self.boundary)

    @classmethod
    def fresh(cls, mixture, schedule, rng, hidden=(128, 128, 128), num_frequencies=8,
              sigma_data=0.5, tau=10.0):
        net = Mlp(mixture.dim, hidden, num_classes=mixture.num_classes,
                  num_frequencies=num_frequencies, T=schedule.T, rng=rng)
        return cls(net, sigma_data, tau)


def consistency_forward(head, x, t, spec=None):
    """``f(x, t)`` for the labels in ``spec`` (null class when absent)."""
    labels = None if spec is None else spec.label
    return head(x, t, labels)


def squared_l2(a, b):
    """Row-wise ``||a - b||^2`` and its gradient w.r.t. ``a``."""
    diff = a - b
    return np.sum(diff * diff, axis=1), 2.0 * diff


def _unit_weight(t):
    return np.ones_like(np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class DistillConfig:
    loss: LossKind = LossKind.CM
    solver: SolverKind = SolverKind.DDIM
    N: int = 100
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    ema_decay: float = 0.0
    distance: object = field(default=squared_l2, compare=False, repr=False)
    weighting: object = field(default=_unit_weight, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind.parse(self.loss))
        object.__setattr__(self, "solver", SolverKind.parse(self.solver))
        for name in ("N", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if int(self.steps) < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")

    def with_(self, **kw):
        return replace(self, **kw)


def _draw_indices(config, b, rng, n):
    if config.N < 1:
        raise ConfigError("need N >= 1")
    if n is None:
        return rng.integers(1, config.N + 1, size=b)
    n = np.broadcast_to(np.asarray(n, dtype=np.intp), (b,)).copy()
    if n.min() < 1 or n.max() > config.N:
        raise OrderingError(f"grid indices must lie in [1, {config.N}]")
    return n


def _noised(schedule, grid, x0, n, rng, x_t):
    if x_t is not None:
        return np.asarray(x_t, dtype=np.float64)
    noise = rng.standard_normal(np.shape(x0))
    return transition_sample(schedule, x0, grid.nodes[n], noise)


def _regress(head, x_t, t, labels, target, config):
    """Weighted distance between the live student and a fixed target, with grads."""
    pred = head.forward(x_t, t, labels)
    dist, ddist = config.distance(pred, target)
    w = config.weighting(t)
    b = x_t.shape[0]
    loss = float(np.mean(w * dist))
    grads = head.backward((w / b)[:, None] * ddist)
    return loss, grads


def cm_loss(head, frozen, teacher, x0, labels, schedule, grid, config, rng, n=None, x_t=None):
    """Consistency distillation loss and gradients for one batch.

    ``frozen`` is the stop-gradient copy of ``head``; it is only evaluated.
    ``n`` forces the grid indices, ``x_t`` the noised inputs.
    """
    b = np.shape(x0)[0]
    n = _draw_indices(config, b, rng, n)
    x_t = _noised(schedule, grid, x0, n, rng, x_t)
    t_n, t_prev = grid.nodes[n], grid.nodes[n - 1]
    x_prev = phi(config.solver)(teacher, x_t, t_n, t_prev, schedule, labels)
    target = frozen(x_prev, t_prev, labels)
    return _regress(head, x_t, t_n, labels, target, config)


def direct_cm_loss(head, teacher, x0, labels, schedule, grid, config, rng, n=None, x_t=None):
    """Direct loss: regress the student onto the teacher's solve from ``t_n`` to 0."""
    b = np.shape(x0)[0]
    n = _draw_indices(config, b, rng, n)
    x_t = _noised(schedule, grid, x0, n, rng, x_t)
    target = solve_to_zero(teacher, x_t, n, grid, config.solver, schedule, labels)
    return _regress(head, x_t, grid.nodes[n], labels, target, config)


def train_student(config, teacher, head, mixture, schedule, rng):
    """Run ``config.steps`` Adam steps of the configured loss.

    ``teacher`` is a noise model (usually a :class:`GuidedTeacher`).
    Returns ``(head, loss_trace)``; the head is updated in place.
    """
    grid = schedule.grid(config.N)
    opt = AdamState.for_params(head.params, lr=config.lr)
    frozen = head.frozen()
    trace = np.empty(int(config.steps))
    for k in range(int(config.steps)):
        x0, labels = mixture.sample(config.batch_size, rng)
        try:
            if config.loss is LossKind.CM:
                loss, grads = cm_loss(head, frozen, teacher, x0, labels, schedule, grid, config, rng)
            else:
                loss, grads = direct_cm_loss(head, teacher, x0, labels, schedule, grid, config, rng)
        except NumericError as exc:
            raise NumericError(f"{config.loss.value} loss diverged at step {k}: {exc}") from exc
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericError(
                f"{config.loss.value} loss diverged at step {k} (loss={loss!r}, "
                f"last finite={trace[k - 1] if k else None})"
            )
        adam_step(opt, head.params, grads)
        if config.loss is LossKind.CM:
            frozen = head.with_backbone(frozen.backbone.blend(head.backbone, config.ema_decay))
        trace[k] = loss
    return head, trace


def multistep_indices(N, steps):
    """Evenly spaced grid indices ``N, N(s-1)/s, ..., N/s`` for an ``s``-step sampler."""
    steps = int(steps)
    if steps < 1 or steps > N:
        raise ConfigError(f"need 1 <= steps <= N, got steps={steps}, N={N}")
    return [N * (steps - j) // steps for j in range(steps)]


def sample_multistep(head, indices, grid, schedule, labels, rng, x_T=None):
    """Few-step consistency sampling with forward-kernel re-noising in between.

    Draws ``x_T`` from the prior unless given, then alternates student
    predictions and re-noising at the next index.  Returns the last prediction.
    """
    indices = [int(i) for i in indices]
    if not indices or indices[0] != grid.N:
        raise ConfigError("step indices must start at N")
    if any(a <= b for a, b in zip(indices[:-1], indices[1:])) or indices[-1] < 1:
        raise ConfigError("step indices must be strictly decreasing and >= 1")
    labels = np.asarray(labels)
    if x_T is None:
        x_T = prior_sample(schedule, head.data_dim, rng, n=labels.shape[0])
    x = x_T
    for j, idx in enumerate(indices):
        x0 = head(x, grid[idx], labels)
        if j + 1 < len(indices):
            x = transition_sample(schedule, x0, grid[indices[j + 1]], rng.standard_normal(x0.shape))
    return x0
