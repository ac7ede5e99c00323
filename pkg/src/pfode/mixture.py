"""Diagonal Gaussian mixtures with closed-form diffused densities and scores.

Under the VP kernel each component ``N(m, diag(v))`` becomes
``N(alpha m, diag(alpha^2 v + sigma^2))`` at time ``t``, so the exact score
of ``p_t`` is available everywhere.  This is the ground truth the learned
teacher and the solvers are checked against.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, ShapeError

__all__ = ["GaussianMixture", "ring_mixture", "sample", "analytic_score", "log_density"]


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        cls = np.asarray(self.class_ids, dtype=np.intp)
        if w.size == 0:
            raise ConfigError("mixture has no components")
        k = w.size
        if mu.shape[0] != k or var.shape != mu.shape or cls.shape != (k,):
            raise ConfigError(
                f"inconsistent mixture: {k} weights, means {mu.shape}, "
                f"variances {var.shape}, class ids {cls.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ConfigError("component variances must be strictly positive")
        if np.any(cls < 0):
            raise ConfigError("class ids must be non-negative")
        for name, val in (("weights", w), ("means", mu), ("variances", var), ("class_ids", cls)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    @property
    def num_classes(self):
        return int(self.class_ids.max()) + 1

    def class_weights(self):
        return np.bincount(self.class_ids, weights=self.weights, minlength=self.num_classes)

    def sample(self, n, rng):
        """Draw ``n`` points; returns ``(x, labels)`` with per-point class ids."""
        n = int(n)
        if n < 1:
            raise DomainError(f"n must be >= 1, got {n}")
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        x = self.means[comp] + np.sqrt(self.variances[comp]) * noise
        return x, self.class_ids[comp]

    def sample_labels(self, n, rng):
        """Class labels distributed like the labels of :meth:`sample`."""
        return rng.choice(self.num_classes, size=int(n), p=self.class_weights())

    def _diffused(self, t, schedule):
        # per-row times broadcast against the (component, dim) axes
        a = np.asarray(schedule.alpha(t), dtype=np.float64)[..., None, None]
        s = np.asarray(schedule.marginal_sigma(t), dtype=np.float64)[..., None, None]
        return a * self.means, a * a * self.variances + s * s

    def _component_logpdf(self, x, t, schedule):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"points of dimension {x.shape[-1]}, mixture dimension {self.dim}")
        mu, var = self._diffused(t, schedule)
        diff = x[..., None, :] - mu
        quad = np.sum(diff * diff / var, axis=-1)
        logdet = np.sum(np.log(2.0 * np.pi * var), axis=-1)
        return -0.5 * (quad + logdet), diff, var

    def _log_weights(self, class_id):
        logw = np.log(self.weights, where=self.weights > 0,
                      out=np.full(self.n_components, -np.inf))
        if class_id is None:
            return logw
        mask = self.class_ids == int(class_id)
        if not mask.any():
            raise ConfigError(f"unknown class id {class_id}")
        out = np.where(mask, logw, -np.inf)
        return out - logsumexp(out)

    def log_density(self, x, t, schedule, class_id=None):
        """Exact log density of the diffused mixture at time ``t``."""
        comp, _, _ = self._component_logpdf(x, t, schedule)
        return logsumexp(comp + self._log_weights(class_id), axis=-1)

    def score(self, x, t, schedule, class_id=None):
        """Exact ``grad_x log p_t(x)``; optionally restricted to one class."""
        comp, diff, var = self._component_logpdf(x, t, schedule)
        logr = comp + self._log_weights(class_id)
        logr = logr - logsumexp(logr, axis=-1, keepdims=True)
        resp = np.exp(logr)
        return -np.sum(resp[..., None] * diff / var, axis=-2)

    def eps_model(self, schedule, class_id=None):
        """Noise predictor ``-sigma(t) * score`` usable wherever a teacher is."""
        return _AnalyticEps(self, schedule, class_id)


class _AnalyticEps:
    def __init__(self, mixture, schedule, class_id):
        self.mixture = mixture
        self.schedule = schedule
        self.class_id = class_id

    def __call__(self, x, t, labels=None):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        s = np.asarray(self.schedule.marginal_sigma(t))
        s = s if s.ndim == 0 else s[:, None]
        if labels is None or self.class_id is not None:
            return -s * self.mixture.score(x, t, self.schedule, self.class_id)
        labels = np.broadcast_to(np.asarray(labels), x.shape[:1])
        out = np.empty_like(x)
        for c in np.unique(labels):
            rows = labels == c
            t_rows = t if t.ndim == 0 else t[rows]
            s_rows = s if s.ndim == 0 else s[rows]
            out[rows] = -s_rows * self.mixture.score(x[rows], t_rows, self.schedule, int(c))
        return out


def ring_mixture(n_components=8, radius=2.0, variance=0.01, n_classes=2):
    """Equal-weight components on a circle; class = component index mod ``n_classes``."""
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(
        weights=np.full(n_components, 1.0 / n_components),
        means=means,
        variances=np.full((n_components, 2), variance),
        class_ids=np.arange(n_components) % n_classes,
    )


def sample(mix, n, rng):
    return mix.sample(n, rng)


def analytic_score(mix, x, t, schedule, class_id=None):
    return mix.score(x, t, schedule, class_id)


def log_density(mix, x, t, schedule, class_id=None):
    return mix.log_density(x, t, schedule, class_id)
