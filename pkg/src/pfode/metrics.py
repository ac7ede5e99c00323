"""ODE-solving error and distributional sample quality.

``ode_error`` compares a student's single evaluation at ``T`` against the
teacher's full solver from the same prior noise.  Sample quality is the
sliced Wasserstein-2 distance to ground-truth mixture samples; its
resolution at a given sample size is the noise floor between two
independent ground-truth draws.
"""

import csv
from dataclasses import asdict, dataclass, field
import io

import numpy as np

from .distill import multistep_indices, sample_multistep
from .errors import DomainError, ShapeError
from .schedule import prior_sample
from .solvers import f_solver

__all__ = [
    "MetricReport",
    "REPORT_COLUMNS",
    "draw_eval_noise",
    "ode_error_terms",
    "ode_error",
    "projection_directions",
    "sliced_wasserstein",
    "noise_floor",
    "teacher_endpoints",
    "evaluate_run",
]

REPORT_COLUMNS = (
    "run_id", "loss_kind", "solver", "N", "omega", "seed",
    "E", "E_stderr", "sw2_1step", "sw2_2step", "sw2_4step", "noise_floor",
)

SAMPLER_STEPS = (1, 2, 4)


@dataclass
class MetricReport:
    run_id: str
    loss_kind: str
    solver: str
    N: int
    omega: float
    seed: int
    E: float
    E_stderr: float
    sw2_1step: float
    sw2_2step: float
    sw2_4step: float
    noise_floor: float
    n_ode: int = 0
    n_samples: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("E", "E_stderr", "sw2_1step", "sw2_2step", "sw2_4step", "noise_floor"):
            value = getattr(self, name)
            if not value >= 0.0:
                raise DomainError(f"metric {name} must be non-negative, got {value}")

    def row(self):
        d = asdict(self)
        return {k: _fmt(d[k]) for k in REPORT_COLUMNS}

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.row())
        return buf.getvalue()

    def summary(self):
        d = asdict(self)
        d["sample_counts"] = {"E": self.n_ode, "sw2": self.n_samples}
        return d


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def draw_eval_noise(mixture, schedule, n, rng):
    """Prior points and class labels for an evaluation batch, in a fixed draw order."""
    n = int(n)
    if n < 1:
        raise DomainError(f"n_samples must be >= 1, got {n}")
    x_T = prior_sample(schedule, mixture.dim, rng, n=n)
    labels = mixture.sample_labels(n, rng)
    return x_T, labels


def ode_error_terms(head, teacher, grid, kind, schedule, x_T, labels, reference=None):
    """Per-sample ``||f(x_T, T) - f_solver(x_T, N, 0)||^2``.

    ``reference`` may carry a precomputed teacher solve for the same points.
    """
    if reference is None:
        reference = f_solver(teacher, x_T, grid.N, 0, grid, kind, schedule, labels)
    pred = head(x_T, grid.T, labels)
    diff = pred - reference
    return np.sum(diff * diff, axis=1)


def ode_error(head, teacher, grid, kind, schedule, mixture, n_samples, rng):
    """Monte-Carlo estimate of the single-step ODE error (no step-count argument by design)."""
    x_T, labels = draw_eval_noise(mixture, schedule, n_samples, rng)
    return float(np.mean(ode_error_terms(head, teacher, grid, kind, schedule, x_T, labels)))


def _paired_quantiles(pa, pb):
    """Empirical quantile functions of two samples on their merged level grid.

    Both quantile functions are step functions, constant between the
    levels ``i/m`` and ``j/n``; evaluating at interval midpoints with the
    interval widths as weights gives the exact 1-D W2.
    """
    pa, pb = np.sort(pa, axis=0), np.sort(pb, axis=0)
    m, n = pa.shape[0], pb.shape[0]
    if m == n:
        return pa, pb, None
    levels = np.union1d(np.arange(1, m + 1) / m, np.arange(1, n + 1) / n)
    widths = np.diff(levels, prepend=0.0)
    mid = levels - 0.5 * widths
    ia = np.minimum((mid * m).astype(np.intp), m - 1)
    ib = np.minimum((mid * n).astype(np.intp), n - 1)
    return pa[ia], pb[ib], widths


def projection_directions(dim, num_projections, rng):
    """Unit columns of shape ``(dim, num_projections)``; one fixed axis in 1-D."""
    if dim == 1:
        return np.ones((1, 1))
    dirs = rng.standard_normal((dim, int(num_projections)))
    return dirs / np.linalg.norm(dirs, axis=0, keepdims=True)


def sliced_wasserstein(a, b, num_projections=128, rng=None, directions=None):
    """Mean over random unit directions of the 1-D Wasserstein-2 distance.

    ``directions`` fixes the projection set so several distances share it.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DomainError("sliced Wasserstein needs non-empty point sets")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if directions is None:
        rng = np.random.default_rng(0) if rng is None else rng
        dirs = projection_directions(a.shape[1], num_projections, rng)
    else:
        dirs = np.asarray(directions, dtype=np.float64)
        if dirs.shape[0] != a.shape[1]:
            raise ShapeError(f"directions of dimension {dirs.shape[0]} for {a.shape[1]}-d points")
    qa, qb, widths = _paired_quantiles(a @ dirs, b @ dirs)
    sq = (qa - qb) ** 2
    w2 = np.sqrt(np.mean(sq, axis=0) if widths is None else widths @ sq)
    return float(np.mean(w2))


def noise_floor(mixture, n, rng, num_projections=128, directions=None):
    """SW2 between two independent ground-truth draws of size ``n``."""
    x1, _ = mixture.sample(n, rng)
    x2, _ = mixture.sample(n, rng)
    return sliced_wasserstein(x1, x2, num_projections, rng, directions)


def teacher_endpoints(teacher, grid, kind, schedule, x_T, labels):
    return f_solver(teacher, x_T, grid.N, 0, grid, kind, schedule, labels)


def evaluate_run(head, teacher, mixture, schedule, grid, kind, rng, *, n_ode=2000,
                 n_samples=5000, num_projections=128, meta=None, reference=None):
    """Single-step ODE error plus SW2 at 1, 2 and 4 sampling steps.

    Random streams are consumed in a fixed order: ODE-error noise,
    projection directions, ground truth, noise floor, then per-step sampler
    noise.  One direction set serves the floor and every SW2 value.
    ``reference`` may hold the teacher's solve of the ODE-error batch
    (it depends only on the teacher, solver, grid and ``rng`` seed).
    """
    meta = dict(meta or {})
    x_T, labels = draw_eval_noise(mixture, schedule, n_ode, rng)
    terms = ode_error_terms(head, teacher, grid, kind, schedule, x_T, labels, reference)
    E = float(np.mean(terms))
    E_se = float(np.std(terms, ddof=1) / np.sqrt(terms.size)) if terms.size > 1 else 0.0
    dirs = projection_directions(mixture.dim, num_projections, rng)
    truth, _ = mixture.sample(n_samples, rng)
    floor = noise_floor(mixture, n_samples, rng, directions=dirs)
    gen_labels = mixture.sample_labels(n_samples, rng)
    sw = {}
    for steps in SAMPLER_STEPS:
        idx = multistep_indices(grid.N, steps)
        samples = sample_multistep(head, idx, grid, schedule, gen_labels, rng)
        sw[steps] = sliced_wasserstein(samples, truth, directions=dirs)
    return MetricReport(
        run_id=str(meta.get("run_id", "")),
        loss_kind=str(meta.get("loss_kind", "")),
        solver=kind.value if hasattr(kind, "value") else str(kind),
        N=int(grid.N),
        omega=float(meta.get("omega", 0.0)),
        seed=int(meta.get("seed", 0)),
        E=E, E_stderr=E_se,
        sw2_1step=sw[1], sw2_2step=sw[2], sw2_4step=sw[4],
        noise_floor=floor,
        n_ode=int(n_ode), n_samples=int(n_samples),
    )
