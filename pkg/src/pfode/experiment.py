"""Run orchestration: seeding, teacher caching, single runs and resumable sweeps.

Random streams are derived from ``(master seed, stream name, cell
coordinates)`` through :class:`numpy.random.SeedSequence`, so a cell's
numbers never depend on which other cells ran or in what order.  The
loss kind is deliberately *not* a coordinate: the CM and Direct students
of one cell share their initialisation, training batches and evaluation
noise, which turns the E comparison into a paired one.

Directory layout under a cache root::

    teachers/<teacher_key>/  teacher.bin  loss_trace.csv  config.ini
    runs/<run_id>/           config.ini  loss_trace.csv  student.bin
                             metrics.csv  summary.json
"""

from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import replace
import hashlib
import io
import itertools
import json
import logging
import math
import os
from pathlib import Path
import time

import numpy as np

from .config import serialize_config
from .distill import ConsistencyHead, GuidedTeacher, NoiseTeacher, train_student, train_teacher
from .errors import FormatError, PfodeError
from .metrics import REPORT_COLUMNS, MetricReport, draw_eval_noise, evaluate_run, teacher_endpoints
from .nn import load_params, save_params

__all__ = [
    "SWEEP_COLUMNS",
    "cell_rng",
    "fit_teacher",
    "obtain_teacher",
    "run_cell",
    "run_sweep",
    "read_csv",
    "compare_losses",
    "quality_flags",
    "omega_trend",
]

log = logging.getLogger(__name__)

SWEEP_COLUMNS = tuple(REPORT_COLUMNS) + ("status",)
_METRICS = ("E", "E_stderr", "sw2_1step", "sw2_2step", "sw2_4step", "noise_floor")


def cell_rng(seed, stream, *coords):
    """Generator for one named stream of one cell."""
    label = "|".join([stream, *(repr(c) for c in coords)]).encode()
    words = np.frombuffer(hashlib.sha256(label).digest()[:16], dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, words)]))


def _coords(cfg):
    return (cfg.distill.solver.value, int(cfg.distill.N), float(cfg.omega))


def _write_text(path, text):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _trace_csv(trace):
    return _csv_text(("step", "loss"), ({"step": k, "loss": repr(float(v))} for k, v in enumerate(trace)))


# -- teacher -----------------------------------------------------------------

def _teacher_from_file(path, cfg):
    net = load_params(path)
    return NoiseTeacher(net, cfg.schedule, cfg.teacher.prior_skip)


def fit_teacher(cfg):
    """Train the teacher described by ``cfg``; returns ``(teacher, loss_trace)``."""
    tc = cfg.teacher
    return train_teacher(
        cfg.mixture.build(), cfg.schedule, cell_rng(cfg.seed, "teacher"), steps=tc.steps,
        batch_size=tc.batch_size, lr=tc.lr, hidden=tc.hidden, num_frequencies=tc.num_frequencies,
        p_uncond=tc.p_uncond, prior_skip=tc.prior_skip)


def obtain_teacher(cfg, cache=None):
    """Train the config's teacher, or load it from ``cache/teachers/<key>``."""
    key = cfg.teacher_key()
    where = None if cache is None else Path(cache) / "teachers" / key
    if where is not None and (where / "teacher.bin").exists():
        return _teacher_from_file(where / "teacher.bin", cfg)
    t0 = time.perf_counter()
    teacher, trace = fit_teacher(cfg)
    log.info("teacher %s trained in %.1fs", key, time.perf_counter() - t0)
    if where is not None:
        write_teacher(where, cfg, teacher, trace)
    return teacher


def write_teacher(where, cfg, teacher, trace):
    where = Path(where)
    where.mkdir(parents=True, exist_ok=True)
    _write_text(where / "config.ini", serialize_config(cfg))
    _write_text(where / "loss_trace.csv", _trace_csv(trace))
    save_params(teacher.net, where / "teacher.bin")


# -- one cell ------------------------------------------------------------------

def distill_cell(cfg, teacher):
    """Train one student; returns ``(head, loss_trace)``."""
    mixture = cfg.mixture.build()
    seed, coords = cfg.seed, _coords(cfg)
    head = ConsistencyHead.fresh(mixture, cfg.schedule, cell_rng(seed, "student-init", *coords),
                                 hidden=cfg.teacher.hidden, num_frequencies=cfg.teacher.num_frequencies)
    guided = GuidedTeacher(teacher, cfg.omega)
    return train_student(cfg.distill, guided, head, mixture, cfg.schedule,
                         cell_rng(seed, "student-train", *coords))


def eval_cell(cfg, head, teacher, references=None):
    """Evaluate a trained head.  ``references`` memoises the teacher solve per cell coordinates."""
    mixture = cfg.mixture.build()
    guided = GuidedTeacher(teacher, cfg.omega)
    grid = cfg.schedule.grid(cfg.distill.N)
    kind = cfg.distill.solver
    reference = None
    if references is not None:
        key = (cfg.teacher_key(), _coords(cfg), cfg.eval.n_ode)
        if key not in references:
            x_T, labels = draw_eval_noise(mixture, cfg.schedule, cfg.eval.n_ode, _eval_rng(cfg))
            references[key] = teacher_endpoints(guided, grid, kind, cfg.schedule, x_T, labels)
        reference = references[key]
    meta = {"run_id": cfg.run_id, "loss_kind": cfg.distill.loss.value, "omega": cfg.omega, "seed": cfg.seed}
    return evaluate_run(head, guided, mixture, cfg.schedule, grid, kind, _eval_rng(cfg),
                        n_ode=cfg.eval.n_ode, n_samples=cfg.eval.n_samples,
                        num_projections=cfg.eval.projections, meta=meta, reference=reference)


def _eval_rng(cfg):
    return cell_rng(cfg.seed, "eval", *_coords(cfg))


def write_student(where, cfg, head, trace):
    where = Path(where)
    where.mkdir(parents=True, exist_ok=True)
    _write_text(where / "config.ini", serialize_config(cfg))
    _write_text(where / "loss_trace.csv", _trace_csv(trace))
    save_params(head.backbone, where / "student.bin")


def load_student(path):
    return ConsistencyHead(load_params(path))


def write_metrics(where, cfg, report, elapsed=None):
    where = Path(where)
    where.mkdir(parents=True, exist_ok=True)
    _write_text(where / "config.ini", serialize_config(cfg))
    _write_text(where / "metrics.csv", report.to_csv())
    summary = report.summary()
    summary.update(status="ok", teacher_key=cfg.teacher_key(), elapsed_s=elapsed)
    _write_text(where / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_cell(cfg, where, teacher=None, cache=None, references=None):
    """Distill and evaluate one configuration into ``where``; returns the report."""
    t0 = time.perf_counter()
    if teacher is None:
        teacher = obtain_teacher(cfg, cache)
    head, trace = distill_cell(cfg, teacher)
    write_student(where, cfg, head, trace)
    report = eval_cell(cfg, head, teacher, references)
    write_metrics(where, cfg, report, round(time.perf_counter() - t0, 3))
    return report


def _completed(where, run_id):
    try:
        summary = json.loads((where / "summary.json").read_text(encoding="utf-8"))
        rows = read_csv(where / "metrics.csv")
    except (OSError, ValueError, FormatError):
        return None
    if summary.get("status") != "ok" or len(rows) != 1 or rows[0].get("run_id") != run_id:
        return None
    return rows[0]


# -- sweeps --------------------------------------------------------------------

def sweep_cells(base, Ns, omegas, losses, solvers, seeds):
    lists = {"N": Ns, "omega": omegas, "loss": losses, "solver": solvers, "seed": seeds}
    empty = [k for k, v in lists.items() if not list(v)]
    if empty:
        raise PfodeError(f"sweep needs non-empty value lists, empty: {', '.join(empty)}")
    # CM and Direct of one cell are adjacent so they can share the teacher solve
    return [base.with_cell(N=int(n), omega=float(w), loss=loss, solver=s, seed=int(seed))
            for seed, s, n, w, loss in itertools.product(seeds, solvers, Ns, omegas, losses)]


def _cell_job(cfg, cache):
    where = Path(cache) / "runs" / cfg.run_id
    try:
        teacher = obtain_teacher(cfg, cache)
        return run_cell(cfg, where, teacher, cache).row()
    except Exception as exc:  # recorded per cell, the sweep goes on
        return _failed_row(cfg, exc)


def _failed_row(cfg, exc):
    log.warning("cell %s failed: %s", cfg.run_id, exc)
    msg = " ".join(f"{type(exc).__name__}: {exc}".split())
    row = {c: "" for c in REPORT_COLUMNS}
    row.update(run_id=cfg.run_id, loss_kind=cfg.distill.loss.value, solver=cfg.distill.solver.value,
               N=str(cfg.distill.N), omega=repr(float(cfg.omega)), seed=str(cfg.seed))
    row["status"] = "failed: " + msg
    return row


def run_sweep(base, Ns, omegas, losses, solvers, seeds, out, cache=None, workers=1):
    """Cartesian sweep; writes ``out/sweep.csv`` and returns its rows.

    Cells whose run directory already holds a completed result for the same
    run_id are read back instead of recomputed.  The CSV is rewritten in
    cell order after every finished cell, so it is valid at any point.
    """
    out = Path(out)
    cache = Path(cache) if cache is not None else out
    out.mkdir(parents=True, exist_ok=True)
    cells = sweep_cells(base, Ns, omegas, losses, solvers, seeds)
    rows = [None] * len(cells)
    todo = []
    for i, cfg in enumerate(cells):
        done = _completed(cache / "runs" / cfg.run_id, cfg.run_id)
        if done is not None:
            rows[i] = dict(done, status="ok")
        else:
            todo.append(i)
    log.info("sweep: %d cells, %d cached", len(cells), len(cells) - len(todo))
    csv_path = out / "sweep.csv"

    def flush():
        _write_text(csv_path, _csv_text(SWEEP_COLUMNS, [r for r in rows if r is not None]))

    flush()
    teachers = {}
    for i in todo:
        key = cells[i].teacher_key()
        if key not in teachers:
            try:
                teachers[key] = obtain_teacher(cells[i], cache)
            except Exception as exc:
                teachers[key] = exc
    if workers <= 1:
        references = {}
        for i in todo:
            cfg = cells[i]
            teacher = teachers[cfg.teacher_key()]
            try:
                if isinstance(teacher, Exception):
                    raise teacher
                rows[i] = dict(run_cell(cfg, cache / "runs" / cfg.run_id, teacher, cache, references).row(),
                               status="ok")
            except Exception as exc:
                rows[i] = _failed_row(cfg, exc)
            flush()
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_cell_job, cells[i], cache): i for i in todo}
            for fut in futures:
                row = fut.result()
                rows[futures[fut]] = row if "status" in row else dict(row, status="ok")
                flush()
    return rows


# -- analysis ------------------------------------------------------------------

def read_csv(path, required=()):
    """Rows of a UTF-8 CSV; missing ``required`` columns raise :class:`FormatError`."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if header and missing:
            raise FormatError(f"{path}: missing columns {', '.join(missing)}")
        return list(reader)


def _ok(rows):
    return [r for r in rows if r.get("status", "ok") == "ok"]


def _group(rows, keys):
    out = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(r)
    return out


def _mean_se(rows):
    e = np.array([float(r["E"]) for r in rows])
    if e.size > 1:
        return float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size))
    return float(e[0]), float(rows[0]["E_stderr"])


def compare_losses(rows):
    """Seed-averaged E per (solver, N, omega) for both losses.

    The standard error of each seed mean is the between-seed one (it already
    contains the Monte Carlo noise); with a single seed the Monte Carlo
    standard error is used.  ``holds`` means Direct is lower by more than
    the combined standard error.
    """
    out = []
    for (solver, n, w), grp in _group(_ok(rows), ("solver", "N", "omega")).items():
        by_loss = _group(grp, ("loss_kind",))
        if ("cm",) not in by_loss or ("direct",) not in by_loss:
            continue
        e_cm, se_cm = _mean_se(by_loss[("cm",)])
        e_d, se_d = _mean_se(by_loss[("direct",)])
        se = math.hypot(se_cm, se_d)
        out.append({"solver": solver, "N": int(n), "omega": float(w), "seeds": len(by_loss[("cm",)]),
                    "E_cm": e_cm, "E_direct": e_d, "combined_se": se,
                    "holds": e_d < e_cm and (e_cm - e_d) > se})
    return out


def quality_flags(rows):
    """Per (seed, cell): is CM's SW2 lower than Direct's while its E is higher?"""
    out = []
    for (seed, solver, n, w), grp in _group(_ok(rows), ("seed", "solver", "N", "omega")).items():
        by = {r["loss_kind"]: r for r in grp}
        if "cm" not in by or "direct" not in by:
            continue
        cm, d = by["cm"], by["direct"]
        higher_E = float(cm["E"]) > float(d["E"])
        flags = {f"reversal_{s}step": higher_E and float(cm[f"sw2_{s}step"]) < float(d[f"sw2_{s}step"])
                 for s in (1, 2, 4)}
        out.append({"seed": int(seed), "solver": solver, "N": int(n), "omega": float(w),
                    **{f"sw2_{s}step_{k}": float(by[k][f"sw2_{s}step"]) for s in (1, 2, 4) for k in ("cm", "direct")},
                    **flags, "observed": any(flags.values())})
    return out


def omega_trend(rows):
    """Spearman correlation of (omega, E) per (loss, solver); reported, never asserted."""
    from scipy.stats import spearmanr

    out = {}
    for (loss, solver), grp in _group(_ok(rows), ("loss_kind", "solver")).items():
        w = [float(r["omega"]) for r in grp]
        e = [float(r["E"]) for r in grp]
        if len(set(w)) < 2:
            continue
        res = spearmanr(w, e)
        out[(loss, solver)] = (float(res.statistic if hasattr(res, "statistic") else res[0]), float(res.pvalue))
    return out


def write_analysis(out, rows):
    """comparison.csv and quality.csv next to a sweep CSV."""
    out = Path(out)
    comp = compare_losses(rows)
    _write_text(out / "comparison.csv", _csv_text(
        ("solver", "N", "omega", "seeds", "E_cm", "E_direct", "combined_se", "holds"),
        [{k: (repr(v) if isinstance(v, float) else v) for k, v in c.items()} for c in comp]))
    flags = quality_flags(rows)
    cols = ["seed", "solver", "N", "omega"] + [f"sw2_{s}step_{k}" for s in (1, 2, 4) for k in ("cm", "direct")] + \
        [f"reversal_{s}step" for s in (1, 2, 4)] + ["observed"]
    _write_text(out / "quality.csv", _csv_text(
        cols, [{k: (repr(v) if isinstance(v, float) else v) for k, v in f.items()} for f in flags]))
    return comp, flags


def report_from_row(row):
    """Inverse of :meth:`MetricReport.row` for the reported columns."""
    kw = {k: row[k] for k in ("run_id", "loss_kind", "solver")}
    kw.update(N=int(row["N"]), omega=float(row["omega"]), seed=int(row["seed"]),
              **{k: float(row[k]) for k in _METRICS})
    return MetricReport(**kw)


def replace_seed(cfg, seed):
    return cfg if seed is None else replace(cfg, seed=int(seed))
