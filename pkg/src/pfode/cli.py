"""``pfode`` command line: train-teacher, distill, eval, sweep and plot."""

import argparse
import logging
from pathlib import Path
import sys

from .config import parse_config
from .distill import LossKind
from .errors import PfodeError
from .experiment import (
    _teacher_from_file,
    distill_cell,
    eval_cell,
    fit_teacher,
    load_student,
    obtain_teacher,
    omega_trend,
    replace_seed,
    run_sweep,
    write_analysis,
    write_metrics,
    write_student,
    write_teacher,
)
from .plots import emit_plots
from .solvers import SolverKind

__all__ = ["main", "build_parser"]


def _list(cast):
    def parse(text):
        try:
            items = [cast(v.strip()) for v in text.split(",") if v.strip()]
        except (ValueError, PfodeError) as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return items
    return parse


def build_parser():
    p = argparse.ArgumentParser(prog="pfode", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="config file (defaults when omitted)")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides [run] seed)")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides [run] out)")
        return sp

    tt = common(sub.add_parser("train-teacher", help="train the conditional noise teacher"))
    tt.set_defaults(func=_train_teacher)

    ds = common(sub.add_parser("distill", help="train one student (teacher trained or loaded)"))
    ds.add_argument("--teacher", type=Path, default=None, help="teacher.bin to distill from")
    ds.set_defaults(func=_distill)

    ev = common(sub.add_parser("eval", help="evaluate a trained student"))
    ev.add_argument("--teacher", type=Path, default=None)
    ev.add_argument("--student", type=Path, default=None, help="student.bin (default: <out>/student.bin)")
    ev.set_defaults(func=_eval)

    sw = common(sub.add_parser("sweep", help="Cartesian sweep of distillation runs"))
    sw.add_argument("--grid-n", type=_list(int), default=None)
    sw.add_argument("--grid-omega", type=_list(float), default=None)
    sw.add_argument("--solvers", type=_list(lambda v: SolverKind.parse(v).value), default=None)
    sw.add_argument("--losses", type=_list(lambda v: LossKind.parse(v).value), default=["cm", "direct"])
    sw.add_argument("--seeds", type=_list(int), default=None, help="master seeds (default: --seed)")
    sw.add_argument("--workers", type=int, default=None)
    sw.add_argument("--cache", type=Path, default=None, help="shared run/teacher cache (default: --out)")
    sw.set_defaults(func=_sweep)

    pl = sub.add_parser("plot", help="plot data and SVG charts from a sweep CSV")
    pl.add_argument("csv", type=Path)
    pl.add_argument("--out", type=Path, default=None)
    pl.set_defaults(func=lambda a: _print_paths(emit_plots(a.csv, a.out)))
    return p


def _setup(args):
    cfg = replace_seed(parse_config(args.config), args.seed)
    out = args.out if args.out is not None else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _teacher(args, cfg, out):
    if getattr(args, "teacher", None) is not None:
        return _teacher_from_file(args.teacher, cfg)
    return obtain_teacher(cfg, out)


def _print_paths(paths):
    for p in paths:
        print(p)


def _train_teacher(args):
    cfg, out = _setup(args)
    teacher, trace = fit_teacher(cfg)
    write_teacher(out, cfg, teacher, trace)
    print(out / "teacher.bin")


def _distill(args):
    cfg, out = _setup(args)
    head, trace = distill_cell(cfg, _teacher(args, cfg, out))
    write_student(out, cfg, head, trace)
    print(out / "student.bin")


def _eval(args):
    cfg, out = _setup(args)
    head = load_student(args.student if args.student is not None else out / "student.bin")
    report = eval_cell(cfg, head, _teacher(args, cfg, out))
    write_metrics(out, cfg, report)
    sys.stdout.write(report.to_csv())


def _sweep(args):
    cfg, out = _setup(args)
    seeds = args.seeds if args.seeds is not None else [cfg.seed]
    workers = args.workers if args.workers is not None else cfg.workers
    rows = run_sweep(cfg, args.grid_n or [cfg.distill.N], args.grid_omega or [cfg.omega], args.losses,
                     args.solvers or [cfg.distill.solver.value], seeds, out, cache=args.cache,
                     workers=workers)
    comp, flags = write_analysis(out, rows)
    emit_plots(out / "sweep.csv", out / "plots")
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} cells, {failed} failed -> {out / 'sweep.csv'}")
    for c in comp:
        print(f"  {c['solver']:5s} N={c['N']:<4d} omega={c['omega']:<5g} E_cm={c['E_cm']:.4g} "
              f"E_direct={c['E_direct']:.4g} se={c['combined_se']:.2g} direct<cm: {c['holds']}")
    for (loss, solver), (rho, pval) in omega_trend(rows).items():
        print(f"  spearman(omega, E) {loss}/{solver}: rho={rho:.3f} p={pval:.3g}")
    observed = sum(f["observed"] for f in flags)
    if flags:
        print(f"  quality reversal observed in {observed}/{len(flags)} paired cells")
    return 1 if failed else 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args) or 0
    except PfodeError as exc:
        print(f"pfode: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
