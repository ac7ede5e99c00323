"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget.

Seeds are fixed in advance: criterion k uses ``default_rng(k)`` for its own
draws, and the training criteria use master seeds 0, 1, 2.  Run with
``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion is
printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from pfode.config import RunConfig
from pfode.distill import ConsistencyHead, DistillConfig, GuidedTeacher, direct_cm_loss, train_student
from pfode.experiment import compare_losses, omega_trend, quality_flags, read_csv, run_cell, run_sweep
from pfode.metrics import draw_eval_noise, noise_floor, ode_error, projection_directions, sliced_wasserstein
from pfode.mixture import ring_mixture
from pfode.nn import Mlp
from pfode.schedule import NoiseSchedule, prior_sample
from pfode.solvers import SolverKind, f_solver, integrate
from pfode.cli import main

SEEDS = (0, 1, 2)
SOLVERS = ("ddim", "euler", "heun")


class Clock:
    def __enter__(self):
        self.cpu, self.wall = time.process_time(), time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.cpu = time.process_time() - self.cpu
        self.wall = time.perf_counter() - self.wall

    def __str__(self):
        return f"cpu {self.cpu:.1f}s, wall {self.wall:.1f}s"


def test_criterion_1_boundary_condition(acceptance_log):
    sch, ring = NoiseSchedule(), ring_mixture()
    eps = ring.eps_model(sch)
    heads = {}
    for loss in ("cm", "direct"):
        head = ConsistencyHead(Mlp(2, (32, 32), num_classes=2, rng=np.random.default_rng(1), zero_final=False))
        cfg = DistillConfig(loss=loss, N=10, steps=20, lr=1e-3)
        heads[loss], _ = train_student(cfg, eps, head, ring, sch, np.random.default_rng(1))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1000, 2)) * 3.0
    labels = rng.integers(0, 3, size=1000)  # includes the null class
    with Clock() as clk:
        worst = max(float(np.max(np.linalg.norm(h(x, 0.0, labels) - x, axis=1))) for h in heads.values())
    ok = worst <= 1e-12 and clk.cpu < 1.0
    acceptance_log(1, ok, f"max ||f(x,0)-x|| = {worst:.1e} over 1000 points, CM and Direct heads ({clk})")
    assert ok


def test_criterion_2_gradients(acceptance_log):
    rng = np.random.default_rng(2)
    worst = 0.0
    with Clock() as clk:
        for _ in range(10):
            net = Mlp(2, (32, 32, 32), num_classes=2, rng=rng, zero_final=False)
            x, t = rng.standard_normal((5, 2)), rng.uniform(0.05, 1.0, 5)
            labels, w = rng.integers(0, 3, 5), rng.standard_normal((5, 2))
            net.forward(x, t, labels)
            grads = net.backward(w)
            for p, g in zip(net.params, grads):
                fd = np.empty_like(p)
                for i in np.ndindex(p.shape):
                    keep = p[i]
                    p[i] = keep + 1e-6
                    up = float(np.sum(w * net.predict(x, t, labels)))
                    p[i] = keep - 1e-6
                    down = float(np.sum(w * net.predict(x, t, labels)))
                    p[i] = keep
                    fd[i] = (up - down) / 2e-6
                scale = max(np.linalg.norm(fd), 1e-12)
                worst = max(worst, float(np.linalg.norm(g - fd) / scale))
    ok = worst < 1e-5 and clk.cpu < 10.0
    acceptance_log(2, ok, f"worst relative gradient error {worst:.1e} over 10 trials, 3x32 net ({clk})")
    assert ok


def test_criterion_3_solver_orders(acceptance_log):
    ns = np.array([10, 20, 40, 80, 160])
    with Clock() as clk:
        slopes = {}
        for method in ("euler", "heun"):
            errs = [abs(integrate(lambda x, t: -x, 1.0, np.linspace(0.0, 1.0, n + 1), method) - math.exp(-1.0))
                    for n in ns]
            slopes[method] = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    ok = 0.9 <= slopes["euler"] <= 1.1 and 1.9 <= slopes["heun"] <= 2.1 and clk.cpu < 1.0
    acceptance_log(3, ok, f"order Euler {slopes['euler']:.3f}, Heun {slopes['heun']:.3f} ({clk})")
    assert ok


def test_criterion_4_oracle_sampling(acceptance_log):
    sch, ring = NoiseSchedule(), ring_mixture()
    rng = np.random.default_rng(4)
    with Clock() as clk:
        grid = sch.grid(200)
        x_T = prior_sample(sch, 2, rng, n=5000)
        samples = f_solver(ring.eps_model(sch), x_T, 200, 0, grid, SolverKind.HEUN, sch)
        dirs = projection_directions(2, 128, rng)
        truth, _ = ring.sample(5000, rng)
        sw = sliced_wasserstein(samples, truth, directions=dirs)
        floor = noise_floor(ring, 5000, rng, directions=dirs)
    ok = sw < 2.0 * floor and clk.cpu < 60.0
    acceptance_log(4, ok, f"analytic-score Heun N=200: SW2 {sw:.4f} vs floor {floor:.4f} "
                          f"(ratio {sw / floor:.2f}, limit 2) ({clk})")
    assert ok


def test_criterion_5_definitional_identity(acceptance_log, teacher):
    sch, ring = NoiseSchedule(), ring_mixture()
    guided = GuidedTeacher(teacher, 8.0)
    head = ConsistencyHead(Mlp(2, (32, 32), num_classes=2, rng=np.random.default_rng(5), zero_final=False))
    worst = 0.0
    with Clock() as clk:
        for kind in SOLVERS:
            cfg = DistillConfig(loss="direct", solver=kind, N=50)
            grid = sch.grid(50)
            E = ode_error(head, guided, grid, kind, sch, ring, 1000, np.random.default_rng(5))
            x_T, labels = draw_eval_noise(ring, sch, 1000, np.random.default_rng(5))
            loss, _ = direct_cm_loss(head, guided, np.zeros_like(x_T), labels, sch, grid, cfg, None,
                                     n=50, x_t=x_T)
            worst = max(worst, abs(loss - E))
    ok = worst <= 1e-10 and clk.cpu < 60.0
    acceptance_log(5, ok, f"|direct loss(n=N) - E| = {worst:.1e} for DDIM, Euler, Heun ({clk})")
    assert ok


# -- training criteria ------------------------------------------------------------

@pytest.fixture(scope="module")
def table1(tmp_path_factory):
    out = tmp_path_factory.mktemp("criterion6")
    with Clock() as clk:
        rows = run_sweep(RunConfig(), [100], [8.0], ["cm", "direct"], list(SOLVERS), list(SEEDS), out)
    return out, rows, clk


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("criterion7")
    with Clock() as clk:
        by_n = run_sweep(RunConfig(), [25, 50, 100, 200], [8.0], ["cm", "direct"], ["ddim"], list(SEEDS),
                         root / "n", cache=root / "cache")
        by_w = run_sweep(RunConfig(), [50], [1.0, 4.0, 8.0, 11.0], ["cm", "direct"], ["ddim"], list(SEEDS),
                         root / "omega", cache=root / "cache")
    return root, by_n, by_w, clk


def _fmt_comp(c):
    return f"{c['solver']} N={c['N']} w={c['omega']:g}: {c['E_direct']:.3f} vs {c['E_cm']:.3f} (se {c['combined_se']:.3f})"


@pytest.mark.slow
def test_criterion_6_E_ordering(acceptance_log, table1):
    _, rows, clk = table1
    comp = compare_losses(rows)
    for c in comp:
        print("  E direct vs cm:", _fmt_comp(c))
    ok = (len(comp) == 3 and all(c["holds"] for c in comp) and all(c["seeds"] == 3 for c in comp)
          and clk.cpu < 15 * 60)
    detail = "; ".join(f"{c['solver']} {c['E_direct']:.3f}<{c['E_cm']:.3f} (gap/se {(c['E_cm'] - c['E_direct']) / c['combined_se']:.1f})"
                       for c in comp)
    acceptance_log(6, ok, f"{detail} ({clk}, limit 900s)")
    assert ok


@pytest.mark.slow
def test_criterion_7_ablation(acceptance_log, ablation):
    root, by_n, by_w, clk = ablation
    full = len(by_n) == 24 and len(by_w) == 24
    failed = [r for r in by_n + by_w if r["status"] != "ok"]
    comp = compare_losses(by_n) + compare_losses(by_w)
    for c in comp:
        print("  E direct vs cm:", _fmt_comp(c))
    held = sum(c["holds"] for c in comp)
    trend = omega_trend(by_w)
    rho = {k[0]: v[0] for k, v in trend.items()}
    for (loss, solver), (r, p) in trend.items():
        print(f"  spearman(omega, E) {loss}/{solver}: rho={r:.3f} p={p:.3g}")
    on_disk = read_csv(root / "n" / "sweep.csv") + read_csv(root / "omega" / "sweep.csv")
    ok = full and not failed and len(comp) == 8 and held >= 6 and len(on_disk) == 48 and clk.cpu < 3600
    acceptance_log(7, ok, f"{len(by_n) + len(by_w)} cells, {len(failed)} failed, ordering holds in "
                          f"{held}/8 cells; spearman(omega,E) cm {rho.get('cm', float('nan')):.2f}, "
                          f"direct {rho.get('direct', float('nan')):.2f} (reported only) ({clk}, limit 3600s)")
    assert ok


@pytest.mark.slow
def test_criterion_8_sample_quality_reported(acceptance_log, table1, ablation):
    rows = table1[1] + ablation[1] + ablation[2]
    reported = all(r["status"] == "ok" and all(math.isfinite(float(r[f"sw2_{s}step"])) and float(r[f"sw2_{s}step"]) >= 0
                                               for s in (1, 2, 4)) for r in rows)
    flags = quality_flags(table1[1]) + quality_flags(ablation[1]) + quality_flags(ablation[2])
    for f in flags:
        print(f"  seed {f['seed']} {f['solver']} N={f['N']} w={f['omega']:g}: SW2 1/2/4 cm "
              f"{f['sw2_1step_cm']:.3f}/{f['sw2_2step_cm']:.3f}/{f['sw2_4step_cm']:.3f} direct "
              f"{f['sw2_1step_direct']:.3f}/{f['sw2_2step_direct']:.3f}/{f['sw2_4step_direct']:.3f} "
              f"reversal {'observed' if f['observed'] else 'not observed'}")
    observed = sum(f["observed"] for f in flags)
    ok = reported and len(flags) == len(rows) // 2
    acceptance_log(8, ok, f"SW2 at 1/2/4 steps reported for {len(rows)} runs; quality reversal observed in "
                          f"{observed}/{len(flags)} paired runs (logged, not asserted)")
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(acceptance_log, table1, tmp_path):
    out, rows, _ = table1
    # a full-budget cell repeated cold, teacher included
    cell = RunConfig().with_cell(loss="cm", solver="heun", seed=1)
    run_cell(cell, tmp_path / "cold", cache=tmp_path / "cache")
    same = [(tmp_path / "cold" / f).read_bytes() == (out / "runs" / cell.run_id / f).read_bytes()
            for f in ("metrics.csv", "loss_trace.csv", "config.ini", "student.bin")]
    # every CSV of a repeated command-line sweep
    cfg = tmp_path / "small.ini"
    cfg.write_text("[teacher]\nsteps = 300\n[distill]\nsteps = 100\nN = 20\n[eval]\nn_ode = 200\nn_samples = 1000\n")
    for d in ("a", "b"):
        main(["sweep", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / d), "--solvers", "ddim,heun"])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    diff = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = all(same) and not diff and len(files) > 10
    acceptance_log(9, ok, f"full-budget cell rerun identical: {all(same)}; repeated sweep: "
                          f"{len(files) - len(diff)}/{len(files)} CSVs byte-identical")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
