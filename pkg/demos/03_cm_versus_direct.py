"""
Consistency distillation against direct supervision
====================================================

Both students see the same initialisation, batches and evaluation noise
(the loss kind is not part of the random-stream key), so the difference in
E below comes from the loss alone.  Budgets are cut down to run in a few
minutes; the full-budget comparison is acceptance criterion 6.
"""

from dataclasses import replace
import tempfile

from pfode.config import RunConfig, TeacherConfig
from pfode.experiment import compare_losses, quality_flags, run_sweep

base = replace(RunConfig(), teacher=TeacherConfig(steps=3000)).with_cell(steps=800)

with tempfile.TemporaryDirectory() as out:
    rows = run_sweep(base, [50], [8.0], ["cm", "direct"], ["ddim"], [0], out)

for r in rows:
    print(f"{r['loss_kind']:>6}: E={float(r['E']):.3f} +- {float(r['E_stderr']):.3f}  "
          f"SW2 1/2/4 steps = {float(r['sw2_1step']):.3f} / {float(r['sw2_2step']):.3f} / "
          f"{float(r['sw2_4step']):.3f}  (floor {float(r['noise_floor']):.3f})")

(c,) = compare_losses(rows)
print(f"direct below cm by more than one standard error: {c['holds']}")
(f,) = quality_flags(rows)
print(f"cm better on samples despite higher E: {'observed' if f['observed'] else 'not observed'}")
