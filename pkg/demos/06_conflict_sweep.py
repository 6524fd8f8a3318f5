"""Task conflict: add generation data next to a comprehension task.

A shared LoRA has to serve both tasks with the same weights, so more
generation data should pull comprehension accuracy down.  H-LoRA keeps a
plugin per task and should hold steady.  Takes several minutes.
"""

from hlora_lab.config import RunConfig
from hlora_lab.experiments import SWEEP_RATIOS, sweep
from hlora_lab.training import sweep_trend, write_sweep_csv

rc = RunConfig()
for arch in ("shared", "hlora"):
    points = sweep(rc, arch, seeds=(0,))
    write_sweep_csv(points, arch, f"demo_sweep_{arch}.csv")
    t = sweep_trend(points)
    row = "  ".join(f"{r:.2f}:{m:.3f}" for r, m in zip(SWEEP_RATIOS, t["medians"]))
    print(f"{arch:6s} {row}   spearman {t['spearman']:+.2f}  drop {t['degradation']:+.3f}")
