"""Three-stage H-LoRA training against one shared LoRA trained on everything.

Stage 1 teaches the alignment adapters and the image-token rows, stage 2
warms the plugins on a small mixture, stage 3 tunes each task's plugin on
its own data.  The baseline gets the same total step budget.  Writes the
metrics CSV to demo_metrics.csv.  Takes several minutes.
"""

from hlora_lab.config import RunConfig
from hlora_lab.experiments import compare_pipelines
from hlora_lab.training import MetricsLog

rc = RunConfig()
log = MetricsLog("demo-seed0", "demo_metrics.csv")
res = compare_pipelines(rc, seed=0, log=log)

print(f"{'metric':22s} {'staged':>8s} {'mixed':>8s}")
for key in sorted(res.staged):
    print(f"{key:22s} {res.staged[key]:8.3f} {res.mixed[key]:8.3f}")
print(f"\ncomp gap {res.comp_gap:+.3f}, gen gap {res.gen_gap:+.3f}")
