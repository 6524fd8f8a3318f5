"""Which encoder tap suits which task.

Each task's adapter and plugins are trained on a forced tap for the same
budget.  Comprehension should prefer the deep (abstract) tap and
generation the shallow (concrete) tap.  Takes a couple of minutes.
"""

from hlora_lab.adapters import TaskType
from hlora_lab.config import RunConfig
from hlora_lab.experiments import tap_losses

rc = RunConfig()
losses = tap_losses(rc, seed=0)
for task in TaskType:
    c, a = losses[(task, "concrete")], losses[(task, "abstract")]
    best = "concrete" if c < a else "abstract"
    print(f"{task.value:4s}  concrete {c:.4f}  abstract {a:.4f}  -> {best}")
