"""Seeded end-to-end experiments built from a :class:`RunConfig`.

Each seed gets its own codebook and data suite so seeds differ in
everything, not only in initialization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .adapters import TaskType
from .config import RunConfig
from .model import UnifiedModel
from .training import (
    MetricsLog,
    Suite,
    SweepPoint,
    build_codec,
    conflict_sweep,
    replace_arch,
    run_mixed,
    run_three_stage,
    tap_probe,
)

SWEEP_RATIOS = (0.0, 0.25, 0.5, 1.0)


def seeded_suite(rc: RunConfig, seed: int):
    codec = build_codec(rc.model, seed, rc.codec.corpus_size)
    return codec, Suite.build(seed, codec, rc.data)


@dataclass
class PipelineComparison:
    seed: int
    staged: dict[str, float]
    mixed: dict[str, float]

    @property
    def comp_gap(self) -> float:
        return self.staged["comp_accuracy"] - self.mixed["comp_accuracy"]

    @property
    def gen_gap(self) -> float:
        return self.staged["gen_index_accuracy"] - self.mixed["gen_index_accuracy"]


def compare_pipelines(rc: RunConfig, seed: int, log: MetricsLog | None = None) -> PipelineComparison:
    """Three-stage H-LoRA against the mixed shared-LoRA baseline at equal total steps."""
    codec, suite = seeded_suite(rc, seed)
    staged = UnifiedModel(replace_arch(rc.model, "hlora"), codec, seed)
    s = run_three_stage(staged, suite, rc.plan, seed, log)["3g"]
    mixed = UnifiedModel(replace_arch(rc.model, "shared"), codec, seed)
    m = run_mixed(mixed, suite, rc.plan, seed, log)
    return PipelineComparison(seed, s, m)


def sweep(
    rc: RunConfig,
    arch: str,
    seeds: Iterable[int],
    ratios: Sequence[float] = SWEEP_RATIOS,
    steps: int | None = None,
    primary: str = "comp",
) -> list[SweepPoint]:
    points = []
    for seed in seeds:
        codec, suite = seeded_suite(rc, seed)
        points += conflict_sweep(
            ratios,
            arch,
            suite,
            rc.model,
            codec,
            rc.sweep_base_steps if steps is None else steps,
            seeds=(seed,),
            primary=primary,
            plan=rc.plan,
        )
    return points


def tap_losses(rc: RunConfig, seed: int, steps: int = 300) -> dict[tuple[TaskType, str], float]:
    """Val loss per (task, tap) after ``steps`` of stage-3 training on that tap."""
    codec, suite = seeded_suite(rc, seed)
    return {
        (task, tap): tap_probe(task, tap, suite, rc.model, codec, seed, steps, rc.plan)
        for task in TaskType
        for tap in ("concrete", "abstract")
    }
