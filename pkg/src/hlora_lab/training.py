"""Three-stage learning, the mixed-training baseline and the conflict sweep.

Stage protocol (groups not listed stay frozen; backbone and vision never train):

=====  =======================================================================
1c     comprehension adapter
1g     generation adapter, generation plugins, image-token rows of embed/head
2      embedding and head, on a small mixture of both tasks
3c     comprehension adapter and plugins
3g     generation adapter and plugins
mixed  shared adapter, shared LoRA, embedding, head (single stream)
=====  =======================================================================

Every stage is audited: frozen groups must have no gradient and end
bit-identical, trainable groups must have gradients and must have moved.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .adapters import TaskType
from .data import Dataset, Sample, SyntheticTask, TaskKind, make_dataset
from .model import JointSequence, ModelConfig, UnifiedModel, group_of
from .optim import Adam
from .rng import stream

logger = logging.getLogger(__name__)

GROUPS = (
    "vision",
    "backbone",
    "embedding",
    "head",
    "comp_adapter",
    "gen_adapter",
    "comp_plugins",
    "gen_plugins",
    "shared_adapter",
    "shared_lora",
)


class StageMaskViolation(RuntimeError):
    pass


class PipelineOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageMask:
    trainable: frozenset[str]
    image_rows_only: bool = False  # embedding rows / head columns limited to image tokens

    def __post_init__(self):
        if {"vision", "backbone"} & self.trainable:
            raise ValueError("vision encoder and backbone are frozen in every stage")
        unknown = self.trainable - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")


STAGE_MASKS = {
    "1c": StageMask(frozenset({"comp_adapter"})),
    "1g": StageMask(frozenset({"gen_adapter", "gen_plugins", "embedding", "head"}), image_rows_only=True),
    "2": StageMask(frozenset({"embedding", "head"})),
    "3c": StageMask(frozenset({"comp_adapter", "comp_plugins"})),
    "3g": StageMask(frozenset({"gen_adapter", "gen_plugins"})),
    "mixed": StageMask(frozenset({"shared_adapter", "shared_lora", "embedding", "head"}), image_rows_only=True),
    "sweep-hlora": StageMask(
        frozenset({"comp_adapter", "gen_adapter", "comp_plugins", "gen_plugins", "embedding", "head"}),
        image_rows_only=True,
    ),
}

STAGE_ORDER = ("1c", "1g", "2", "3c", "3g")
# stages that must already be in a checkpoint before a stage may run
STAGE_PREREQS = {"1c": (), "1g": (), "2": ("1c", "1g"), "3c": ("2",), "3g": ("2",), "mixed": ()}


def check_stage_order(stage: str, completed: Sequence[str]) -> None:
    if stage not in STAGE_PREREQS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {sorted(STAGE_PREREQS)}")
    if stage in completed:
        raise PipelineOrderError(f"stage {stage} already completed in this checkpoint")
    if stage == "mixed" and completed:
        raise PipelineOrderError("the mixed baseline starts from a fresh model, not a staged checkpoint")
    if "mixed" in completed:
        raise PipelineOrderError("a mixed-baseline checkpoint cannot continue into the staged pipeline")
    missing = [s for s in STAGE_PREREQS[stage] if s not in completed]
    if missing:
        raise PipelineOrderError(f"stage {stage} needs completed stage(s) {', '.join(missing)} first")


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    lr: dict[str, float] = field(
        default_factory=lambda: {"adapter": 3e-3, "plugins": 3e-3, "embedding": 3e-3, "head": 3e-3}
    )
    schedule: str = "warmup_cosine"
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")
        if self.schedule not in ("warmup_cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def lr_for(self, group: str) -> float:
        if group.endswith("adapter"):
            return self.lr["adapter"]
        if group.endswith("plugins") or group == "shared_lora":
            return self.lr["plugins"]
        return self.lr[group]

    def multiplier(self, step: int) -> float:
        if self.schedule == "constant":
            return 1.0
        warm = max(1, int(round(self.warmup_frac * self.steps)))
        if step < warm:
            return (step + 1) / warm
        span = max(1, self.steps - warm)
        return 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


# ---------------------------------------------------------------------------
# logging


METRICS_TAG = "# hlora-lab metrics v1"


class MetricsLog:
    """Rows ``run_id,stage,step,task,loss,metric_name,metric_value``; appended to ``path`` if set."""

    COLUMNS = ("run_id", "stage", "step", "task", "loss", "metric_name", "metric_value")

    def __init__(self, run_id: str = "run", path: str | os.PathLike | None = None):
        self.run_id = run_id
        self.path = path
        self.rows: list[dict] = []

    def log(self, stage: str, step: int, task: str, loss: float | None, metric_name: str = "", metric_value=None):
        row = {
            "run_id": self.run_id,
            "stage": stage,
            "step": step,
            "task": task,
            "loss": "" if loss is None else f"{loss:.10g}",
            "metric_name": metric_name,
            "metric_value": "" if metric_value is None else f"{metric_value:.10g}",
        }
        self.rows.append(row)
        if self.path is not None:
            new = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
            with open(self.path, "a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
                if new:
                    fh.write(METRICS_TAG + "\n")
                    w.writeheader()
                w.writerow(row)


# ---------------------------------------------------------------------------
# optimisation


def configure_trainable(model: UnifiedModel, mask: StageMask) -> tuple[dict[str, ad.Tensor], dict[str, np.ndarray]]:
    """Set ``requires_grad`` per the mask; return trainable params and row masks."""
    params = model.named_parameters()
    trainable = {}
    row_masks = {}
    image_ids = model.vocab.image_token_ids()
    for name, t in params.items():
        flag = group_of(name) in mask.trainable
        t.requires_grad = flag
        t.grad = None
        if flag:
            trainable[name] = t
            if mask.image_rows_only and name in ("embed.weight", "head.weight"):
                m = np.zeros_like(t.data)
                if name == "embed.weight":
                    m[image_ids, :] = 1.0
                else:
                    m[:, image_ids] = 1.0
                row_masks[name] = m
    return trainable, row_masks


def audit_grads(model: UnifiedModel, mask: StageMask) -> None:
    for name, t in model.named_parameters().items():
        g = group_of(name)
        if g in mask.trainable and t.grad is None:
            # a trainable tensor untouched by this batch (e.g. the other task's adapter) is fine
            continue
        if g not in mask.trainable and t.grad is not None:
            raise StageMaskViolation(f"frozen parameter {name} ({g}) received a gradient")


def audit_changes(model: UnifiedModel, before: dict[str, np.ndarray], mask: StageMask, stage: str) -> dict[str, bool]:
    """Frozen groups bit-identical, trainable groups moved, row masks respected."""
    moved: dict[str, bool] = {}
    image_ids = model.vocab.image_token_ids()
    other = np.setdiff1d(np.arange(model.vocab.size), image_ids)
    for name, t in model.named_parameters().items():
        g = group_of(name)
        changed = not np.array_equal(before[name], t.data)
        moved[g] = moved.get(g, False) or changed
        if g not in mask.trainable and changed:
            raise StageMaskViolation(f"stage {stage}: frozen parameter {name} ({g}) changed")
        if mask.image_rows_only and name == "embed.weight":
            if not np.array_equal(before[name][other], t.data[other]):
                raise StageMaskViolation(f"stage {stage}: text rows of the embedding changed")
        if mask.image_rows_only and name == "head.weight":
            if not np.array_equal(before[name][:, other], t.data[:, other]):
                raise StageMaskViolation(f"stage {stage}: text columns of the head changed")
    return moved


def to_sequences(model: UnifiedModel, samples: Sequence[Sample], with_response: bool = True) -> list[JointSequence]:
    return [
        model.build_sequence(s.image, s.text, s.response if with_response else None, s.task) for s in samples
    ]


def batch_loss(model: UnifiedModel, samples: Sequence[Sample]) -> ad.Tensor:
    """Token-weighted mean loss; each task's rows go through their own plugin."""
    by_task: dict[TaskType, list[Sample]] = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s)
    if model.cfg.arch == "shared" or len(by_task) == 1:
        return model.loss(to_sequences(model, samples), samples[0].task)
    losses, weights = [], []
    for task, group in by_task.items():
        seqs = to_sequences(model, group)
        losses.append(model.loss(seqs, task))
        weights.append(sum(int(s.loss_mask[1:].sum()) for s in seqs))
    total = sum(weights)
    out = ad.scale(losses[0], weights[0] / total)
    for loss, w in zip(losses[1:], weights[1:]):
        out = ad.add(out, ad.scale(loss, w / total))
    return out


def train(
    model: UnifiedModel,
    samples: Sequence[Sample],
    mask: StageMask,
    cfg: TrainConfig,
    stage: str,
    log: MetricsLog | None = None,
) -> list[float]:
    """Run ``cfg.steps`` Adam steps on uniformly drawn batches; returns the loss trace."""
    if not samples:
        raise ValueError(f"stage {stage}: no training samples")
    trainable, row_masks = configure_trainable(model, mask)
    before = {name: t.data.copy() for name, t in model.named_parameters().items()}
    lrs = {name: cfg.lr_for(group_of(name)) for name in trainable}
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    rng = stream(cfg.seed, f"batches.{stage}")
    losses = []
    for step in range(cfg.steps):
        batch = [samples[i] for i in rng.integers(0, len(samples), size=cfg.batch_size)]
        for t in trainable.values():
            t.grad = None
        loss = batch_loss(model, batch)
        loss.backward()
        audit_grads(model, mask)
        grads = [t.grad for t in trainable.values() if t.grad is not None]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if cfg.clip_norm and norm > cfg.clip_norm:
            logger.debug("stage %s step %d: clipping grad norm %.3g", stage, step, norm)
            for g in grads:
                g *= cfg.clip_norm / norm
        mult = cfg.multiplier(step)
        opt.step(trainable, {n: lr * mult for n, lr in lrs.items()}, row_masks)
        losses.append(loss.item())
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.log(stage, step, _task_label(batch), loss.item(), "grad_norm", norm)
    for t in model.named_parameters().values():
        t.grad = None
    if cfg.steps:
        moved = audit_changes(model, before, mask, stage)
        stale = [g for g in mask.trainable if g in moved and not moved[g]]
        if stale:
            raise StageMaskViolation(f"stage {stage}: trainable groups never updated: {stale}")
    for t in model.named_parameters().values():
        t.requires_grad = False
    model._state_cache.clear()
    return losses


def _task_label(batch: Sequence[Sample]) -> str:
    tasks = sorted({s.task.value for s in batch})
    return "+".join(tasks)


# ---------------------------------------------------------------------------
# evaluation


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i : i + n]


def val_loss(model: UnifiedModel, samples: Sequence[Sample], batch: int = 64) -> float:
    """Token-weighted teacher-forced loss over ``samples``."""
    total, count = 0.0, 0
    with ad.no_grad():
        for chunk in _chunks(list(samples), batch):
            seqs = to_sequences(model, chunk)
            n = sum(int(s.loss_mask[1:].sum()) for s in seqs)
            total += model.loss(seqs, chunk[0].task).item() * n
            count += n
    return total / count


def comp_accuracy(model: UnifiedModel, samples: Sequence[Sample], batch: int = 64) -> float:
    """Exact match of the greedily decoded answer (EOS included)."""
    hits = 0
    for chunk in _chunks(list(samples), batch):
        prompts = to_sequences(model, chunk, with_response=False)
        results = model.generate(prompts, TaskType.COMPREHENSION, max_new=4, strict=False)
        hits += sum(r.tokens == list(s.response) for r, s in zip(results, chunk))
    return hits / len(samples)


def structural_score(a: np.ndarray, b: np.ndarray, c1: float = 1e-4, c2: float = 9e-4) -> float:
    """Global SSIM-style similarity of two images in [0, 1]."""
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - ma) * (b - mb)).mean()
    return float((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))


def gen_scores(model: UnifiedModel, samples: Sequence[Sample], batch: int = 64) -> dict[str, float]:
    """Index accuracy, pixel MSE and structural score of constrained greedy generations."""
    acc, mse, ssim = [], [], []
    for chunk in _chunks(list(samples), batch):
        prompts = to_sequences(model, chunk, with_response=False)
        for res, s in zip(model.generate(prompts, TaskType.GENERATION), chunk):
            target = np.asarray(s.response.indices)
            acc.append(float((np.asarray(res.indices.indices) == target).mean()))
            mse.append(float(((res.image.grid - s.target.grid) ** 2).mean()))
            ssim.append(structural_score(res.image.grid, s.target.grid))
    return {"index_accuracy": float(np.mean(acc)), "mse": float(np.mean(mse)), "ssim": float(np.mean(ssim))}


# ---------------------------------------------------------------------------
# data suite


@dataclass
class SuiteSizes:
    caption: int = 600
    comp: int = 600
    recon: int = 300
    gen_text: int = 300
    gen_transform: int = 300
    val: int = 200


@dataclass
class Suite:
    caption: Dataset
    comp: Dataset
    recon: Dataset
    gen_text: Dataset
    gen_transform: Dataset

    @classmethod
    def build(cls, seed: int, codec, sizes: SuiteSizes | None = None) -> "Suite":
        sz = sizes or SuiteSizes()
        return cls(
            make_dataset(SyntheticTask(TaskKind.COMP_QA, seed + 104729, sz.caption, sz.val, questions=("describe",)), codec),
            make_dataset(SyntheticTask(TaskKind.COMP_QA, seed, sz.comp, sz.val), codec),
            make_dataset(SyntheticTask(TaskKind.GEN_TRANSFORM, seed + 7919, sz.recon, sz.val, transforms=("recon",)), codec),
            make_dataset(SyntheticTask(TaskKind.GEN_FROM_TEXT, seed, sz.gen_text, sz.val), codec),
            make_dataset(SyntheticTask(TaskKind.GEN_TRANSFORM, seed, sz.gen_transform, sz.val), codec),
        )

    @property
    def comp_train(self) -> list[Sample]:
        return self.comp.train

    @property
    def gen_train(self) -> list[Sample]:
        return self.gen_text.train + self.gen_transform.train

    @property
    def comp_val(self) -> list[Sample]:
        return self.comp.val

    @property
    def gen_val(self) -> list[Sample]:
        half = len(self.gen_text.val) // 2
        return self.gen_text.val[:half] + self.gen_transform.val[: len(self.gen_transform.val) - half]

    def stage2_mixture(self, frac: float = 0.05, seed: int = 0) -> list[Sample]:
        """``frac`` of the combined stage-3 data, split evenly between the tasks."""
        per_task = max(1, int(round(frac * (len(self.comp_train) + len(self.gen_train)) / 2)))
        rng = stream(seed, "stage2.mixture")
        comp = [self.comp_train[i] for i in rng.choice(len(self.comp_train), per_task, replace=False)]
        gen = [self.gen_train[i] for i in rng.choice(len(self.gen_train), per_task, replace=False)]
        return comp + gen


# ---------------------------------------------------------------------------
# stages


@dataclass
class StagePlan:
    steps: dict[str, int] = field(default_factory=lambda: {"1c": 200, "1g": 400, "2": 100, "3c": 400, "3g": 600})
    batch_size: int = 16
    lr: dict[str, float] = field(
        default_factory=lambda: {"adapter": 3e-3, "plugins": 3e-3, "embedding": 3e-3, "head": 3e-3}
    )
    stage2_lr: dict[str, float] = field(
        default_factory=lambda: {"adapter": 3e-3, "plugins": 3e-3, "embedding": 1e-3, "head": 1e-3}
    )
    stage2_frac: float = 0.05
    clip_norm: float = 1.0

    @property
    def total_steps(self) -> int:
        return sum(self.steps[s] for s in STAGE_ORDER)

    def train_config(self, stage: str, seed: int, steps: int | None = None) -> TrainConfig:
        return TrainConfig(
            steps=self.steps.get(stage, 0) if steps is None else steps,
            batch_size=self.batch_size,
            lr=dict(self.stage2_lr if stage == "2" else self.lr),
            schedule="constant" if stage == "2" else "warmup_cosine",
            clip_norm=self.clip_norm,
            seed=seed,
        )


def _require_arch(model: UnifiedModel, arch: str) -> None:
    if model.cfg.arch != arch:
        raise ValueError(f"this stage needs a {arch!r} model, got {model.cfg.arch!r}")


def run_stage1_comp(model, data: Sequence[Sample], cfg: TrainConfig, log: MetricsLog | None = None) -> dict:
    _require_arch(model, "hlora")
    train(model, data, STAGE_MASKS["1c"], cfg, "1c", log)
    return model.state_dict()


def run_stage1_gen(model, data: Sequence[Sample], cfg: TrainConfig, log: MetricsLog | None = None) -> dict:
    _require_arch(model, "hlora")
    train(model, data, STAGE_MASKS["1g"], cfg, "1g", log)
    return model.state_dict()


def run_stage1(model, comp_data, gen_data, cfg_comp: TrainConfig, cfg_gen: TrainConfig, log=None) -> dict:
    run_stage1_comp(model, comp_data, cfg_comp, log)
    return run_stage1_gen(model, gen_data, cfg_gen, log)


def run_stage2(model, mixed_data: Sequence[Sample], cfg: TrainConfig, log: MetricsLog | None = None) -> dict:
    _require_arch(model, "hlora")
    if len({s.task for s in mixed_data}) < 2:
        raise ValueError("stage 2 needs samples of both task types")
    train(model, mixed_data, STAGE_MASKS["2"], cfg, "2", log)
    return model.state_dict()


def run_stage3_comp(model, data: Sequence[Sample], cfg: TrainConfig, log: MetricsLog | None = None) -> dict:
    _require_arch(model, "hlora")
    train(model, data, STAGE_MASKS["3c"], cfg, "3c", log)
    return model.state_dict()


def run_stage3_gen(model, data: Sequence[Sample], cfg: TrainConfig, log: MetricsLog | None = None) -> dict:
    _require_arch(model, "hlora")
    train(model, data, STAGE_MASKS["3g"], cfg, "3g", log)
    return model.state_dict()


def run_stage3(model, comp_data, gen_data, cfg_comp: TrainConfig, cfg_gen: TrainConfig, log=None) -> dict:
    run_stage3_comp(model, comp_data, cfg_comp, log)
    return run_stage3_gen(model, gen_data, cfg_gen, log)


def run_mixed_baseline(model, data_both: Sequence[Sample], cfg: TrainConfig, log: MetricsLog | None = None) -> dict:
    _require_arch(model, "shared")
    train(model, data_both, STAGE_MASKS["mixed"], cfg, "mixed", log)
    return model.state_dict()


def stage_data(suite: Suite, stage: str, plan: StagePlan, seed: int) -> list[Sample]:
    if stage == "1c":
        return suite.caption.train
    if stage == "3c":
        return suite.comp_train
    if stage == "1g":
        return suite.recon.train
    if stage == "3g":
        return suite.gen_train + suite.recon.train
    if stage == "2":
        return suite.stage2_mixture(plan.stage2_frac, seed)
    if stage == "mixed":
        return suite.caption.train + suite.comp_train + suite.gen_train + suite.recon.train
    raise ValueError(f"unknown stage {stage!r}")


def evaluate(model: UnifiedModel, suite: Suite) -> dict[str, float]:
    g = gen_scores(model, suite.gen_val)
    return {
        "comp_accuracy": comp_accuracy(model, suite.comp_val),
        "gen_index_accuracy": g["index_accuracy"],
        "gen_mse": g["mse"],
        "gen_ssim": g["ssim"],
    }


def run_three_stage(
    model: UnifiedModel,
    suite: Suite,
    plan: StagePlan,
    seed: int,
    log: MetricsLog | None = None,
    evaluate_each: bool = False,
) -> dict[str, dict[str, float]]:
    """Stages 1c, 1g, 2, 3c, 3g in order; returns metrics (after each stage if asked)."""
    runners = {
        "1c": run_stage1_comp,
        "1g": run_stage1_gen,
        "2": run_stage2,
        "3c": run_stage3_comp,
        "3g": run_stage3_gen,
    }
    history = {}
    for stage in STAGE_ORDER:
        runners[stage](model, stage_data(suite, stage, plan, seed), plan.train_config(stage, seed), log)
        if evaluate_each or stage == STAGE_ORDER[-1]:
            history[stage] = evaluate(model, suite)
            if log is not None:
                for k, v in history[stage].items():
                    log.log(stage, plan.steps[stage], "eval", None, k, v)
    return history


def run_mixed(
    model: UnifiedModel, suite: Suite, plan: StagePlan, seed: int, log: MetricsLog | None = None
) -> dict[str, float]:
    """Mixed-training baseline with the same total step budget as the three stages."""
    cfg = plan.train_config("mixed", seed, steps=plan.total_steps)
    run_mixed_baseline(model, stage_data(suite, "mixed", plan, seed), cfg, log)
    metrics = evaluate(model, suite)
    if log is not None:
        for k, v in metrics.items():
            log.log("mixed", cfg.steps, "eval", None, k, v)
    return metrics


# ---------------------------------------------------------------------------
# conflict sweep


@dataclass
class SweepPoint:
    ratio: float
    seed: int
    comp_metric: float
    gen_metric: float


def conflict_sweep(
    ratios: Sequence[float],
    arch: str,
    suite: Suite,
    model_cfg: ModelConfig,
    codec,
    base_steps: int,
    seeds: Iterable[int] = (0,),
    primary: str = "comp",
    plan: StagePlan | None = None,
) -> list[SweepPoint]:
    """Fixed primary-task data plus ``ratio`` times as much other-task data.

    Every run takes ``base_steps`` optimizer steps with batches of
    ``batch_size * (1 + ratio)``, so each step holds the same expected number
    of primary samples at every ratio; only the interference changes.
    """
    plan = plan or StagePlan()
    if primary not in ("comp", "gen"):
        raise ValueError("primary is 'comp' or 'gen'")
    prim = suite.comp_train if primary == "comp" else suite.gen_train
    other = suite.gen_train if primary == "comp" else suite.comp_train
    points = []
    for seed in seeds:
        for ratio in ratios:
            if not 0.0 <= ratio <= 1.0:
                raise ValueError("ratios must lie in [0, 1]")
            n_other = int(round(ratio * len(prim)))
            rng = stream(seed, f"sweep.{ratio}")
            extra = [other[i] for i in rng.choice(len(other), n_other, replace=n_other > len(other))] if n_other else []
            cfg = replace_arch(model_cfg, arch)
            model = UnifiedModel(cfg, codec, seed)
            mask = sweep_mask(cfg.arch, primary, with_other=bool(extra))
            tc = plan.train_config("mixed", seed, steps=base_steps)
            tc.batch_size = int(round(plan.batch_size * (1 + ratio)))
            train(model, list(prim) + extra, mask, tc, f"sweep-{arch}-{ratio}")
            points.append(
                SweepPoint(
                    ratio,
                    seed,
                    comp_accuracy(model, suite.comp_val),
                    gen_scores(model, suite.gen_val)["index_accuracy"],
                )
            )
    return points


def sweep_mask(arch: str, primary: str, with_other: bool) -> StageMask:
    """Single-stream mask; under gating only the banks of tasks present in the data train."""
    if with_other:
        return STAGE_MASKS["mixed" if arch == "shared" else "sweep-hlora"]
    own = {"shared_adapter", "shared_lora"} if arch == "shared" else {f"{primary}_adapter", f"{primary}_plugins"}
    # comprehension-only data never looks up an image-token embedding row
    rows = {"head"} if primary == "comp" else {"embedding", "head"}
    return StageMask(frozenset(own | rows), image_rows_only=True)


def replace_arch(cfg: ModelConfig, arch: str) -> ModelConfig:
    from dataclasses import replace

    return replace(cfg, arch="shared" if arch in ("shared", "shared-lora") else "hlora")


def sweep_trend(points: Sequence[SweepPoint], metric: str = "comp_metric") -> dict[str, float]:
    """Median metric per ratio, its Spearman correlation with ratio, and the 0 -> 1 drop."""
    ratios = sorted({p.ratio for p in points})
    med = [float(np.median([getattr(p, metric) for p in points if p.ratio == r])) for r in ratios]
    rho = float(stats.spearmanr(ratios, med).statistic) if len(set(med)) > 1 else 0.0
    return {"spearman": rho, "degradation": med[0] - med[-1], "medians": med, "ratios": ratios}


def write_sweep_csv(points: Sequence[SweepPoint], arch: str, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# hlora-lab sweep v1\n")
        w = csv.writer(fh)
        w.writerow(["arch", "ratio", "seed", "comp_metric", "gen_metric"])
        for p in points:
            w.writerow([arch, f"{p.ratio:g}", p.seed, f"{p.comp_metric:.10g}", f"{p.gen_metric:.10g}"])


# ---------------------------------------------------------------------------
# construction helpers


def build_codec(model_cfg: ModelConfig, seed: int, corpus_size: int = 400):
    """Codebook fitted on a seeded scene corpus."""
    from .data import codec_corpus
    from .vq import VQCodec

    return VQCodec.fit(
        codec_corpus(seed, corpus_size),
        model_cfg.vq.K,
        model_cfg.vq.d_code,
        model_cfg.vision.patch_size,
        model_cfg.text_vocab_size,
        stream(seed, "codec"),
    )


def codec_from_state(state: dict[str, np.ndarray], model_cfg: ModelConfig):
    from .vq import Codebook, PatchProjection, VQCodec

    return VQCodec(
        Codebook(np.asarray(state["vq.codes"], dtype=np.float64)),
        PatchProjection(np.asarray(state["vq.projection"], dtype=np.float64), model_cfg.vision.patch_size),
        model_cfg.vocab,
    )


def tap_probe(
    task: TaskType,
    tap: str,
    suite: Suite,
    model_cfg: ModelConfig,
    codec,
    seed: int,
    steps: int,
    plan: StagePlan | None = None,
) -> float:
    """Val loss of one task's adapter+plugin trained for ``steps`` on a forced tap."""
    plan = plan or StagePlan()
    model = UnifiedModel(replace_arch(model_cfg, "hlora"), codec, seed)
    model.tap_override[task] = model.taps.abstract_tap if tap == "abstract" else model.taps.concrete_tap
    stage = "3c" if task is TaskType.COMPREHENSION else "3g"
    data = suite.comp_train if task is TaskType.COMPREHENSION else suite.gen_train
    val = suite.comp_val if task is TaskType.COMPREHENSION else suite.gen_val
    train(model, data, STAGE_MASKS[stage], plan.train_config(stage, seed, steps=steps), f"probe-{tap}")
    return val_loss(model, val)
