"""Command-line entry point: ``hlora-lab {train,generate,bench,sweep}``.

Exit codes: 0 success, 1 gate failure (op-count law, truncated decoding),
2 usage or precondition error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .adapters import TaskType
from .bench import BenchSpec, OpCountLawError, emit_report, run_bench
from .config import ConfigError, RunConfig, dump_config, load_config
from .model import TruncationError, UnifiedModel
from .text import TokenizeError, detokenize, tokenize
from .training import (
    STAGE_PREREQS,
    MetricsLog,
    PipelineOrderError,
    StageMaskViolation,
    Suite,
    build_codec,
    check_stage_order,
    codec_from_state,
    evaluate,
    replace_arch,
    run_mixed_baseline,
    run_stage1_comp,
    run_stage1_gen,
    run_stage2,
    run_stage3_comp,
    run_stage3_gen,
    stage_data,
    write_sweep_csv,
)
from .vision import ToyImage

PGM_TAG = "# hlora-lab pgm v1"
CKPT_NAME = "model.ckpt"
CONFIG_NAME = "config.yaml"
METRICS_NAME = "metrics.csv"

RUNNERS = {
    "1c": run_stage1_comp,
    "1g": run_stage1_gen,
    "2": run_stage2,
    "3c": run_stage3_comp,
    "3g": run_stage3_gen,
    "mixed": run_mixed_baseline,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# portable graymap


def write_pgm(path, image: ToyImage) -> None:
    h, w = image.shape
    vals = np.clip(np.rint(image.grid * 255), 0, 255).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in vals)
    Path(path).write_text(f"P2\n{PGM_TAG}\n{w} {h}\n255\n{rows}\n")


def read_pgm(path) -> ToyImage:
    words = []
    for line in Path(path).read_text().splitlines():
        words += line.split("#", 1)[0].split()
    if not words or words[0] != "P2":
        raise UsageError(f"{path}: not a plain PGM (P2) file")
    try:
        w, h, maxval = int(words[1]), int(words[2]), int(words[3])
        vals = np.array([int(v) for v in words[4:]], dtype=np.float64)
    except (IndexError, ValueError):
        raise UsageError(f"{path}: malformed PGM header or pixels") from None
    if vals.size != w * h or maxval <= 0 or vals.min(initial=0) < 0 or vals.max(initial=0) > maxval:
        raise UsageError(f"{path}: expected {w}x{h} pixels in [0, {maxval}]")
    return ToyImage(vals.reshape(h, w) / maxval)


# ---------------------------------------------------------------------------
# commands


def _run_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        rc.seed = args.seed
    return rc


def _load_checkpoint(path, rc: RunConfig, force: bool):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return checkpoint.load(path, rc.model_hash(), force)
    except checkpoint.CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    rc = _run_config(args)
    stage = args.stage
    rc.model = replace_arch(rc.model, "shared" if stage == "mixed" else "hlora")
    seed = rc.seed
    completed: list[str] = []
    if args.resume:
        state, _, completed = _load_checkpoint(args.resume, rc, args.force)
        codec = codec_from_state(state, rc.model)
        model = UnifiedModel(rc.model, codec, seed, pretrained=False)
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{args.resume}: incompatible checkpoint: {exc}") from None
    else:
        codec = build_codec(rc.model, seed, rc.codec.corpus_size)
        model = None
    try:
        check_stage_order(stage, completed)
    except PipelineOrderError as exc:
        raise UsageError(str(exc)) from None
    if model is None:
        model = UnifiedModel(rc.model, codec, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(dump_config(rc))
    metrics_path = out / METRICS_NAME
    if metrics_path.exists():
        metrics_path.unlink()
    log = MetricsLog(f"seed{seed}-{stage}", metrics_path)

    suite = Suite.build(seed, codec, rc.data)
    steps = rc.plan.total_steps if stage == "mixed" else None
    cfg = rc.plan.train_config(stage, seed, steps=steps)
    RUNNERS[stage](model, stage_data(suite, stage, rc.plan, seed), cfg, log)
    if args.evaluate:
        for k, v in evaluate(model, suite).items():
            log.log(stage, cfg.steps, "eval", None, k, v)
    checkpoint.save(out / CKPT_NAME, model.state_dict(), rc.model_hash(), completed + [stage])
    print(f"stage {stage}: {cfg.steps} steps; wrote {out / CKPT_NAME}, {metrics_path}, {out / CONFIG_NAME}")
    return 0


def cmd_generate(args) -> int:
    cfg_path = args.config or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), CONFIG_NAME)
    if not os.path.exists(args.ckpt):
        raise UsageError(f"checkpoint {args.ckpt} does not exist")
    if not os.path.exists(cfg_path):
        raise UsageError(f"config {cfg_path} not found next to the checkpoint; pass --config")
    rc = load_config(cfg_path)
    state, _, _ = _load_checkpoint(args.ckpt, rc, args.force)
    model = UnifiedModel(rc.model, codec_from_state(state, rc.model), rc.seed, pretrained=False)
    model.load_state_dict(state)

    task = TaskType.COMPREHENSION if args.task == "comp" else TaskType.GENERATION
    if task is TaskType.GENERATION and not args.out:
        raise UsageError("generation needs --out for the image")
    image = read_pgm(args.image) if args.image else None
    if task is TaskType.COMPREHENSION and image is None:
        raise UsageError("comprehension needs --image")
    if image is not None and image.shape != (rc.model.vision.image_size,) * 2:
        raise UsageError(f"{args.image}: image is {image.shape}, model expects {rc.model.vision.image_size} square")
    try:
        text = tokenize(args.prompt or "")
    except TokenizeError as exc:
        raise UsageError(str(exc)) from None
    seq = model.build_sequence(image, text, None, task)
    try:
        res = model.generate(seq, task, max_new=args.max_new)
    except TruncationError as exc:
        print(f"truncated after {len(exc.partial)} tokens: {' '.join(map(str, exc.partial))}", file=sys.stderr)
        return 1
    if task is TaskType.COMPREHENSION:
        print(detokenize([t for t in res.tokens if t != rc.model.eos_id]))
        return 0
    write_pgm(args.out, res.image)
    idx_path = Path(args.out).with_suffix(".idx.txt")
    idx_path.write_text("# hlora-lab indices v1\n" + " ".join(str(i) for i in res.indices.indices) + "\n")
    print(f"wrote {args.out} and {idx_path}")
    return 0


def cmd_bench(args) -> int:
    spec = BenchSpec(
        ks=tuple(args.experts),
        r=args.rank,
        tokens=args.tokens,
        repetitions=args.repetitions,
        warmup=args.warmup,
        seed=args.seed,
    )
    try:
        results = run_bench(spec)
    except OpCountLawError as exc:
        print(f"op-count law violated: {exc}", file=sys.stderr)
        return 1
    print(emit_report(results, args.csv))
    return 0


def cmd_sweep(args) -> int:
    from .experiments import sweep

    rc = _run_config(args)
    seeds = args.seeds if args.seeds else [rc.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(dump_config(rc))
    for arch in args.arch:
        points = sweep(rc, arch, seeds, args.ratios, args.steps, args.primary)
        path = out / f"sweep_{arch}.csv"
        write_sweep_csv(points, arch, path)
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ratio_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("ratios must be a nonempty list in [0, 1]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hlora-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=sorted(STAGE_PREREQS))
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint holding the earlier stages")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--force", action="store_true", help="accept a checkpoint whose config hash differs")
    t.add_argument("--no-eval", dest="evaluate", action="store_false", help="skip validation metrics")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="answer a question or draw an image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--config", help="defaults to config.yaml next to the checkpoint")
    g.add_argument("--task", required=True, choices=("comp", "gen"))
    g.add_argument("--prompt", default="")
    g.add_argument("--image", help="plain PGM input image")
    g.add_argument("--out", help="PGM path for generated images")
    g.add_argument("--max-new", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="op-count audit and adapter timing")
    b.add_argument("--experts", type=_int_list, default=[2, 4, 8, 32])
    b.add_argument("--rank", type=int, default=4)
    b.add_argument("--tokens", type=int, default=BenchSpec.tokens)
    b.add_argument("--repetitions", type=int, default=BenchSpec.repetitions)
    b.add_argument("--warmup", type=int, default=BenchSpec.warmup)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="task-conflict sweep over mixing ratios")
    s.add_argument("--ratios", type=_ratio_list, default=[0.0, 0.25, 0.5, 1.0])
    s.add_argument("--arch", choices=("shared", "hlora"), action="append", help="repeatable; default both")
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--steps", type=int, help="optimizer steps per run")
    s.add_argument("--primary", choices=("comp", "gen"), default="comp")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sweep" and not args.arch:
        args.arch = ["shared", "hlora"]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TokenizeError) as exc:
        print(f"hlora-lab: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # invalid bench specs, stage/arch mismatches
        print(f"hlora-lab: error: {exc}", file=sys.stderr)
        return 2
    except StageMaskViolation as exc:
        print(f"hlora-lab: stage audit failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
