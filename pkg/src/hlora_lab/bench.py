"""Op-count audits and single-thread wall-clock comparison of the three adapters.

LoRA is timed at rank ``r*k`` so it holds as many adapter parameters as the
k-expert variants it is compared against.  Repetitions are interleaved
in a shuffled order per round so slow drift in machine speed, and the
cache state left by the previous case, hit every kind alike.
"""

from __future__ import annotations

import csv
import gc
import os
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import (
    FrozenLinear,
    HLoraSubmodule,
    LoraAdapter,
    OpCounter,
    RouterLayer,
    hlora_forward,
    lora_forward,
    moelora_forward_reference,
)
from .rng import stream

KINDS = ("lora", "moelora", "hlora")
CSV_COLUMNS = ("run_id", "kind", "k", "r", "tokens", "median_ns", "iqr_ns", "ratio_vs_lora", "opcount")


class OpCountLawError(AssertionError):
    pass


def expected_opcount(kind: str, k: int) -> int:
    if kind == "lora":
        return 3
    if kind == "moelora":
        return 5 * k + 1
    if kind == "hlora":
        return 6
    raise ValueError(f"unknown adapter kind {kind!r}")


@dataclass
class BenchSpec:
    kinds: tuple[str, ...] = KINDS
    ks: tuple[int, ...] = (2, 4, 8, 32)
    r: int = 4
    # wide enough that the frozen base outweighs the adapter, as in a real layer
    d_in: int = 256
    d_out: int = 256
    tokens: int = 2048
    repetitions: int = 31
    warmup: int = 3
    include_backward: bool = True
    seed: int = 0
    min_median_ns: int = 200_000  # below this the workload is scaled up

    def __post_init__(self):
        if self.repetitions < 5:
            raise ValueError("repetitions must be >= 5")
        if self.warmup < 2:
            raise ValueError("warmup must be >= 2")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError("expert counts must be positive")
        if self.r < 1 or self.tokens < 1 or self.d_in < 1 or self.d_out < 1:
            raise ValueError("rank, tokens and widths must be positive")
        bad = set(self.kinds) - set(KINDS)
        if bad:
            raise ValueError(f"unknown adapter kinds {sorted(bad)}")


@dataclass
class BenchResult:
    kind: str
    k: int
    r: int
    tokens: int
    median_ns: float
    iqr_ns: float
    ratio_vs_lora: float
    opcount: int
    times_ns: list[int] = field(default_factory=list, repr=False)
    token_scale: int = 1


@contextmanager
def single_thread():
    """Limit BLAS to one thread, pin to one core where supported, and pause gc as timeit does."""
    from threadpoolctl import threadpool_limits

    old = None
    if hasattr(os, "sched_getaffinity"):
        old = os.sched_getaffinity(0)
        try:
            os.sched_setaffinity(0, {min(old)})
        except OSError:
            old = None
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if was_enabled:
            gc.enable()
        if old is not None:
            os.sched_setaffinity(0, old)


class _Case:
    """One adapter configuration with its frozen base and a forward closure."""

    def __init__(self, kind: str, k: int, spec: BenchSpec):
        rng = stream(spec.seed, f"bench.{k}")
        self.kind, self.k = kind, k
        self.base = FrozenLinear.random(spec.d_in, spec.d_out, rng)
        r, alpha = spec.r, 2.0 * spec.r
        # nonzero B so the adapter path carries real values through the check
        experts = [
            LoraAdapter(rng.normal(0, 0.3, (spec.d_in, r)), rng.normal(0, 0.3, (r, spec.d_out)), alpha)
            for _ in range(k)
        ]
        router = RouterLayer.init(spec.d_in, k, rng)
        self.params: list[ad.Tensor] = []
        if kind == "lora":
            self.adapter = LoraAdapter(
                rng.normal(0, 0.3, (spec.d_in, r * k)), rng.normal(0, 0.3, (r * k, spec.d_out)), alpha * k
            )
            self.params = [self.adapter.A, self.adapter.B]
        elif kind == "moelora":
            self.experts, self.router = experts, router
            self.params = [t for e in experts for t in (e.A, e.B)] + [router.weight]
        else:
            self.sub = HLoraSubmodule.from_experts(experts, router)
            self.params = [self.sub.A_merged, self.sub.B_merged, self.sub.router.weight]
        # twin used to re-assert merged == looped on the exact timed inputs
        self._twin = (experts, router) if kind == "hlora" else None

    def forward(self, x: ad.Tensor, counter: OpCounter | None = None) -> ad.Tensor:
        if self.kind == "lora":
            return lora_forward(x, self.base, self.adapter, counter)
        if self.kind == "moelora":
            return moelora_forward_reference(x, self.base, self.experts, self.router, counter)
        return hlora_forward(x, self.base, self.sub, counter)

    def check_equivalence(self, x: np.ndarray) -> None:
        if self._twin is None:
            return
        experts, router = self._twin
        with ad.no_grad():
            merged = self.forward(ad.Tensor(x)).data
            looped = moelora_forward_reference(ad.Tensor(x), self.base, experts, router).data
        err = np.abs(merged - looped).max() / max(np.abs(looped).max(), 1e-300)
        if err > 1e-9:
            raise AssertionError(f"H-LoRA and MoELoRA disagree at k={self.k}: relative error {err:.3g}")

    def run_once(self, x: np.ndarray, backward: bool) -> int:
        xt = ad.Tensor(x, requires_grad=backward)
        for p in self.params:
            p.grad = None
        t0 = time.perf_counter_ns()
        if backward:
            out = self.forward(xt)
            ad.sum_all(out).backward()
        else:
            with ad.no_grad():
                self.forward(xt)
        return time.perf_counter_ns() - t0


def audit_opcounts(kind: str, k: int, d: int = 8, r: int = 2, seed: int = 0) -> OpCounter:
    """One instrumented forward; returns the adapter-side operation tally."""
    spec = BenchSpec(kinds=(kind,), ks=(k,), r=r, d_in=d, d_out=d, tokens=4, seed=seed)
    case = _Case(kind, k, spec)
    counter = OpCounter()
    with ad.no_grad():
        case.forward(ad.Tensor(stream(seed, "bench.x").normal(size=(4, d))), counter)
    return counter


def _quartiles(times) -> tuple[float, float]:
    q1, med, q3 = np.percentile(np.asarray(times, dtype=np.float64), [25, 50, 75])
    return float(med), float(q3 - q1)


def _paired_ratio(times, reference) -> float:
    """Median of per-round ratios; drift in machine speed cancels within a round."""
    return float(np.median(np.asarray(times, dtype=np.float64) / np.asarray(reference, dtype=np.float64)))


def run_bench(spec: BenchSpec) -> list[BenchResult]:
    """Median forward(+backward) time per (kind, k) on one pinned thread."""
    for kind in spec.kinds:
        for k in spec.ks:
            total = audit_opcounts(kind, k, seed=spec.seed).total()
            if total != expected_opcount(kind, k):
                raise OpCountLawError(f"{kind} k={k}: counted {total} ops, law says {expected_opcount(kind, k)}")

    kinds = tuple(dict.fromkeys(("lora",) + tuple(spec.kinds)))  # LoRA is always the reference
    cases = [_Case(kind, k, spec) for k in spec.ks for kind in kinds]
    scale = 1
    with single_thread():
        while True:
            tokens = spec.tokens * scale
            x = stream(spec.seed, "bench.x").normal(size=(tokens, spec.d_in))
            for c in cases:
                c.check_equivalence(x)
                for _ in range(spec.warmup):
                    c.run_once(x, spec.include_backward)
            times: dict[int, list[int]] = {i: [] for i in range(len(cases))}
            order_rng = stream(spec.seed, "bench.order")
            for _ in range(spec.repetitions):
                # fresh order each round: no case always follows the same neighbour
                for i in order_rng.permutation(len(cases)):
                    times[i].append(cases[i].run_once(x, spec.include_backward))
            fastest = min(_quartiles(t)[0] for t in times.values())
            if fastest >= spec.min_median_ns or scale >= 64:
                break
            scale *= 2
        for c in cases:
            c.check_equivalence(x)

    lora_index = {c.k: i for i, c in enumerate(cases) if c.kind == "lora"}
    stats = {i: _quartiles(times[i]) for i in range(len(cases))}
    results = []
    for i, c in enumerate(cases):
        if c.kind not in spec.kinds:
            continue
        med, iqr = stats[i]
        results.append(
            BenchResult(
                c.kind,
                c.k,
                spec.r,
                tokens,
                med,
                iqr,
                _paired_ratio(times[i], times[lora_index[c.k]]),
                expected_opcount(c.kind, c.k),
                times[i],
                scale,
            )
        )
    order = {kind: j for j, kind in enumerate(KINDS)}
    results.sort(key=lambda res: (order[res.kind], res.k))
    return results


def format_table(results: list[BenchResult]) -> str:
    lines = [f"{'kind':<8} {'k':>3} {'r':>3} {'tokens':>7} {'median_us':>10} {'iqr_us':>8} {'vs_lora':>8} {'ops':>4}"]
    for res in results:
        lines.append(
            f"{res.kind:<8} {res.k:>3} {res.r:>3} {res.tokens:>7} {res.median_ns / 1e3:>10.1f} "
            f"{res.iqr_ns / 1e3:>8.1f} {res.ratio_vs_lora:>8.3f} {res.opcount:>4}"
        )
    return "\n".join(lines)


def emit_report(results: list[BenchResult], csv_path: str | os.PathLike | None = None, run_id: str | None = None) -> str:
    """Append rows to ``csv_path`` (never overwriting) and return the table."""
    if not results:
        raise ValueError("no bench results to report")
    run_id = run_id or uuid.uuid4().hex[:12]
    if csv_path is not None:
        try:
            new = not os.path.exists(csv_path) or os.path.getsize(csv_path) == 0
            with open(csv_path, "a", newline="") as fh:
                if new:
                    fh.write("# hlora-lab bench v1\n")
                w = csv.writer(fh)
                if new:
                    w.writerow(CSV_COLUMNS)
                for res in results:
                    w.writerow(
                        [run_id, res.kind, res.k, res.r, res.tokens, f"{res.median_ns:.0f}", f"{res.iqr_ns:.0f}",
                         f"{res.ratio_vs_lora:.6f}", res.opcount]
                    )
        except OSError as exc:
            raise OSError(f"cannot write bench CSV {csv_path}: {exc}") from exc
    return format_table(results)
