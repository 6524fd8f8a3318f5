"""LoRA, reference MoELoRA and H-LoRA as augmentations of a frozen linear layer.

All three share the same substrate so their costs are comparable.  Each
forward optionally tallies its adapter-side operations into an
:class:`OpCounter` using one fixed accounting:

* LoRA: 2 expert multiplications + 1 addition = 3
* MoELoRA (k experts, looped): 2k + 1 + k + k + k = 5k + 1
* H-LoRA (merged experts): 2 + 1 + 1 + 1 + 1 = 6, for any k
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class TaskType(str, enum.Enum):
    COMPREHENSION = "comp"
    GENERATION = "gen"


class ConfigurationError(KeyError):
    """A requested task plugin is missing from the bank."""


@dataclass
class OpCounter:
    expert_multiplications: int = 0
    router_multiplications: int = 0
    weight_expansions: int = 0
    dot_products: int = 0
    additions: int = 0

    def total(self) -> int:
        return sum(getattr(self, f.name) for f in fields(self))

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class FrozenLinear:
    """``x @ weight (+ bias)`` with parameters that never train."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = Tensor(np.asarray(weight, dtype=np.float64))
        self.bias = None if bias is None else Tensor(np.asarray(bias, dtype=np.float64))

    @classmethod
    def random(cls, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False) -> "FrozenLinear":
        w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        b = rng.normal(0.0, 0.02, size=d_out) if bias else None
        return cls(w, b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @property
    def trainable(self) -> bool:
        return False

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"input width {x.shape} does not match frozen weight {self.weight.shape}")
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add_bias(y, self.bias)
        return y


class LoraAdapter:
    """Low-rank bypass ``(alpha / r) * x @ A @ B``; B starts at zero."""

    def __init__(self, A: np.ndarray, B: np.ndarray, alpha: float, requires_grad: bool = True):
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        if A.shape[1] != B.shape[0]:
            raise DimensionError(f"LoRA factor mismatch: A {A.shape}, B {B.shape}")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.A = Tensor(A, requires_grad=requires_grad)
        self.B = Tensor(B, requires_grad=requires_grad)
        self.alpha = float(alpha)

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator) -> "LoraAdapter":
        if rank < 1:
            raise ValueError("rank must be >= 1")
        A = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank))
        return cls(A, np.zeros((rank, d_out)), alpha)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


class RouterLayer:
    """Linear map to k logits followed by a row softmax."""

    def __init__(self, weight: np.ndarray, requires_grad: bool = True):
        self.weight = Tensor(np.asarray(weight, dtype=np.float64), requires_grad=requires_grad)

    @classmethod
    def init(cls, d_in: int, k: int, rng: np.random.Generator, std: float | None = None) -> "RouterLayer":
        if k < 1:
            raise ValueError("expert count k must be >= 1")
        std = 1.0 / np.sqrt(d_in) if std is None else std
        return cls(rng.normal(0.0, std, size=(d_in, k)))

    @property
    def k(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.softmax_rows(ad.matmul(x, self.weight))


class HLoraSubmodule:
    """One task's plugin for one layer: merged expert factors plus a router.

    Column block ``i`` of ``A_merged`` and row block ``i`` of ``B_merged``
    hold expert ``i``.
    """

    def __init__(
        self,
        A_merged: np.ndarray,
        B_merged: np.ndarray,
        router: RouterLayer,
        r: int,
        alpha: float,
        task: TaskType | None = None,
    ):
        A_merged = np.asarray(A_merged, dtype=np.float64)
        B_merged = np.asarray(B_merged, dtype=np.float64)
        k = router.k
        if r < 1 or k < 1:
            raise ValueError("rank and expert count must be >= 1")
        if A_merged.shape[1] != r * k or B_merged.shape[0] != r * k:
            raise DimensionError(
                f"merged blocks {A_merged.shape}/{B_merged.shape} do not match k={k} experts of rank {r}"
            )
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.A_merged = Tensor(A_merged, requires_grad=True)
        self.B_merged = Tensor(B_merged, requires_grad=True)
        self.router = router
        self.r = int(r)
        self.alpha = float(alpha)
        self.task = task

    @classmethod
    def init(
        cls,
        d_in: int,
        d_out: int,
        r: int,
        k: int,
        alpha: float,
        rng: np.random.Generator,
        task: TaskType | None = None,
    ) -> "HLoraSubmodule":
        # allocated merged from the start: no per-step concatenation
        A = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, r * k))
        router = RouterLayer.init(d_in, k, rng)
        return cls(A, np.zeros((r * k, d_out)), router, r, alpha, task)

    @classmethod
    def from_experts(
        cls, experts: Sequence[LoraAdapter], router: RouterLayer, task: TaskType | None = None
    ) -> "HLoraSubmodule":
        _check_experts(experts, router)
        A = np.concatenate([e.A.data for e in experts], axis=1)
        B = np.concatenate([e.B.data for e in experts], axis=0)
        return cls(A, B, router, experts[0].rank, experts[0].alpha, task)

    def split_experts(self) -> list[LoraAdapter]:
        r = self.r
        return [
            LoraAdapter(self.A_merged.data[:, i * r : (i + 1) * r], self.B_merged.data[i * r : (i + 1) * r], self.alpha)
            for i in range(self.k)
        ]

    @property
    def k(self) -> int:
        return self.router.k

    @property
    def scale(self) -> float:
        return self.alpha * self.k / self.r

    def parameters(self) -> dict[str, Tensor]:
        return {"A_merged": self.A_merged, "B_merged": self.B_merged, "router": self.router.weight}


def _check_experts(experts: Sequence[LoraAdapter], router: RouterLayer) -> None:
    if not experts:
        raise ValueError("MoELoRA needs at least one expert")
    first = experts[0]
    for e in experts[1:]:
        if e.A.shape != first.A.shape or e.B.shape != first.B.shape:
            raise DimensionError(f"expert shapes disagree: {e.A.shape}/{e.B.shape} vs {first.A.shape}/{first.B.shape}")
    if router.k != len(experts):
        raise DimensionError(f"router emits {router.k} weights for {len(experts)} experts")


def lora_forward(x: Tensor, base: FrozenLinear, adapter: LoraAdapter, counter: OpCounter | None = None) -> Tensor:
    if adapter.A.shape[0] != base.d_in or adapter.B.shape[1] != base.d_out:
        raise DimensionError(f"adapter {adapter.A.shape}x{adapter.B.shape} does not fit base {base.weight.shape}")
    h = ad.scale(ad.matmul(x, adapter.A), adapter.alpha / adapter.rank)
    out = ad.add(base(x), ad.matmul(h, adapter.B))
    if counter is not None:
        counter.expert_multiplications += 2
        counter.additions += 1
    return out


def moelora_forward_reference(
    x: Tensor,
    base: FrozenLinear,
    experts: Sequence[LoraAdapter],
    router: RouterLayer,
    counter: OpCounter | None = None,
    conventional_scale: bool = False,
) -> Tensor:
    """Expert-by-expert mixture: each expert gets its own products, expansion and add."""
    _check_experts(experts, router)
    k = len(experts)
    r = experts[0].rank
    if experts[0].A.shape[0] != base.d_in or experts[0].B.shape[1] != base.d_out:
        raise DimensionError("experts do not fit the base layer")
    alpha = experts[0].alpha
    factor = alpha / r if conventional_scale else alpha * k / r
    w = router(x)
    out = base(x)
    for i, e in enumerate(experts):
        h = ad.matmul(x, e.A)
        wi = ad.expand_cols(ad.take_cols(w, i, i + 1), r, factor)
        y = ad.matmul(ad.mul(h, wi), e.B)
        out = ad.add(out, y)
    if counter is not None:
        counter.expert_multiplications += 2 * k
        counter.router_multiplications += 1
        counter.weight_expansions += k
        counter.dot_products += k
        counter.additions += k
    return out


def hlora_forward(x: Tensor, base: FrozenLinear, sub: HLoraSubmodule, counter: OpCounter | None = None) -> Tensor:
    if sub.A_merged.shape[0] != base.d_in or sub.B_merged.shape[1] != base.d_out:
        raise DimensionError(f"plugin {sub.A_merged.shape}x{sub.B_merged.shape} does not fit base {base.weight.shape}")
    rk, k = sub.A_merged.shape[1], sub.router.k
    if k * sub.r != rk:
        raise DimensionError(f"router k={k} does not match merged width {rk}")
    # x @ [A_merged | W_router] in one product: x is read once and its gradient is one product
    xa = ad.matmul(x, ad.concat_cols([sub.A_merged, sub.router.weight]))
    w = ad.softmax_rows(ad.take_cols(xa, rk, rk + k))
    w_expanded = ad.expand_cols(w, sub.r, sub.scale)
    h = ad.mul(ad.take_cols(xa, 0, rk), w_expanded)
    out = ad.add(base(x), ad.matmul(h, sub.B_merged))
    if counter is not None:
        counter.expert_multiplications += 2
        counter.router_multiplications += 1
        counter.weight_expansions += 1
        counter.dot_products += 1
        counter.additions += 1
    return out


def select_submodule(task: TaskType, bank: Mapping[TaskType, HLoraSubmodule]) -> HLoraSubmodule:
    try:
        return bank[TaskType(task)]
    except (KeyError, ValueError):
        raise ConfigurationError(f"no H-LoRA plugin registered for task {task!r}") from None
