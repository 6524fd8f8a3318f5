"""Toy patch encoder with per-block hidden states and task-gated tap selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import TaskType
from .autodiff import DimensionError, Tensor


class PatchingError(ValueError):
    pass


@dataclass
class ToyImage:
    grid: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"image grid must be 2-D, got {self.grid.shape}")
        if np.any(self.grid < 0.0) or np.any(self.grid > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def patchify(grid: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an H x W grid into row-major (num_patches, patch_size**2) rows."""
    h, w = grid.shape
    if h % patch_size or w % patch_size:
        raise PatchingError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    p = patch_size
    return grid.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)


def unpatchify(patches: np.ndarray, grid_shape: tuple[int, int], patch_size: int) -> np.ndarray:
    rows, cols = grid_shape
    p = patch_size
    return patches.reshape(rows, cols, p, p).transpose(0, 2, 1, 3).reshape(rows * p, cols * p)


class EncoderStack:
    """Patch embedding followed by ``L`` residual blocks.

    Block ``i`` mixes patch tokens with ``lam_i * I + (1 - lam_i) * mean``
    and adds a GELU channel MLP on top of the mixed tokens.  ``token_mix``
    gives the per-block ``lam_i``; mixing strengthens with depth, so shallow
    states stay patch-local and deep states carry image-level summaries.
    """

    def __init__(
        self,
        embed: np.ndarray,
        blocks: Sequence[tuple[np.ndarray, np.ndarray | None]],
        token_mix: Sequence[float],
        patch_size: int = 4,
        pos: np.ndarray | None = None,
    ):
        if len(blocks) != len(token_mix):
            raise ValueError("one token-mix coefficient per block")
        self.patch_size = patch_size
        self.embed = Tensor(embed)
        self.pos = None if pos is None else Tensor(pos)
        self.blocks = [(Tensor(w), None if b is None else Tensor(b)) for w, b in blocks]
        self.token_mix = [float(m) for m in token_mix]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        patch_size: int = 4,
        num_patches: int = 9,
        d_vis: int = 32,
        depth: int = 4,
        token_mix: Sequence[float] = (1.0, 1.0, 0.2, 0.2),
        bias: bool = True,
        zero: bool = False,
    ) -> "EncoderStack":
        d_patch = patch_size * patch_size
        if len(token_mix) != depth:
            raise ValueError("token_mix length must equal depth")

        def draw(shape, std):
            return np.zeros(shape) if zero else rng.normal(0.0, std, size=shape)

        embed = draw((d_patch, d_vis), 1.0 / np.sqrt(d_patch))
        pos = draw((num_patches, d_vis), 0.1) if bias else None
        blocks = [(draw((d_vis, d_vis), 1.0 / np.sqrt(d_vis)), draw(d_vis, 0.1) if bias else None) for _ in range(depth)]
        return cls(embed, blocks, token_mix, patch_size, pos)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def d_vis(self) -> int:
        return self.embed.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        params = {"embed": self.embed}
        if self.pos is not None:
            params["pos"] = self.pos
        for i, (w, b) in enumerate(self.blocks):
            params[f"block{i}.w"] = w
            if b is not None:
                params[f"block{i}.b"] = b
        return params

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag


def encode(image: ToyImage, enc: EncoderStack) -> list[Tensor]:
    """Return the hidden state after every block, shallowest first."""
    return encode_many([image], enc)


def encode_many(images: Sequence[ToyImage], enc: EncoderStack) -> list[Tensor]:
    """Batched :func:`encode`: per-block states with each image's patches stacked in order."""
    patches = np.concatenate([patchify(img.grid, enc.patch_size) for img in images], axis=0)
    b = len(images)
    n = patches.shape[0] // b
    f = ad.matmul(Tensor(patches), enc.embed)
    if enc.pos is not None:
        if enc.pos.shape[0] != n:
            raise PatchingError(f"encoder expects {enc.pos.shape[0]} patches, image has {n}")
        f = ad.add(f, ad.take_rows(enc.pos, np.tile(np.arange(n), b)) if b > 1 else enc.pos)
    states = []
    mean = np.full((n, n), 1.0 / n)
    for (w, bias), lam in zip(enc.blocks, enc.token_mix):
        if lam != 1.0:
            mix = lam * np.eye(n) + (1.0 - lam) * mean
            f = ad.matmul(Tensor(np.kron(np.eye(b), mix) if b > 1 else mix), f)
        h = ad.matmul(f, w)
        if bias is not None:
            h = ad.add_bias(h, bias)
        f = ad.add(f, ad.gelu(h))
        states.append(f)
    return states


@dataclass(frozen=True)
class GranularitySelection:
    """1-based block taps: concrete (shallow) for generation, abstract (deep) for comprehension."""

    concrete_tap: int = 2
    abstract_tap: int = 3

    def __post_init__(self):
        if not self.concrete_tap < self.abstract_tap:
            raise ValueError(f"concrete tap {self.concrete_tap} must precede abstract tap {self.abstract_tap}")
        if self.concrete_tap < 1:
            raise ValueError("taps are 1-based block indices")

    def tap_for(self, task: TaskType) -> int:
        return self.concrete_tap if TaskType(task) is TaskType.GENERATION else self.abstract_tap


def select_features(taps: GranularitySelection, states: Sequence, task: TaskType):
    tap = taps.tap_for(task)
    if tap > len(states):
        raise IndexError(f"tap {tap} out of range for {len(states)} encoder states")
    return states[tap - 1]


class AlignmentAdapter:
    """Two-layer GELU perceptron from encoder width to model width."""

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray):
        self.w1 = Tensor(w1, requires_grad=True)
        self.b1 = Tensor(b1, requires_grad=True)
        self.w2 = Tensor(w2, requires_grad=True)
        self.b2 = Tensor(b2, requires_grad=True)

    @classmethod
    def init(
        cls, d_vis: int, d_hidden: int, d_model: int, rng: np.random.Generator, zero_out: bool = False
    ) -> "AlignmentAdapter":
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d_vis), size=(d_vis, d_hidden))
        w2 = np.zeros((d_hidden, d_model)) if zero_out else rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_hidden, d_model))
        return cls(w1, np.zeros(d_hidden), w2, np.zeros(d_model))

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def align(features: Tensor, adapter: AlignmentAdapter) -> Tensor:
    if features.shape[1] != adapter.d_in:
        raise DimensionError(f"feature width {features.shape[1]} != adapter input width {adapter.d_in}")
    h = ad.gelu(ad.add_bias(ad.matmul(features, adapter.w1), adapter.b1))
    return ad.add_bias(ad.matmul(h, adapter.w2), adapter.b2)
