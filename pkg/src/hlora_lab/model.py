"""Tiny decoder-only transformer over joint visual + text + VQ token streams.

Every attention and feed-forward projection is a :class:`FrozenLinear`
augmented per task by an H-LoRA plugin (``arch="hlora"``) or by one LoRA
shared across tasks (``arch="shared"``, the mixed-training baseline).

A batch of sequences is packed into one long row block; attention is
causal within each sequence and never crosses into its neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import FrozenLinear, HLoraSubmodule, LoraAdapter, TaskType, hlora_forward, lora_forward, select_submodule
from .autodiff import Tensor
from .rng import stream
from .text import EOS_ID, TEXT_VOCAB_SIZE
from .vision import AlignmentAdapter, EncoderStack, GranularitySelection, ToyImage, align, encode, select_features
from .vq import IndexSequence, VocabularyMap, VQCodec, to_token_ids

ADAPTED_LINEARS = ("q", "k", "v", "o", "ff1", "ff2")

# pretrained encoder weights per (seed, vision config); pretraining is deterministic
_PRETRAINED_VISION: dict[tuple[int, str], dict[str, np.ndarray]] = {}
_PRETRAINED_BACKBONE: dict[tuple, dict[str, np.ndarray]] = {}


class SequenceLengthError(ValueError):
    pass


class TruncationError(RuntimeError):
    """Decoding budget ran out; ``partial`` holds what was emitted."""

    def __init__(self, message: str, partial: list[int]):
        super().__init__(message)
        self.partial = partial


@dataclass
class PluginConfig:
    r: int
    k: int = 4
    alpha: float = 8.0


@dataclass
class VisionConfig:
    image_size: int = 12
    patch_size: int = 3
    d_vis: int = 32
    depth: int = 4
    token_mix: tuple[float, ...] = (1.0, 1.0, 0.1, 0.1)
    concrete_tap: int = 2
    abstract_tap: int = 3
    adapter_hidden: int = 64
    pretrain_steps: int = 1000


@dataclass
class VQConfig:
    K: int = 64
    d_code: int = 8


@dataclass
class ModelConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    max_seq: int = 128
    d_ff: int = 128
    arch: str = "hlora"
    comp: PluginConfig = field(default_factory=lambda: PluginConfig(r=4, k=4, alpha=8.0))
    gen: PluginConfig = field(default_factory=lambda: PluginConfig(r=8, k=4, alpha=16.0))
    shared_rank: int = 16
    shared_alpha: float = 32.0
    shared_tap: str = "abstract"
    text_vocab_size: int = TEXT_VOCAB_SIZE
    lm_pretrain_steps: int = 1500
    eos_id: int = EOS_ID
    vision: VisionConfig = field(default_factory=VisionConfig)
    vq: VQConfig = field(default_factory=VQConfig)

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.arch not in ("hlora", "shared"):
            raise ValueError(f"unknown arch {self.arch!r}")
        for p in (self.comp, self.gen):
            if p.r < 1 or p.k < 1 or p.alpha <= 0:
                raise ValueError("plugin ranks, expert counts and alphas must be positive")
        if self.shared_tap not in ("abstract", "concrete"):
            raise ValueError("shared_tap is 'abstract' or 'concrete'")

    @property
    def vocab(self) -> VocabularyMap:
        return VocabularyMap(self.text_vocab_size, self.vq.K)

    @property
    def grid_shape(self) -> tuple[int, int]:
        n = self.vision.image_size // self.vision.patch_size
        return (n, n)

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols


@dataclass
class JointSequence:
    """Visual rows (already tap-selected, not yet aligned) then token rows."""

    task: TaskType
    visual: np.ndarray | None
    tokens: list[int]
    loss_mask: np.ndarray

    @property
    def n_visual(self) -> int:
        return 0 if self.visual is None else self.visual.shape[0]

    def __len__(self) -> int:
        return self.n_visual + len(self.tokens)

    def ids(self) -> np.ndarray:
        """Token id per position, -1 on visual positions."""
        return np.concatenate([np.full(self.n_visual, -1, dtype=np.int64), np.asarray(self.tokens, dtype=np.int64)])

    def extended(self, extra: Sequence[int]) -> "JointSequence":
        mask = np.concatenate([self.loss_mask, np.zeros(len(extra), dtype=bool)])
        return JointSequence(self.task, self.visual, list(self.tokens) + list(extra), mask)


@dataclass
class GenerationResult:
    tokens: list[int]
    indices: IndexSequence | None = None
    image: ToyImage | None = None


class UnifiedModel:
    def __init__(self, cfg: ModelConfig, codec: VQCodec, seed: int = 0, pretrained: bool = True):
        """``pretrained=False`` skips the pretraining emulation, for callers about to load a state."""
        if codec.vocab != cfg.vocab:
            raise ValueError(f"codec vocabulary {codec.vocab} does not match config {cfg.vocab}")
        self.cfg = cfg
        self.codec = codec
        self.vocab = cfg.vocab
        self.taps = GranularitySelection(cfg.vision.concrete_tap, cfg.vision.abstract_tap)
        d, V = cfg.d_model, self.vocab.size
        vc = cfg.vision
        if self.taps.abstract_tap > vc.depth:
            raise ValueError("abstract tap beyond encoder depth")

        self.vision = EncoderStack.init(
            stream(seed, "vision"),
            patch_size=vc.patch_size,
            num_patches=cfg.num_patches,
            d_vis=vc.d_vis,
            depth=vc.depth,
            token_mix=vc.token_mix,
        )
        if pretrained and vc.pretrain_steps > 0:
            self._load_pretrained_vision(seed)

        rng = stream(seed, "backbone")
        self.pos = Tensor(rng.normal(0.0, 0.5, size=(cfg.max_seq, d)))
        self.blocks: list[dict[str, FrozenLinear]] = []
        out_std = 1.0 / np.sqrt(2 * cfg.layers)
        for _ in range(cfg.layers):
            blk = {name: FrozenLinear.random(d, d, rng) for name in ("q", "k", "v", "o")}
            blk["ff1"] = FrozenLinear.random(d, cfg.d_ff, rng, bias=True)
            blk["ff2"] = FrozenLinear.random(cfg.d_ff, d, rng)
            blk["o"].weight.data *= out_std
            blk["ff2"].weight.data *= out_std
            self.blocks.append(blk)

        self.embed = Tensor(stream(seed, "embed").normal(0.0, 1.0, size=(V, d)))
        self.head = Tensor(stream(seed, "head").normal(0.0, 1.0 / np.sqrt(d), size=(d, V)))

        if pretrained and cfg.lm_pretrain_steps > 0:
            self._load_pretrained_backbone(seed)

        rng = stream(seed, "adapters")
        if cfg.arch == "hlora":
            names = [TaskType.COMPREHENSION, TaskType.GENERATION]
        else:
            names = ["shared"]
        self.adapters = {
            key: AlignmentAdapter.init(vc.d_vis, vc.adapter_hidden, d, rng) for key in names
        }

        self.plugins: dict[TaskType, dict[str, HLoraSubmodule]] = {}
        self.shared: dict[str, LoraAdapter] = {}
        if cfg.arch == "hlora":
            for task, pc in ((TaskType.COMPREHENSION, cfg.comp), (TaskType.GENERATION, cfg.gen)):
                rng = stream(seed, f"plugins.{task.value}")
                bank = {}
                for li, blk in enumerate(self.blocks):
                    for name in ADAPTED_LINEARS:
                        base = blk[name]
                        bank[f"layer{li}.{name}"] = HLoraSubmodule.init(
                            base.d_in, base.d_out, pc.r, pc.k, pc.alpha, rng, task
                        )
                self.plugins[task] = bank
        else:
            rng = stream(seed, "plugins.shared")
            for li, blk in enumerate(self.blocks):
                for name in ADAPTED_LINEARS:
                    base = blk[name]
                    self.shared[f"layer{li}.{name}"] = LoraAdapter.init(
                        base.d_in, base.d_out, cfg.shared_rank, cfg.shared_alpha, rng
                    )
        self._state_cache: dict[bytes, list[np.ndarray]] = {}
        # probe hook: force a tap for a task (granularity ablations)
        self.tap_override: dict[TaskType, int] = {}

    def _load_pretrained_vision(self, seed: int) -> None:
        vc = self.cfg.vision
        key = (seed, repr(vc))
        if key not in _PRETRAINED_VISION:
            from .pretrain import pretrain_encoder

            pretrain_encoder(self.vision, stream(seed, "vision.pretrain"), vc.pretrain_steps, image_size=vc.image_size)
            _PRETRAINED_VISION[key] = {k: t.data.copy() for k, t in self.vision.parameters().items()}
        for k, t in self.vision.parameters().items():
            t.data[...] = _PRETRAINED_VISION[key][k]

    def _backbone_tensors(self) -> dict[str, Tensor]:
        out = {"embed": self.embed, "head": self.head}
        for li, blk in enumerate(self.blocks):
            for name, lin in blk.items():
                out[f"{li}.{name}.w"] = lin.weight
                if lin.bias is not None:
                    out[f"{li}.{name}.b"] = lin.bias
        return out

    def _load_pretrained_backbone(self, seed: int) -> None:
        c = self.cfg
        # everything the text-only pretraining depends on; arch and plugins are not part of it
        key = (seed, c.d_model, c.layers, c.heads, c.d_ff, c.max_seq, c.text_vocab_size, c.vq.K, c.lm_pretrain_steps)
        if key not in _PRETRAINED_BACKBONE:
            from .pretrain import pretrain_backbone

            pretrain_backbone(self, stream(seed, "backbone.pretrain"), c.lm_pretrain_steps)
            _PRETRAINED_BACKBONE[key] = {k: t.data.copy() for k, t in self._backbone_tensors().items()}
        for k, t in self._backbone_tensors().items():
            t.data[...] = _PRETRAINED_BACKBONE[key][k]

    # ------------------------------------------------------------------
    # parameters

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, t in self.vision.parameters().items():
            params[f"vision.{name}"] = t
        params["backbone.pos"] = self.pos
        for li, blk in enumerate(self.blocks):
            for name, lin in blk.items():
                params[f"backbone.layer{li}.{name}.weight"] = lin.weight
                if lin.bias is not None:
                    params[f"backbone.layer{li}.{name}.bias"] = lin.bias
        params["embed.weight"] = self.embed
        params["head.weight"] = self.head
        for key, adapter in self.adapters.items():
            tag = key.value if isinstance(key, TaskType) else key
            for name, t in adapter.parameters().items():
                params[f"adapter.{tag}.{name}"] = t
        for task, bank in self.plugins.items():
            for layer, sub in bank.items():
                for name, t in sub.parameters().items():
                    params[f"{task.value}.{layer}.{name}"] = t
        for layer, lora in self.shared.items():
            for name, t in lora.parameters().items():
                params[f"shared.{layer}.{name}"] = t
        return params

    def param_groups(self) -> dict[str, list[str]]:
        """Parameter names per trainability group."""
        groups: dict[str, list[str]] = {}
        for name in self.named_parameters():
            groups.setdefault(group_of(name), []).append(name)
        return groups

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_parameters().items()}
        state["vq.codes"] = np.array(self.codec.codebook.codes)
        state["vq.projection"] = self.codec.projection.encoder.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr
        self._state_cache.clear()

    # ------------------------------------------------------------------
    # sequences

    def image_states(self, image: ToyImage) -> list[np.ndarray]:
        key = image.grid.tobytes()
        cached = self._state_cache.get(key)
        if cached is None:
            with ad.no_grad():
                cached = [s.data for s in encode(image, self.vision)]
            if not any(t.requires_grad for t in self.vision.parameters().values()):
                self._state_cache[key] = cached
        return cached

    def tap_for(self, task: TaskType) -> int:
        if task in self.tap_override:
            return self.tap_override[task]
        if self.cfg.arch == "shared":
            return self.taps.abstract_tap if self.cfg.shared_tap == "abstract" else self.taps.concrete_tap
        return self.taps.tap_for(task)

    def build_sequence(
        self,
        image: ToyImage | None,
        text: Sequence[int],
        response=None,
        task: TaskType = TaskType.COMPREHENSION,
    ) -> JointSequence:
        """Visual rows, then prompt text, then the (loss-masked) response.

        For generation the response is a VQ index sequence (or list of
        indices) and is framed as START_IMG, VQ ids, END_IMG.
        """
        task = TaskType(task)
        visual = None
        if image is not None:
            states = self.image_states(image)
            visual = states[self.tap_for(task) - 1]
        if response is None:
            resp: list[int] = []
        elif task is TaskType.GENERATION:
            resp = [self.vocab.start_img, *to_token_ids(response, self.vocab), self.vocab.end_img]
        else:
            resp = list(response)
        tokens = list(text) + resp
        n_vis = 0 if visual is None else visual.shape[0]
        total = n_vis + len(tokens)
        if total > self.cfg.max_seq:
            raise SequenceLengthError(f"sequence of length {total} exceeds max_seq {self.cfg.max_seq}")
        if total == 0:
            raise SequenceLengthError("empty sequence")
        mask = np.zeros(total, dtype=bool)
        mask[total - len(resp) :] = True
        return JointSequence(task, visual, tokens, mask)

    # ------------------------------------------------------------------
    # forward

    def _linear(self, li: int, name: str, x: Tensor, task: TaskType, use_plugins: bool, counter=None) -> Tensor:
        base = self.blocks[li][name]
        if not use_plugins:
            return base(x)
        key = f"layer{li}.{name}"
        if self.cfg.arch == "hlora":
            return hlora_forward(x, base, select_submodule(task, self.plugins)[key], counter)
        return lora_forward(x, base, self.shared[key], counter)

    def _adapter(self, task: TaskType) -> AlignmentAdapter:
        return self.adapters["shared"] if self.cfg.arch == "shared" else self.adapters[task]

    def forward(
        self, seqs: JointSequence | Sequence[JointSequence], task: TaskType | None = None, use_plugins: bool = True
    ) -> Tensor:
        """Logits for every position of every sequence, stacked in order."""
        if isinstance(seqs, JointSequence):
            seqs = [seqs]
        task = TaskType(task if task is not None else seqs[0].task)
        if self.cfg.arch == "hlora" and use_plugins:
            select_submodule(task, self.plugins)
        lengths = [len(s) for s in seqs]
        if max(lengths) > self.cfg.max_seq:
            raise SequenceLengthError(f"sequence of length {max(lengths)} exceeds max_seq {self.cfg.max_seq}")
        N = sum(lengths)

        vis_rows, tok_rows, tok_ids, pos_ids = [], [], [], []
        offset = 0
        for s in seqs:
            nv = s.n_visual
            if nv:
                vis_rows.append(np.arange(offset, offset + nv))
            tok_rows.append(np.arange(offset + nv, offset + len(s)))
            tok_ids.extend(s.tokens)
            pos_ids.append(np.arange(len(s)))
            offset += len(s)

        parts, order = [], []
        if vis_rows:
            feats = np.concatenate([s.visual for s in seqs if s.n_visual], axis=0)
            parts.append(align(Tensor(feats), self._adapter(task)))
            order.append(np.concatenate(vis_rows))
        if tok_ids:
            parts.append(ad.take_rows(self.embed, tok_ids))
            order.append(np.concatenate(tok_rows))
        order = np.concatenate(order)
        x = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
        perm = np.empty(N, dtype=np.int64)
        perm[order] = np.arange(N)
        if not np.array_equal(perm, np.arange(N)):
            x = ad.take_rows(x, perm)
        x = ad.add_const(x, self.pos.data[np.concatenate(pos_ids)])

        for li in range(self.cfg.layers):
            a = ad.layer_norm_rows(x)
            q = self._linear(li, "q", a, task, use_plugins)
            k = self._linear(li, "k", a, task, use_plugins)
            v = self._linear(li, "v", a, task, use_plugins)
            att = ad.causal_attention(q, k, v, lengths, self.cfg.heads)
            x = ad.add(x, self._linear(li, "o", att, task, use_plugins))
            hdn = ad.gelu(self._linear(li, "ff1", ad.layer_norm_rows(x), task, use_plugins))
            x = ad.add(x, self._linear(li, "ff2", hdn, task, use_plugins))
        return ad.matmul(ad.layer_norm_rows(x), self.head)

    def loss(
        self, seqs: JointSequence | Sequence[JointSequence], task: TaskType | None = None, use_plugins: bool = True
    ) -> Tensor:
        """Teacher-forced next-token cross-entropy over response positions."""
        if isinstance(seqs, JointSequence):
            seqs = [seqs]
        targets, mask = next_token_targets(seqs)
        if not mask.any():
            raise ValueError("no response positions to score")
        return ad.cross_entropy(self.forward(seqs, task, use_plugins), targets, mask)

    # ------------------------------------------------------------------
    # decoding

    def generate(
        self,
        prompts: JointSequence | Sequence[JointSequence],
        task: TaskType | None = None,
        max_new: int | None = None,
        strict: bool = True,
    ):
        """Greedy constrained decoding.

        Comprehension may only emit text ids and stops at EOS.  Generation
        emits START_IMG, then exactly one VQ id per image patch, then
        END_IMG.  With ``strict`` an exhausted budget raises
        :class:`TruncationError`; otherwise the partial tokens are returned.
        A single prompt returns a single result.
        """
        single = isinstance(prompts, JointSequence)
        seqs = [prompts] if single else list(prompts)
        task = TaskType(task if task is not None else seqs[0].task)
        vm = self.vocab
        n_img = self.cfg.num_patches
        if max_new is None:
            max_new = n_img + 2 if task is TaskType.GENERATION else 8
        emitted: list[list[int]] = [[] for _ in seqs]
        done = [False] * len(seqs)

        if task is TaskType.GENERATION:
            allowed = np.arange(vm.vq_base, vm.vq_base + vm.K)
            for e in emitted:
                if max_new >= 1:
                    e.append(vm.start_img)
            steps = min(n_img, max(0, max_new - 1))
        else:
            allowed = np.arange(vm.text_vocab_size)
            steps = max_new

        for _ in range(steps):
            live = [i for i, ok in enumerate(done) if not ok]
            if not live:
                break
            cur = [seqs[i].extended(emitted[i]) for i in live]
            if max(len(c) for c in cur) > self.cfg.max_seq:
                break
            with ad.no_grad():
                logits = self.forward(cur, task).data
            ends = np.cumsum([len(c) for c in cur]) - 1
            choice = allowed[np.argmax(logits[ends][:, allowed], axis=1)]
            for i, tok in zip(live, choice):
                emitted[i].append(int(tok))
                if task is TaskType.COMPREHENSION and tok == self.cfg.eos_id:
                    done[i] = True

        results = []
        for i, toks in enumerate(emitted):
            if task is TaskType.GENERATION:
                if len(toks) == n_img + 1 and max_new >= n_img + 2:
                    toks.append(vm.end_img)
                ok = len(toks) == n_img + 2
            else:
                ok = done[i]
            if not ok:
                if strict:
                    raise TruncationError(f"decoding budget {max_new} exhausted for prompt {i}", toks)
                results.append(GenerationResult(toks))
                continue
            if task is TaskType.GENERATION:
                idx = IndexSequence(tuple(t - vm.vq_base for t in toks[1:-1]), self.cfg.grid_shape)
                results.append(GenerationResult(toks, idx, self.codec.decode(idx)))
            else:
                results.append(GenerationResult(toks))
        return results[0] if single else results


def group_of(name: str) -> str:
    """Trainability group of a parameter name."""
    head = name.split(".", 1)[0]
    if head == "adapter":
        return {"comp": "comp_adapter", "gen": "gen_adapter", "shared": "shared_adapter"}[name.split(".")[1]]
    return {
        "vision": "vision",
        "backbone": "backbone",
        "embed": "embedding",
        "head": "head",
        "comp": "comp_plugins",
        "gen": "gen_plugins",
        "shared": "shared_lora",
    }[head]


def next_token_targets(seqs: Sequence[JointSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Row p predicts position p + 1 of the same sequence."""
    targets, mask = [], []
    for s in seqs:
        ids = s.ids()
        t = np.zeros(len(s), dtype=np.int64)
        m = np.zeros(len(s), dtype=bool)
        t[:-1] = np.maximum(ids[1:], 0)
        m[:-1] = s.loss_mask[1:]
        targets.append(t)
        mask.append(m)
    return np.concatenate(targets), np.concatenate(mask)
