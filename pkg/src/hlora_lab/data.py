"""Synthetic comprehension and generation tasks on 12x12 toy scenes.

Every label is computed from the generator metadata, never annotated:

* ``CompQA``: scene + question -> answer words (object count, the shape of a
  lone object, or its quadrant).
* ``GenFromText``: attribute words -> VQ indices of the rendered object.
* ``GenTransform``: scene + instruction -> VQ indices of the transformed
  scene (``recon`` keeps it, ``flip`` mirrors it left-right).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .adapters import TaskType
from .text import EOS_ID, tokenize
from .vision import ToyImage
from .vq import IndexSequence, VQCodec

IMAGE_SIZE = 12
SHAPES = ("square", "frame", "cross")
SHAPE_SIZES = {"square": (2, 3, 4), "frame": (3, 4), "cross": (3,)}


class TaskKind(str, enum.Enum):
    COMP_QA = "comp_qa"
    GEN_FROM_TEXT = "gen_from_text"
    GEN_TRANSFORM = "gen_transform"


@dataclass(frozen=True)
class SceneObject:
    shape: str
    size: int
    row: int
    col: int


def draw(objects, size: int = IMAGE_SIZE) -> np.ndarray:
    grid = np.zeros((size, size))
    for obj in objects:
        s, r, c = obj.size, obj.row, obj.col
        if r < 0 or c < 0 or r + s > size or c + s > size:
            raise ValueError(f"{obj} does not fit a {size}x{size} canvas")
        if obj.shape == "square":
            grid[r : r + s, c : c + s] = 1.0
        elif obj.shape == "frame":
            grid[r : r + s, c : c + s] = 1.0
            grid[r + 1 : r + s - 1, c + 1 : c + s - 1] = 0.0
        elif obj.shape == "cross":
            mid = s // 2
            grid[r : r + s, c + mid] = 1.0
            grid[r + mid, c : c + s] = 1.0
        else:
            raise ValueError(f"unknown shape {obj.shape!r}")
    return grid


def render(objects, size: int = IMAGE_SIZE) -> ToyImage:
    objects = tuple(objects)
    return ToyImage(draw(objects, size), {"objects": objects})


def random_scene(
    rng: np.random.Generator, n_objects: int, shapes=SHAPES, size: int = IMAGE_SIZE, fixed: tuple[str, ...] | None = None
) -> tuple[SceneObject, ...]:
    """Place objects without overlap (one-pixel clearance) by rejection.

    ``fixed`` names the shape of every object instead of drawing from ``shapes``.
    """
    if fixed is not None:
        n_objects = len(fixed)
    for _ in range(1000):
        occupied = np.zeros((size + 2, size + 2), dtype=bool)
        objs = []
        for i in range(n_objects):
            shape = fixed[i] if fixed is not None else shapes[rng.integers(len(shapes))]
            s = int(rng.choice(SHAPE_SIZES[shape]))
            for _ in range(200):
                r, c = int(rng.integers(0, size - s + 1)), int(rng.integers(0, size - s + 1))
                if not occupied[r : r + s + 2, c : c + s + 2].any():
                    occupied[r + 1 : r + s + 1, c + 1 : c + s + 1] = True
                    objs.append(SceneObject(shape, s, r, c))
                    break
            else:
                break
        if len(objs) == n_objects:
            return tuple(objs)
    raise RuntimeError(f"could not place {n_objects} objects")


def quadrant(obj: SceneObject, size: int = IMAGE_SIZE) -> tuple[str, str]:
    cy = obj.row + obj.size / 2
    cx = obj.col + obj.size / 2
    return ("top" if cy <= size / 2 else "bottom", "left" if cx <= size / 2 else "right")


@dataclass
class Sample:
    kind: TaskKind
    image: ToyImage | None
    text: list[int]
    response: list[int] | IndexSequence
    meta: dict = field(default_factory=dict)
    target: ToyImage | None = None

    @property
    def task(self) -> TaskType:
        return TaskType.COMPREHENSION if self.kind is TaskKind.COMP_QA else TaskType.GENERATION

    def key(self) -> bytes:
        img = b"" if self.image is None else self.image.grid.tobytes()
        return img + np.asarray(self.text, dtype=np.int64).tobytes()


@dataclass
class SyntheticTask:
    kind: TaskKind
    seed: int
    count: int
    val_count: int = 64
    questions: tuple[str, ...] = ("count", "shape", "where", "count_of", "where_of")
    transforms: tuple[str, ...] = ("recon", "flip")


@dataclass
class Dataset:
    task: SyntheticTask
    train: list[Sample]
    val: list[Sample]


def describe(objects) -> list[str]:
    """Caption words: ``<shape> <top|bottom> <left|right> ;`` per object in reading order."""
    words = []
    for o in sorted(objects, key=lambda o: (o.row, o.col)):
        words += [o.shape, *quadrant(o), ";"]
    return words


def comp_sample(rng: np.random.Generator, question: str) -> Sample:
    if question == "describe":
        objs = random_scene(rng, int(rng.integers(1, 5)))
        answer = describe(objs)
        prompt = "image ?"
    elif question == "count":
        n = int(rng.integers(1, 5))
        objs = random_scene(rng, n, shapes=("square",))
        answer = [str(n)]
    elif question == "shape":
        objs = random_scene(rng, 1)
        answer = [objs[0].shape]
    elif question == "where":
        objs = random_scene(rng, 1)
        answer = list(quadrant(objs[0]))
    elif question == "count_of":
        # how many of one shape among 2-4 mixed objects
        objs = random_scene(rng, int(rng.integers(2, 5)))
        target = SHAPES[rng.integers(len(SHAPES))]
        answer = [str(sum(o.shape == target for o in objs))]
        prompt = f"count {target} ?"
    elif question == "where_of":
        # quadrant of the named shape among 2-3 objects of distinct shapes
        shapes = tuple(rng.permutation(SHAPES)[: int(rng.integers(2, 4))])
        objs = random_scene(rng, 0, fixed=shapes)
        target = shapes[rng.integers(len(shapes))]
        answer = list(quadrant(next(o for o in objs if o.shape == target)))
        prompt = f"where {target} ?"
    else:
        raise ValueError(f"unknown question {question!r}")
    return Sample(
        TaskKind.COMP_QA,
        render(objs),
        tokenize(prompt if question in ("count_of", "where_of", "describe") else f"{question} ?"),
        tokenize(" ".join(answer)) + [EOS_ID],
        {"question": question, "objects": objs, "answer": answer},
    )


def attribute_prompt(obj: SceneObject) -> str:
    return f"shape={obj.shape};size={obj.size};row={obj.row};col={obj.col}"


def text_to_image_sample(rng: np.random.Generator, codec: VQCodec) -> Sample:
    obj = random_scene(rng, 1)[0]
    while obj.row > 9 or obj.col > 9:  # single-digit coordinates only
        obj = random_scene(rng, 1)[0]
    target = render([obj])
    return Sample(
        TaskKind.GEN_FROM_TEXT,
        None,
        tokenize("draw ; " + attribute_prompt(obj)),
        codec.encode(target),
        {"objects": (obj,)},
        target,
    )


def transform_sample(rng: np.random.Generator, codec: VQCodec, transform: str) -> Sample:
    objs = random_scene(rng, int(rng.integers(1, 3)))
    image = render(objs)
    if transform == "recon":
        grid = image.grid
    elif transform == "flip":
        grid = image.grid[:, ::-1].copy()
    else:
        raise ValueError(f"unknown transform {transform!r}")
    target = ToyImage(grid, {"transform": transform})
    return Sample(
        TaskKind.GEN_TRANSFORM,
        image,
        tokenize(transform),
        codec.encode(target),
        {"objects": objs, "transform": transform},
        target,
    )


def make_dataset(task: SyntheticTask, codec: VQCodec | None = None) -> Dataset:
    """Deterministic train/val split with no shared (image, prompt) pair."""
    if task.count < 1:
        raise ValueError("sample count must be positive")
    if task.kind is not TaskKind.COMP_QA and codec is None:
        raise ValueError("generation tasks need a codec to encode targets")
    rng = np.random.default_rng([task.seed, list(TaskKind).index(task.kind)])

    def one() -> Sample:
        if task.kind is TaskKind.COMP_QA:
            return comp_sample(rng, task.questions[rng.integers(len(task.questions))])
        if task.kind is TaskKind.GEN_FROM_TEXT:
            return text_to_image_sample(rng, codec)
        return transform_sample(rng, codec, task.transforms[rng.integers(len(task.transforms))])

    val: list[Sample] = []
    seen: set[bytes] = set()
    for _ in range(task.val_count * 50):
        if len(val) == task.val_count:
            break
        s = one()
        if s.key() not in seen:
            seen.add(s.key())
            val.append(s)
    train: list[Sample] = []
    for _ in range(task.count * 50):
        if len(train) == task.count:
            break
        s = one()
        if s.key() not in seen:
            train.append(s)
    if len(train) < task.count or len(val) < task.val_count:
        raise RuntimeError(f"could not draw {task.count}+{task.val_count} distinct samples for {task.kind.value}")
    return Dataset(task, train, val)


def codec_corpus(seed: int, n: int = 400) -> list[ToyImage]:
    """Scenes the codebook is fitted on."""
    rng = np.random.default_rng([seed, 99])
    return [render(random_scene(rng, int(rng.integers(1, 5)))) for _ in range(n)]
