"""Supervised pretraining of the vision encoder on scene-level attributes.

Stands in for a pretrained image encoder: the final block's mean-pooled
state is trained to predict the object count, per-shape counts and
quadrant occupancy of random scenes.  Deep states become semantic while
shallow states stay close to the patches.  The encoder is frozen again
afterwards; nothing downstream sees these heads.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .adapters import TaskType
from .data import IMAGE_SIZE, SHAPES, SyntheticTask, TaskKind, comp_sample, describe, quadrant, random_scene, render
from .optim import Adam
from .text import tokenize
from .vision import EncoderStack, ToyImage, encode_many

QUADRANTS = (("top", "left"), ("top", "right"), ("bottom", "left"), ("bottom", "right"))
MAX_OBJECTS = 4
QUESTIONS = SyntheticTask(TaskKind.COMP_QA, 0, 1).questions


def scene_labels(objects) -> np.ndarray:
    """Class ids: [count - 1, per-shape counts..., per-quadrant occupancy...]."""
    quads = {quadrant(o) for o in objects}
    return np.array(
        [len(objects) - 1]
        + [sum(o.shape == s for o in objects) for s in SHAPES]
        + [int(q in quads) for q in QUADRANTS]
    )


HEAD_SIZES = (MAX_OBJECTS,) + (MAX_OBJECTS + 1,) * len(SHAPES) + (2,) * len(QUADRANTS)


def pretraining_corpus(rng: np.random.Generator, n: int, size: int = IMAGE_SIZE) -> tuple[list[ToyImage], np.ndarray]:
    images, labels = [], []
    for _ in range(n):
        objs = random_scene(rng, int(rng.integers(1, MAX_OBJECTS + 1)), size=size)
        images.append(render(objs, size))
        labels.append(scene_labels(objs))
    return images, np.array(labels)


def pretrain_encoder(
    enc: EncoderStack,
    rng: np.random.Generator,
    steps: int,
    batch: int = 32,
    lr: float = 3e-3,
    corpus: int = 2000,
    image_size: int = IMAGE_SIZE,
) -> list[float]:
    """Train ``enc`` in place; returns the loss trace."""
    if steps <= 0:
        return []
    images, labels = pretraining_corpus(rng, corpus, image_size)
    heads = [ad.Tensor(rng.normal(0.0, 1.0 / np.sqrt(enc.d_vis), (enc.d_vis, c)), requires_grad=True) for c in HEAD_SIZES]
    params = {f"enc.{k}": t for k, t in enc.parameters().items()}
    params.update({f"head{i}": h for i, h in enumerate(heads)})
    enc.set_trainable(True)
    opt = Adam()
    losses = []
    try:
        for _ in range(steps):
            idx = rng.integers(0, corpus, size=batch)
            states = encode_many([images[i] for i in idx], enc)
            n = states[-1].shape[0] // batch
            pooled = ad.matmul(ad.Tensor(np.kron(np.eye(batch), np.full((1, n), 1.0 / n))), states[-1])
            loss = None
            for j, h in enumerate(heads):
                term = ad.cross_entropy(ad.matmul(pooled, h), labels[idx, j], np.ones(batch, dtype=bool))
                loss = term if loss is None else ad.add(loss, term)
            loss = ad.scale(loss, 1.0 / len(heads))
            for t in params.values():
                t.grad = None
            loss.backward()
            opt.step(params, lr)
            losses.append(loss.item())
    finally:
        enc.set_trainable(False)
        for t in params.values():
            t.grad = None
    return losses


def text_qa_sample(rng: np.random.Generator, questions=QUESTIONS) -> tuple[list[int], list[int]]:
    """Scene description + question -> answer, the text-only analogue of a comprehension sample."""
    s = comp_sample(rng, questions[rng.integers(len(questions))])
    return tokenize(" ".join(describe(s.meta["objects"]))) + list(s.text), list(s.response)


def pretrain_backbone(model, rng: np.random.Generator, steps: int, batch: int = 32, lr: float = 3e-3, corpus: int = 4000) -> list[float]:
    """Text-only language modelling of the backbone, embedding and head.

    Stands in for a pretrained language model that already answers questions
    about scenes described in words; it never sees images or image tokens.
    """
    from .model import JointSequence

    if steps <= 0:
        return []
    pairs = [text_qa_sample(rng) for _ in range(corpus)]
    seqs = []
    for prompt, answer in pairs:
        mask = np.ones(len(prompt) + len(answer), dtype=bool)
        mask[0] = False
        seqs.append(JointSequence(TaskType.COMPREHENSION, None, prompt + answer, mask))
    params = model._backbone_tensors()
    for t in params.values():
        t.requires_grad = True
    opt = Adam()
    losses = []
    try:
        for step in range(steps):
            idx = rng.integers(0, corpus, size=batch)
            loss = model.loss([seqs[i] for i in idx], TaskType.COMPREHENSION, use_plugins=False)
            for t in params.values():
                t.grad = None
            loss.backward()
            # linear decay keeps the end point stable
            opt.step(params, lr * (1.0 - step / steps))
            losses.append(loss.item())
    finally:
        for t in params.values():
            t.requires_grad = False
            t.grad = None
    return losses
