import math

import numpy as np
import pytest

from hlora_lab.adapters import OpCounter, TaskType
from hlora_lab import autodiff as ad
from hlora_lab.autodiff import Tensor
from hlora_lab.data import Sample, TaskKind, random_scene, render
from hlora_lab.model import SequenceLengthError, TruncationError, UnifiedModel, next_token_targets
from hlora_lab.text import tokenize
from hlora_lab.training import StageMask, TrainConfig, train
from hlora_lab.vq import IndexSequence

from conftest import tiny_config


def _randomize_plugins(model, rng):
    for bank in model.plugins.values():
        for sub in bank.values():
            sub.B_merged.data[...] = rng.normal(0, 0.3, sub.B_merged.shape)


def test_sequence_lengths(model, rng):
    img = render(random_scene(rng, 1))
    seq = model.build_sequence(None, [4, 2], None, TaskType.COMPREHENSION)
    assert seq.n_visual == 0 and len(seq) == 2 and not seq.loss_mask.any()
    seq = model.build_sequence(img, [4, 2, 5, 6, 7], [8, 9, 1], TaskType.COMPREHENSION)
    assert len(seq) == 17
    assert seq.loss_mask.tolist() == [False] * 14 + [True] * 3
    gen = model.build_sequence(None, [7], IndexSequence(tuple(range(9)), (3, 3)), TaskType.GENERATION)
    assert int(gen.loss_mask.sum()) == 11
    assert gen.tokens[1] == model.vocab.start_img and gen.tokens[-1] == model.vocab.end_img


def test_sequence_too_long(model):
    with pytest.raises(SequenceLengthError):
        model.build_sequence(None, [4] * 65, None)


def test_task_tag_changes_output(model, rng):
    _randomize_plugins(model, rng)
    img = render(random_scene(rng, 2))
    a = model.forward(model.build_sequence(img, [4, 2], None, TaskType.COMPREHENSION)).data
    b = model.forward(model.build_sequence(img, [4, 2], None, TaskType.GENERATION)).data
    assert not np.array_equal(a, b)


def test_zero_init_transparency(model, rng):
    seq = model.build_sequence(render(random_scene(rng, 1)), [4, 2], None, TaskType.COMPREHENSION)
    np.testing.assert_array_equal(model.forward(seq).data, model.forward(seq, use_plugins=False).data)
    shared = UnifiedModel(tiny_config("shared"), model.codec, 0)
    seq = shared.build_sequence(None, [4, 2, 3], None, TaskType.GENERATION)
    np.testing.assert_array_equal(shared.forward(seq).data, shared.forward(seq, use_plugins=False).data)


def test_causality(model, rng):
    _randomize_plugins(model, rng)
    img = render(random_scene(rng, 1))
    toks = [4, 5, 6, 7, 8]
    a = model.forward(model.build_sequence(img, toks)).data
    b = model.forward(model.build_sequence(img, toks[:3] + [20, 21])).data
    n = 9 + 3
    np.testing.assert_array_equal(a[:n], b[:n])
    assert not np.array_equal(a[n:], b[n:])


def test_packed_batch_matches_single(model, rng):
    _randomize_plugins(model, rng)
    s1 = model.build_sequence(render(random_scene(rng, 1)), [4, 2], [10, 1])
    s2 = model.build_sequence(None, [5, 2, 3], [11, 1])
    both = model.forward([s1, s2]).data
    np.testing.assert_allclose(both[: len(s1)], model.forward(s1).data, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(both[len(s1) :], model.forward(s2).data, rtol=1e-10, atol=1e-12)


def test_uniform_logits_loss(model, rng):
    model.head.data[...] = 0.0
    seq = model.build_sequence(render(random_scene(rng, 1)), [4, 2], [10, 1])
    assert model.loss(seq).item() == pytest.approx(math.log(model.vocab.size), abs=1e-12)


def test_mask_excludes_prompt(model, rng):
    _randomize_plugins(model, rng)
    seq = model.build_sequence(render(random_scene(rng, 1)), [4, 2, 3], [10, 1])
    targets, mask = next_token_targets([seq])
    logits = model.forward(seq)
    corrupted = targets.copy()
    corrupted[~mask] = (corrupted[~mask] + 7) % model.vocab.size
    assert ad.cross_entropy(logits, targets, mask).item() == ad.cross_entropy(logits, corrupted, mask).item()
    assert model.loss(seq).item() == ad.cross_entropy(logits, targets, mask).item()


def test_generation_contract(model, rng):
    _randomize_plugins(model, rng)
    prompts = [model.build_sequence(None, tokenize("draw ; shape square"), None, TaskType.GENERATION) for _ in range(3)]
    for res in model.generate(prompts, TaskType.GENERATION):
        vm = model.vocab
        assert len(res.tokens) == 11
        assert res.tokens[0] == vm.start_img and res.tokens[-1] == vm.end_img
        assert all(vm.is_vq(t) for t in res.tokens[1:-1])
        assert res.image.shape == (12, 12)
    with pytest.raises(TruncationError) as exc:
        model.generate(prompts[0], TaskType.GENERATION, max_new=5)
    assert len(exc.value.partial) == 5


def test_comprehension_only_text_and_deterministic(model, rng):
    _randomize_plugins(model, rng)
    model.head.data[:, model.vocab.vq_base :] += 5.0  # tempt the decoder towards image ids
    seq = model.build_sequence(render(random_scene(rng, 2)), tokenize("count ?"))
    a = model.generate(seq, TaskType.COMPREHENSION, max_new=6, strict=False)
    b = model.generate(seq, TaskType.COMPREHENSION, max_new=6, strict=False)
    assert a.tokens == b.tokens
    assert all(model.vocab.is_text(t) for t in a.tokens)


def test_adapted_layer_opcounts(model, rng):
    counter = OpCounter()
    x = Tensor(rng.normal(size=(3, 32)))
    model._linear(0, "q", x, TaskType.COMPREHENSION, True, counter)
    assert counter.total() == 6


def test_overfit_single_sample(model, rng):
    img = render(random_scene(rng, 1))
    s = Sample(TaskKind.COMP_QA, img, tokenize("shape ?"), tokenize("cross") + [1])
    # a frozen random head bounds the logit margin, so the head trains here too
    mask = StageMask(frozenset({"comp_adapter", "comp_plugins", "embedding", "head"}))
    cfg = TrainConfig(steps=100, batch_size=1, lr=dict.fromkeys(("adapter", "plugins", "embedding", "head"), 1e-2))
    train(model, [s], mask, cfg, "overfit")
    assert model.loss(model.build_sequence(img, s.text, s.response)).item() < 0.01


def test_state_dict_roundtrip(model, rng):
    _randomize_plugins(model, rng)
    state = model.state_dict()
    other = UnifiedModel(model.cfg, model.codec, seed=5)
    other.load_state_dict(state)
    for k, t in other.named_parameters().items():
        np.testing.assert_array_equal(t.data, state[k])
