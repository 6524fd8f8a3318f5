import numpy as np
import pytest

from hlora_lab import autodiff as ad
from hlora_lab.adapters import (
    ConfigurationError,
    FrozenLinear,
    HLoraSubmodule,
    LoraAdapter,
    OpCounter,
    RouterLayer,
    TaskType,
    hlora_forward,
    lora_forward,
    moelora_forward_reference,
    select_submodule,
)
from hlora_lab.autodiff import DimensionError, Tensor


def _two_expert_instance():
    """k=2, r=1, d=1, x=1, A=(2,3), B=(1,1), w=(0.5,0.5), alpha=1, W0=0."""
    base = FrozenLinear(np.zeros((1, 1)))
    experts = [LoraAdapter([[2.0]], [[1.0]], 1.0), LoraAdapter([[3.0]], [[1.0]], 1.0)]
    router = RouterLayer(np.zeros((1, 2)))  # softmax of equal logits
    return base, experts, router


def test_lora_hand_example():
    base = FrozenLinear(np.eye(2))
    out = lora_forward(Tensor([[1.0, 0.0]]), base, LoraAdapter([[1.0], [0.0]], [[2.0, 0.0]], 1.0))
    assert out.data.tolist() == [[3.0, 0.0]]


def test_lora_zero_b_and_zero_x(rng):
    base = FrozenLinear.random(5, 3, rng, bias=True)
    x = Tensor(rng.normal(size=(4, 5)))
    ad_init = LoraAdapter.init(5, 3, 2, 4.0, rng)
    np.testing.assert_array_equal(lora_forward(x, base, ad_init).data, base(x).data)
    zero = lora_forward(Tensor(np.zeros((1, 5))), base, LoraAdapter(rng.normal(size=(5, 2)), rng.normal(size=(2, 3)), 4.0))
    np.testing.assert_array_equal(zero.data, base.bias.data[None])


def test_moelora_and_hlora_hand_example():
    base, experts, router = _two_expert_instance()
    x = Tensor([[1.0]])
    ref = moelora_forward_reference(x, base, experts, router)
    merged = hlora_forward(x, base, HLoraSubmodule.from_experts(experts, router))
    assert ref.data.item() == pytest.approx(5.0, abs=1e-12)
    assert merged.data.item() == pytest.approx(5.0, abs=1e-12)


def test_single_expert_reduces_to_lora(rng):
    base = FrozenLinear.random(4, 3, rng)
    e = LoraAdapter(rng.normal(size=(4, 2)), rng.normal(size=(2, 3)), 3.0)
    x = Tensor(rng.normal(size=(5, 4)))
    ref = moelora_forward_reference(x, base, [e], RouterLayer.init(4, 1, rng))
    np.testing.assert_allclose(ref.data, lora_forward(x, base, e).data, rtol=1e-12)


def test_conventional_scale_divides_by_k(rng):
    base = FrozenLinear(np.zeros((3, 2)))
    experts = [LoraAdapter(rng.normal(size=(3, 1)), rng.normal(size=(1, 2)), 2.0) for _ in range(4)]
    router = RouterLayer.init(3, 4, rng)
    x = Tensor(rng.normal(size=(2, 3)))
    scaled = moelora_forward_reference(x, base, experts, router).data
    conv = moelora_forward_reference(x, base, experts, router, conventional_scale=True).data
    np.testing.assert_allclose(scaled, 4 * conv, rtol=1e-12)


@pytest.mark.parametrize("k,expected", [(1, 6), (2, 11), (4, 21), (8, 41), (32, 161)])
def test_moelora_opcount(rng, k, expected):
    base = FrozenLinear.random(3, 3, rng)
    experts = [LoraAdapter.init(3, 3, 2, 4.0, rng) for _ in range(k)]
    c = OpCounter()
    moelora_forward_reference(Tensor(rng.normal(size=(2, 3))), base, experts, RouterLayer.init(3, k, rng), c)
    assert c.total() == expected
    if k == 4:
        assert (c.expert_multiplications, c.router_multiplications, c.weight_expansions, c.dot_products, c.additions) == (
            8, 1, 4, 4, 4,
        )


@pytest.mark.parametrize("k", [1, 2, 4, 8, 32])
def test_hlora_opcount_fixed(rng, k):
    c = OpCounter()
    sub = HLoraSubmodule.init(3, 3, 2, k, 4.0, rng)
    hlora_forward(Tensor(rng.normal(size=(2, 3))), FrozenLinear.random(3, 3, rng), sub, c)
    assert c.total() == 6


def test_lora_opcount(rng):
    c = OpCounter()
    lora_forward(Tensor(np.ones((1, 2))), FrozenLinear(np.eye(2)), LoraAdapter.init(2, 2, 1, 1.0, rng), c)
    assert c.total() == 3


def test_hlora_init_is_transparent(rng):
    base = FrozenLinear.random(6, 5, rng, bias=True)
    sub = HLoraSubmodule.init(6, 5, 2, 4, 8.0, rng)
    assert not sub.B_merged.data.any()
    x = Tensor(rng.normal(size=(7, 6)))
    np.testing.assert_array_equal(hlora_forward(x, base, sub).data, base(x).data)


def test_merge_block_order_and_split(rng):
    experts = [LoraAdapter(rng.normal(size=(4, 2)), rng.normal(size=(2, 3)), 2.0) for _ in range(3)]
    sub = HLoraSubmodule.from_experts(experts, RouterLayer.init(4, 3, rng))
    for i, e in enumerate(experts):
        np.testing.assert_array_equal(sub.A_merged.data[:, 2 * i : 2 * i + 2], e.A.data)
        np.testing.assert_array_equal(sub.B_merged.data[2 * i : 2 * i + 2], e.B.data)
    for a, b in zip(sub.split_experts(), experts):
        np.testing.assert_array_equal(a.A.data, b.A.data)


def test_router_rows_and_expanded_weights(rng):
    sub = HLoraSubmodule.init(5, 4, 3, 4, 6.0, rng)
    w = sub.router(Tensor(rng.normal(size=(8, 5)))).data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)
    wx = ad.expand_cols(Tensor(w), sub.r, sub.scale).data
    for i in range(sub.k):
        block = wx[:, 3 * i : 3 * i + 3]
        np.testing.assert_allclose(block, np.repeat(w[:, i : i + 1] * 6.0 * 4 / 3, 3, axis=1), rtol=1e-12)


def test_shape_errors(rng):
    sub = HLoraSubmodule.init(5, 4, 2, 2, 4.0, rng)
    with pytest.raises(DimensionError):
        hlora_forward(Tensor(np.ones((1, 3))), FrozenLinear.random(3, 4, rng), sub)
    with pytest.raises(DimensionError):
        HLoraSubmodule(np.ones((5, 3)), np.zeros((4, 4)), RouterLayer.init(5, 2, rng), 2, 4.0)
    with pytest.raises(DimensionError):
        moelora_forward_reference(
            Tensor(np.ones((1, 3))), FrozenLinear.random(3, 3, rng), [LoraAdapter.init(3, 3, 1, 1.0, rng)], RouterLayer.init(3, 2, rng)
        )
    with pytest.raises(ValueError):
        RouterLayer.init(3, 0, rng)


def test_select_submodule_and_isolation(rng):
    comp = HLoraSubmodule.init(4, 4, 2, 2, 4.0, rng, TaskType.COMPREHENSION)
    gen = HLoraSubmodule.init(4, 4, 4, 2, 8.0, rng, TaskType.GENERATION)
    bank = {TaskType.COMPREHENSION: comp, TaskType.GENERATION: gen}
    assert select_submodule(TaskType.GENERATION, bank) is gen
    assert select_submodule("comp", bank) is comp
    before = gen.A_merged.data.copy()
    comp.A_merged.data += 1.0
    np.testing.assert_array_equal(gen.A_merged.data, before)
    with pytest.raises(ConfigurationError):
        select_submodule(TaskType.GENERATION, {TaskType.COMPREHENSION: comp})


def test_hlora_gradients(rng):
    base = FrozenLinear.random(4, 3, rng)
    sub = HLoraSubmodule(rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), RouterLayer.init(4, 3, rng, std=0.5), 2, 2.0)
    x = Tensor(rng.normal(size=(5, 4)))
    target = rng.normal(size=(5, 3))
    fn = lambda: ad.sum_all(ad.mul(hlora_forward(x, base, sub), Tensor(target)))
    ad.gradcheck(fn, list(sub.parameters().values()))
