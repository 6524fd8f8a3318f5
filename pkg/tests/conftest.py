import numpy as np
import pytest

from hlora_lab.model import ModelConfig, PluginConfig, UnifiedModel, VisionConfig, VQConfig
from hlora_lab.training import SuiteSizes, Suite, build_codec


def tiny_config(arch: str = "hlora", **kw) -> ModelConfig:
    """Small model without the pretraining emulation, for fast unit tests."""
    base = dict(
        d_model=32,
        layers=1,
        heads=2,
        max_seq=64,
        d_ff=64,
        arch=arch,
        comp=PluginConfig(r=2, k=2, alpha=4.0),
        gen=PluginConfig(r=2, k=3, alpha=4.0),
        shared_rank=4,
        shared_alpha=8.0,
        lm_pretrain_steps=0,
        vision=VisionConfig(patch_size=4, d_vis=16, adapter_hidden=32, token_mix=(1.0, 1.0, 0.2, 0.2), pretrain_steps=0),
        vq=VQConfig(K=16, d_code=4),
    )
    base.update(kw)
    return ModelConfig(**base)


TINY_SIZES = SuiteSizes(caption=40, comp=60, recon=30, gen_text=30, gen_transform=30, val=16)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def codec(tiny_cfg):
    return build_codec(tiny_cfg, 0, corpus_size=120)


@pytest.fixture(scope="session")
def suite(codec):
    return Suite.build(0, codec, TINY_SIZES)


@pytest.fixture
def model(tiny_cfg, codec):
    return UnifiedModel(tiny_cfg, codec, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s[1:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
