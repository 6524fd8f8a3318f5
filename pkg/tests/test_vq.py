import numpy as np
import pytest

from hlora_lab.data import codec_corpus, random_scene, render
from hlora_lab.vision import ToyImage
from hlora_lab.vq import (
    Codebook,
    CodebookError,
    IndexSequence,
    PatchProjection,
    VocabularyError,
    VocabularyMap,
    VQCodec,
    decode_indices,
    encode_image,
    fit_codebook,
    from_token_ids,
    quantization_floor,
    quantize,
    to_token_ids,
)


def test_fit_saturated(rng):
    pts = rng.normal(size=(5, 3))
    cb = fit_codebook(pts, 5, rng)
    assert sorted(map(tuple, cb.codes)) == sorted(map(tuple, pts))


def test_fit_two_blobs(rng):
    a = rng.normal(0, 0.01, size=(50, 2)) + [5.0, 5.0]
    b = rng.normal(0, 0.01, size=(70, 2)) - [5.0, 5.0]
    cb = fit_codebook(np.vstack([a, b]), 2, rng)
    got = sorted(map(tuple, cb.codes))
    want = sorted([tuple(a.mean(0)), tuple(b.mean(0))])
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_fit_duplicates_rejected(rng):
    with pytest.raises(CodebookError):
        fit_codebook(np.ones((10, 2)), 2, rng)


def test_quantize_examples():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert quantize([0.9, 0.8], cb) == 1
    assert quantize([1.0, 1.0], cb) == 1
    assert quantize([0.5, 0.5], cb) == 0


def _codec(rng, patch=4, K=16):
    return VQCodec.fit(codec_corpus(3, 80), K, 4, patch, 10, rng)


def test_encode_shapes_and_locality(rng):
    c = _codec(rng)
    img = render(random_scene(rng, 2))
    idx = c.encode(img)
    assert len(idx) == 9 and idx.spatial_shape == (3, 3)
    assert len(set(c.encode(ToyImage(np.zeros((12, 12)))).indices)) == 1
    g = img.grid.copy()
    g[4:8, 4:8] = 1.0 - g[4:8, 4:8]
    other = c.encode(ToyImage(g))
    diff = [i for i, (a, b) in enumerate(zip(idx.indices, other.indices)) if a != b]
    assert set(diff) <= {4}


def test_decode_floor_and_tiling(rng):
    c = _codec(rng)
    for _ in range(20):
        img = render(random_scene(rng, int(rng.integers(1, 4))))
        mse = float(((c.decode(c.encode(img)).grid - img.grid) ** 2).mean())
        assert mse <= c.floor(img) + 1e-12
    j = 3
    tiled = c.decode(IndexSequence((j,) * 9, (3, 3))).grid
    patch = np.clip(c.codebook.codes[j] @ c.projection.decoder, 0, 1).reshape(4, 4)
    np.testing.assert_allclose(tiled, np.tile(patch, (3, 3)))
    with pytest.raises(CodebookError):
        c.decode(IndexSequence((16,) * 9, (3, 3)))


def test_quantize_idempotent(rng):
    c = _codec(rng)
    for j in range(c.codebook.K):
        assert quantize(c.codebook.codes[j], c.codebook) == j


def test_token_bijection(rng):
    vm = VocabularyMap(10, 16)
    assert to_token_ids([0], vm) == [vm.vq_base]
    seq = list(rng.integers(0, 16, size=30))
    assert from_token_ids(to_token_ids(seq, vm), vm) == seq
    with pytest.raises(VocabularyError):
        from_token_ids([vm.start_img], vm)
    with pytest.raises(VocabularyError):
        to_token_ids([16], vm)
    assert vm.size == 10 + 16 + 2
