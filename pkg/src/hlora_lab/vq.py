"""Nearest-code image tokenizer and the VQ <-> vocabulary id mapping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vision import ToyImage, patchify, unpatchify


class CodebookError(ValueError):
    pass


class Codebook:
    def __init__(self, codes: np.ndarray):
        codes = np.array(codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 2:
            raise CodebookError("a codebook needs at least two code vectors")
        if not np.all(np.isfinite(codes)):
            raise CodebookError("codebook contains non-finite values")
        diff = codes[:, None, :] - codes[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 1e-9:
            raise CodebookError("codebook vectors must be pairwise distinct")
        codes.setflags(write=False)
        self.codes = codes

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def d_code(self) -> int:
        return self.codes.shape[1]


def _sq_dist(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    # direct differences keep exact ties exact
    diff = z[:, None, :] - codes[None, :, :]
    return (diff * diff).sum(-1)


def fit_codebook(samples: np.ndarray, K: int, rng: np.random.Generator, iters: int = 50) -> Codebook:
    """Lloyd iterations from a k-means++ seeding over the distinct samples."""
    samples = np.asarray(samples, dtype=np.float64)
    distinct = np.unique(samples, axis=0)
    if distinct.shape[0] < K:
        raise CodebookError(f"need at least {K} distinct samples, got {distinct.shape[0]}")

    centers = [distinct[rng.integers(distinct.shape[0])]]
    d2 = _sq_dist(distinct, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        idx = int(rng.choice(distinct.shape[0], p=d2 / total)) if total > 0 else int(np.argmax(d2))
        centers.append(distinct[idx])
        d2 = np.minimum(d2, _sq_dist(distinct, distinct[idx][None])[:, 0])
    centers = np.array(centers)

    for _ in range(iters):
        assign = _sq_dist(samples, centers).argmin(axis=1)
        new = centers.copy()
        for j in range(K):
            members = samples[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-served sample
                worst = _sq_dist(samples, new).min(axis=1).argmax()
                new[j] = samples[worst]
        if np.array_equal(new, centers):
            break
        centers = new
    return Codebook(centers)


def quantize(z: np.ndarray, cb: Codebook) -> int:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cb.d_code,):
        raise CodebookError(f"latent has shape {z.shape}, codebook expects ({cb.d_code},)")
    return int(_sq_dist(z[None], cb.codes)[0].argmin())


def quantize_many(z: np.ndarray, cb: Codebook) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cb.d_code:
        raise CodebookError(f"latents have shape {z.shape}, codebook expects (*, {cb.d_code})")
    return _sq_dist(z, cb.codes).argmin(axis=1)


@dataclass(frozen=True)
class IndexSequence:
    indices: tuple[int, ...]
    spatial_shape: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.spatial_shape
        if rows * cols != len(self.indices):
            raise ValueError(f"{len(self.indices)} indices do not fill a {rows}x{cols} grid")

    def __len__(self) -> int:
        return len(self.indices)


class PatchProjection:
    """Fixed random patch -> latent projection and its pseudo-inverse decoder."""

    def __init__(self, encoder: np.ndarray, patch_size: int):
        self.encoder = np.asarray(encoder, dtype=np.float64)
        self.decoder = np.linalg.pinv(self.encoder)
        self.patch_size = patch_size

    @classmethod
    def random(cls, patch_size: int, d_code: int, rng: np.random.Generator) -> "PatchProjection":
        d_patch = patch_size * patch_size
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d_patch), size=(d_patch, d_code)), patch_size)

    def latents(self, image: ToyImage) -> tuple[np.ndarray, tuple[int, int]]:
        patches = patchify(image.grid, self.patch_size)
        h, w = image.shape
        return patches @ self.encoder, (h // self.patch_size, w // self.patch_size)


def encode_image(image: ToyImage, cb: Codebook, latent_map: PatchProjection) -> IndexSequence:
    z, shape = latent_map.latents(image)
    return IndexSequence(tuple(int(i) for i in quantize_many(z, cb)), shape)


def decode_indices(idx: IndexSequence, cb: Codebook, decoder: PatchProjection) -> ToyImage:
    ids = np.asarray(idx.indices, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cb.K):
        raise CodebookError(f"index out of range [0, {cb.K})")
    patches = cb.codes[ids] @ decoder.decoder
    grid = unpatchify(patches, idx.spatial_shape, decoder.patch_size)
    return ToyImage(np.clip(grid, 0.0, 1.0))


def quantization_floor(image: ToyImage, cb: Codebook, latent_map: PatchProjection) -> float:
    """Pixel MSE of substituting every patch latent by its nearest code, unclamped."""
    z, shape = latent_map.latents(image)
    ids = quantize_many(z, cb)
    recon = unpatchify(cb.codes[ids] @ latent_map.decoder, shape, latent_map.patch_size)
    return float(((recon - image.grid) ** 2).mean())


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class VocabularyMap:
    text_vocab_size: int
    K: int

    def __post_init__(self):
        if self.text_vocab_size < 1 or self.K < 2:
            raise ValueError("vocabulary needs text ids and at least two codes")

    @property
    def vq_base(self) -> int:
        return self.text_vocab_size

    @property
    def start_img(self) -> int:
        return self.text_vocab_size + self.K

    @property
    def end_img(self) -> int:
        return self.text_vocab_size + self.K + 1

    @property
    def size(self) -> int:
        return self.text_vocab_size + self.K + 2

    def is_text(self, tok: int) -> bool:
        return 0 <= tok < self.text_vocab_size

    def is_vq(self, tok: int) -> bool:
        return self.vq_base <= tok < self.vq_base + self.K

    def image_token_ids(self) -> np.ndarray:
        """VQ range plus the two image specials."""
        return np.arange(self.vq_base, self.size)


def to_token_ids(idx: IndexSequence | list[int] | tuple[int, ...], vm: VocabularyMap) -> list[int]:
    indices = idx.indices if isinstance(idx, IndexSequence) else idx
    out = []
    for i in indices:
        if not 0 <= i < vm.K:
            raise VocabularyError(f"VQ index {i} outside [0, {vm.K})")
        out.append(vm.vq_base + int(i))
    return out


def from_token_ids(tokens, vm: VocabularyMap) -> list[int]:
    out = []
    for t in tokens:
        if not vm.is_vq(int(t)):
            raise VocabularyError(f"token id {t} is not in the VQ range [{vm.vq_base}, {vm.vq_base + vm.K})")
        out.append(int(t) - vm.vq_base)
    return out


class VQCodec:
    """Codebook, patch projection and vocabulary map bundled for the model."""

    def __init__(self, codebook: Codebook, projection: PatchProjection, vocab: VocabularyMap):
        if codebook.d_code != projection.encoder.shape[1]:
            raise CodebookError("projection width does not match code dimension")
        if vocab.K != codebook.K:
            raise CodebookError(f"vocabulary reserves {vocab.K} VQ ids for a {codebook.K}-code book")
        self.codebook = codebook
        self.projection = projection
        self.vocab = vocab

    @classmethod
    def fit(
        cls,
        images,
        K: int,
        d_code: int,
        patch_size: int,
        text_vocab_size: int,
        rng: np.random.Generator,
    ) -> "VQCodec":
        projection = PatchProjection.random(patch_size, d_code, rng)
        latents = np.concatenate([projection.latents(img)[0] for img in images], axis=0)
        return cls(fit_codebook(latents, K, rng), projection, VocabularyMap(text_vocab_size, K))

    def encode(self, image: ToyImage) -> IndexSequence:
        return encode_image(image, self.codebook, self.projection)

    def decode(self, idx: IndexSequence) -> ToyImage:
        return decode_indices(idx, self.codebook, self.projection)

    def floor(self, image: ToyImage) -> float:
        return quantization_floor(image, self.codebook, self.projection)
