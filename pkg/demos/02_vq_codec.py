"""The VQ codec: images become a fixed number of codebook ids and back."""

import numpy as np

from hlora_lab.config import RunConfig
from hlora_lab.data import random_scene, render
from hlora_lab.training import build_codec
from hlora_lab.vq import from_token_ids, to_token_ids

cfg = RunConfig().model
codec = build_codec(cfg, seed=0)
print("codebook", codec.codebook.codes.shape, "patch", cfg.vision.patch_size, "patches per image", cfg.num_patches)

rng = np.random.default_rng(1)
img = render(random_scene(rng, 3))
idx = codec.encode(img)
print("\nindices:", list(idx.indices))

# VQ ids live after the text vocabulary in the shared token space
tokens = to_token_ids(idx, codec.vocab)
print("token ids:", tokens[:8], "...")
print("round trip:", from_token_ids(tokens, codec.vocab) == list(idx.indices))

recon = codec.decode(idx)
mse = float(((recon.grid - img.grid) ** 2).mean())
print(f"\nreconstruction mse {mse:.5f}, quantization floor {codec.floor(img):.5f}")


def show(grid):
    for row in grid:
        print("  " + "".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in np.clip(row, 0, 0.999)))


print("\noriginal")
show(img.grid)
print("decoded")
show(recon.grid)
