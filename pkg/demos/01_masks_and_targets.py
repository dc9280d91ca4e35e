"""Patches, masks, and reconstruction targets.

Walks through the data plumbing one step at a time: split an image into patch
tokens, hide three quarters of them, and look at the three target flavors the
student can be asked to reconstruct (normalized pixels, the teacher's patch
embedding, a deep teacher block).
"""

import numpy as np

from maskdistill import (DistillConfig, ModelConfig, forward_teacher, gather_visible,
                         init_model, patchify, sample_mask, scatter_with_mask_tokens,
                         synthetic_gratings, unpatchify)

rng = np.random.default_rng(0)

# one synthetic image, [0,1] floats
manifest = synthetic_gratings(1, 10, 32, seed=4)
image = manifest.records[0].source.astype(np.float32) / 255.0
print(f"image: {image.shape}, class {manifest.records[0].label}")

# 1. patchify: 32x32 at 8px patches -> 16 tokens of dim 192
seq = patchify(image, 8)
print(f"tokens: {seq.tokens.shape}, position ids {seq.position_ids[:6]}...")
assert np.array_equal(unpatchify(seq.tokens, 8, (4, 4)), image), "round trip is exact"

# 2. mask 75% of the patches; only 4 tokens stay visible
mask = sample_mask(seq.n_tokens, 0.75, rng)
visible = gather_visible(seq, mask)
print(f"mask: {mask.n_masked} masked / {mask.n_visible} visible "
      f"(visible ids {visible.position_ids})")

# 3. the decoder later re-assembles full length from a learned mask token
full = scatter_with_mask_tokens(visible, mask, mask_token=np.zeros(192))
print(f"scattered back to {full.shape}; masked rows are the placeholder:",
      bool(np.all(full[mask.flags] == 0)))

# 4. reconstruction targets
cfg = ModelConfig(image_size=32, patch_size=8, embed_dim=96, depth=4, num_heads=4)
teacher = init_model(cfg, seed=1, encoder_only=True)

pixel = forward_teacher(teacher, image, target="pixel")
block0 = forward_teacher(teacher, image, target="block_0")
deep = forward_teacher(teacher, image, target="block_4")
print(f"pixel target   {pixel.shape}: per-patch standardized "
      f"(row mean {pixel[0].mean():+.2e}, row std {pixel[0].std():.3f})")
print(f"block_0 target {block0.shape}: linear projection + position embedding")
print(f"block_4 target {deep.shape}: deep features, LN off by default")

d = DistillConfig(target="block_4", mask_ratio=0.75)
print(f"distill config: reconstruct {d.target} at {d.loss_positions} "
      f"with {d.loss_kind} (beta={d.smooth_l1_beta})")
