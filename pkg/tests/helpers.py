"""Shared test utilities: tiny configs and the central-difference gradient oracle."""

import numpy as np

from maskdistill import ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    """Gradcheck-sized model: 2 layers, dim 8, 16 patches."""
    base = dict(image_size=32, patch_size=8, embed_dim=8, depth=2, num_heads=2,
                mlp_ratio=2.0, decoder_dim=4, decoder_depth=1, decoder_heads=1,
                projection_dim=8)
    base.update(overrides)
    return ModelConfig(**base)


def small_config(**overrides) -> ModelConfig:
    """Behavior-test sized model, still fast."""
    base = dict(image_size=32, patch_size=8, embed_dim=32, depth=2, num_heads=4,
                mlp_ratio=2.0, decoder_dim=16, decoder_depth=1, decoder_heads=2,
                projection_dim=32)
    base.update(overrides)
    return ModelConfig(**base)


def central_diff_grads(loss_fn, param: np.ndarray, h: float = 1e-5,
                       entries=None) -> np.ndarray:
    """Central finite differences of a scalar loss wrt selected parameter entries.

    ``loss_fn`` re-evaluates the loss from current global state; ``param`` is
    perturbed in place and restored. Returns a flat array over ``entries``
    (all entries by default).
    """
    flat = param.reshape(-1)
    entries = list(entries) if entries is not None else list(range(flat.size))
    out = np.empty(len(entries))
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        out[j] = (lp - lm) / (2.0 * h)
    return out


def max_grad_mismatch(analytic: np.ndarray, numeric: np.ndarray,
                      abs_floor: float = 1e-6) -> float:
    """Largest relative error, ignoring coordinates where both sides sit below
    the absolute floor.

    Central differences at h=1e-5 carry ~1e-10 absolute roundoff, so relative
    error is meaningless below the floor (for example, the key-projection bias
    has an exactly-zero gradient by softmax shift invariance). A wrong VJP
    shows up orders of magnitude above both thresholds.
    """
    analytic = np.asarray(analytic).reshape(-1)
    numeric = np.asarray(numeric).reshape(-1)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale > abs_floor, err / np.maximum(scale, 1e-300), 0.0)
    return float(rel.max()) if rel.size else 0.0
