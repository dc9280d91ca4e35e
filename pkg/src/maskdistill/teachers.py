"""Target providers: where reconstruction targets come from.

Three sources, one call signature ``provider(images, tokens, indices)``:
normalized pixel patches, a live (frozen) teacher encoder, or a precomputed
per-image feature archive that bypasses the teacher forward entirely.
"""

from __future__ import annotations

import numpy as np

from .config import DistillConfig
from .errors import DataError
from .model import forward_teacher
from .store import ParameterStore

LN_EPS = 1e-6


class PixelTargetProvider:
    """Per-patch standardized raw pixels (or raw pixels when normalize=False)."""

    def __init__(self, normalize: bool = True):
        self.normalize = normalize

    def __call__(self, images, tokens, indices):
        if not self.normalize:
            return tokens
        mu = tokens.mean(axis=-1, keepdims=True)
        var = tokens.var(axis=-1, keepdims=True)
        return (tokens - mu) / np.sqrt(var + LN_EPS)


class LiveTeacherProvider:
    """Frozen teacher encoder run on the intact image each call.

    Reads the teacher store by reference, so per-step EMA updates to the store
    are reflected in subsequent targets.
    """

    def __init__(self, teacher: ParameterStore, target: str, apply_final_ln: bool):
        self.teacher = teacher
        self.target = target
        self.apply_final_ln = apply_final_ln

    def __call__(self, images, tokens, indices):
        return forward_teacher(self.teacher, images, self.target, self.apply_final_ln)


class PrecomputedTeacherProvider:
    """Per-image patch features loaded from an archive; indexed by record id."""

    def __init__(self, features: np.ndarray):
        features = np.asarray(features)
        if features.ndim != 3:
            raise DataError(f"feature archive must be [n_images, n_patches, dim], got {features.shape}")
        self.features = features

    def __call__(self, images, tokens, indices):
        if np.max(indices) >= self.features.shape[0]:
            raise DataError("record index outside the precomputed feature archive")
        return self.features[indices]


def make_target_provider(distill: DistillConfig, teacher: ParameterStore | None = None,
                         features: np.ndarray | None = None, projection_dim: int | None = None):
    """Build the provider a stage needs, validating feature dimensions."""
    if features is not None:
        if projection_dim is not None and features.shape[-1] != projection_dim:
            raise DataError(
                f"feature archive dim {features.shape[-1]} != projection_dim {projection_dim}")
        return PrecomputedTeacherProvider(features)
    if distill.target_kind == "pixel":
        return PixelTargetProvider(normalize=distill.normalize_pixel_target)
    if teacher is None:
        raise DataError("block targets require a teacher store")
    if distill.target_block is not None and distill.target_block > teacher.config.depth:
        raise DataError(
            f"target block {distill.target_block} exceeds teacher depth {teacher.config.depth}")
    if projection_dim is not None and teacher.config.embed_dim != projection_dim:
        raise DataError(
            f"teacher embed_dim {teacher.config.embed_dim} != student projection_dim {projection_dim}")
    return LiveTeacherProvider(teacher, distill.target, distill.apply_final_ln)


def save_feature_archive(path: str, features: np.ndarray) -> None:
    """Write precomputed per-image patch features as an .npz archive."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3:
        raise DataError(f"features must be [n_images, n_patches, dim], got {features.shape}")
    np.savez(path, features=features)


def load_feature_archive(path: str) -> np.ndarray:
    with np.load(path) as z:
        if "features" not in z:
            raise DataError(f"{path} is not a feature archive (missing 'features')")
        return z["features"]


def import_teacher(path: str, projection_dim: int | None = None):
    """Load an external teacher: either a checkpoint in this package's format
    (full encoder weights) or an .npz feature archive.

    Returns ("store", ParameterStore) or ("features", ndarray). Raises
    DataError when dimensions do not match the student's projection head.
    """
    from .checkpoint import load_store

    if path.endswith(".npz"):
        features = load_feature_archive(path)
        if projection_dim is not None and features.shape[-1] != projection_dim:
            raise DataError(
                f"feature archive dim {features.shape[-1]} != expected projection_dim {projection_dim}")
        return "features", features
    store = load_store(path)
    if projection_dim is not None and store.config.embed_dim != projection_dim:
        raise DataError(
            f"teacher embed_dim {store.config.embed_dim} != expected projection_dim {projection_dim}")
    return "store", store.encoder_subset()
