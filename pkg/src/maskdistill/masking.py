"""Random patch masks and gather/scatter between full and visible token sets.

The keep-count convention is ``visible = floor(n_patches * (1 - ratio))``;
everything else is masked. Masks are sampled by shuffling patch indices and
keeping the first ``visible`` entries, which is uniform over all subsets of
that size and reproducible from the generator state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def visible_count(n_patches: int, ratio: float) -> int:
    return int(np.floor(n_patches * (1.0 - ratio)))


@dataclass
class PatchMask:
    """Boolean mask over patch indices; True marks a masked (hidden) patch."""

    flags: np.ndarray
    ratio: float

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.flags.ndim != 1:
            raise ValueError("PatchMask flags must be 1-D")

    @property
    def n_patches(self) -> int:
        return self.flags.shape[0]

    @property
    def n_masked(self) -> int:
        return int(self.flags.sum())

    @property
    def n_visible(self) -> int:
        return self.n_patches - self.n_masked

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.flags)

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> PatchMask:
    """Draw a uniform random mask hiding ``n_patches - floor(n*(1-ratio))`` patches."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    keep = visible_count(n_patches, ratio)
    order = rng.permutation(n_patches)
    flags = np.ones(n_patches, dtype=bool)
    flags[order[:keep]] = False
    return PatchMask(flags=flags, ratio=ratio)


def sample_mask_batch(n_patches: int, ratio: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Stack of ``size`` independent masks as a boolean array [size, n_patches]."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    keep = visible_count(n_patches, ratio)
    orders = rng.permuted(np.tile(np.arange(n_patches), (size, 1)), axis=1)
    flags = np.ones((size, n_patches), dtype=bool)
    np.put_along_axis(flags, orders[:, :keep], False, axis=1)
    return flags


def _as_flags(mask) -> np.ndarray:
    if isinstance(mask, PatchMask):
        return mask.flags
    return np.asarray(mask, dtype=bool)


def visible_ids(flags: np.ndarray) -> np.ndarray:
    """Ascending original indices of visible patches; [V] or [B, V].

    Requires every row to have the same visible count (true for fixed-ratio
    batches), so the result is rectangular.
    """
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim == 1:
        return np.flatnonzero(~flags)
    counts = (~flags).sum(axis=1)
    if not np.all(counts == counts[0]):
        raise ValueError("rows have differing visible counts")
    ids = np.nonzero(~flags)[1].reshape(flags.shape[0], int(counts[0]))
    return ids


def gather_rows(tokens: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Select rows ``ids`` along the token axis; ids [V] or [B, V]."""
    if ids.ndim == 1:
        return tokens[..., ids, :]
    return np.take_along_axis(tokens, ids[..., None], axis=-2)


def scatter_rows(visible: np.ndarray, ids: np.ndarray, n_total: int, fill: np.ndarray) -> np.ndarray:
    """Place visible rows back at their original indices, filling the rest with ``fill``."""
    shape = visible.shape[:-2] + (n_total, visible.shape[-1])
    out = np.broadcast_to(fill.astype(visible.dtype), shape).copy()
    if ids.ndim == 1:
        out[..., ids, :] = visible
    else:
        np.put_along_axis(out, ids[..., None], visible, axis=-2)
    return out


def gather_visible(tokens, mask):
    """Visible tokens of a sequence, in ascending original index order.

    ``tokens`` is a TokenSequence (from model.patchify) whose position_ids are
    remapped to the surviving patches.
    """
    from .model import TokenSequence

    flags = _as_flags(mask)
    if tokens.tokens.shape[-2] != flags.shape[-1]:
        raise ValueError(
            f"token count {tokens.tokens.shape[-2]} != mask patches {flags.shape[-1]}")
    ids = visible_ids(flags)
    return TokenSequence(tokens=gather_rows(tokens.tokens, ids),
                         position_ids=tokens.position_ids[ids])


def scatter_with_mask_tokens(visible, mask, mask_token: np.ndarray) -> np.ndarray:
    """Full-length array with visible rows at their original indices and
    ``mask_token`` everywhere else."""
    flags = _as_flags(mask)
    ids = visible_ids(flags)
    vis = visible.tokens if hasattr(visible, "tokens") else np.asarray(visible)
    if vis.shape[-2] != ids.shape[-1]:
        raise ValueError(f"visible count {vis.shape[-2]} != mask visible count {ids.shape[-1]}")
    return scatter_rows(vis, ids, flags.shape[-1], np.asarray(mask_token))
