import itertools

import numpy as np
import pytest

from maskdistill import (PatchMask, TokenSequence, gather_visible, sample_mask,
                         sample_mask_batch, scatter_with_mask_tokens, visible_count)
from maskdistill.masking import visible_ids


def test_visible_masked_counts_paper_recipe():
    # 196 patches at ratio 0.75 -> 49 visible, 147 masked
    m = sample_mask(196, 0.75, np.random.default_rng(0))
    assert m.n_visible == 49
    assert m.n_masked == 147


def test_zero_ratio_all_visible():
    m = sample_mask(12, 0.0, np.random.default_rng(0))
    assert m.n_visible == 12
    assert m.n_masked == 0


@pytest.mark.parametrize("n,ratio", [(7, 0.3), (13, 0.75), (9, 0.5), (196, 0.75),
                                     (10, 1.0), (5, 0.21)])
def test_keep_count_formula(n, ratio):
    m = sample_mask(n, ratio, np.random.default_rng(1))
    assert m.n_visible == visible_count(n, ratio) == int(np.floor(n * (1 - ratio)))


def test_ratio_out_of_range():
    with pytest.raises(ValueError):
        sample_mask(10, 1.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_mask_batch(10, -0.1, 4, np.random.default_rng(0))


def test_mask_deterministic_given_stream():
    a = sample_mask(32, 0.75, np.random.default_rng(42))
    b = sample_mask(32, 0.75, np.random.default_rng(42))
    assert np.array_equal(a.flags, b.flags)


def test_subset_uniformity_exhaustive():
    # (6, 0.5): each of the C(6,3)=20 visible subsets appears with freq 1/20 +- 0.005
    rng = np.random.default_rng(7)
    counts = {c: 0 for c in itertools.combinations(range(6), 3)}
    n_draws = 60_000
    flags = sample_mask_batch(6, 0.5, n_draws, rng)
    for row in flags:
        counts[tuple(np.flatnonzero(~row))] += 1
    freqs = np.array(list(counts.values())) / n_draws
    assert len(counts) == 20
    assert np.all(np.abs(freqs - 1 / 20) < 0.005)


def test_per_patch_masking_probability():
    rng = np.random.default_rng(3)
    flags = sample_mask_batch(8, 0.5, 20_000, rng)
    expected = flags[0].sum() / 8  # masked_count / n
    per_patch = flags.mean(axis=0)
    assert np.all(np.abs(per_patch - expected) < 0.01)


def _seq(tokens):
    return TokenSequence(tokens=np.asarray(tokens, dtype=np.float64),
                         position_ids=np.arange(np.asarray(tokens).shape[-2]))


def test_gather_all_visible_identity():
    tokens = _seq(np.random.default_rng(0).standard_normal((4, 3)))
    mask = PatchMask(flags=np.zeros(4, dtype=bool), ratio=0.0)
    out = gather_visible(tokens, mask)
    assert np.array_equal(out.tokens, tokens.tokens)
    assert np.array_equal(out.position_ids, np.arange(4))


def test_gather_specific_mask():
    tokens = _seq(np.arange(8.0).reshape(4, 2))
    mask = PatchMask(flags=np.array([True, False, True, False]), ratio=0.5)
    out = gather_visible(tokens, mask)
    assert np.array_equal(out.position_ids, [1, 3])
    assert np.array_equal(out.tokens, [[2.0, 3.0], [6.0, 7.0]])


def test_gather_count_mismatch():
    tokens = _seq(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        gather_visible(tokens, PatchMask(flags=np.zeros(5, dtype=bool), ratio=0.0))


def test_gather_then_scatter_restores_visible_rows():
    rng = np.random.default_rng(5)
    tokens = _seq(rng.standard_normal((6, 4)))
    mask = sample_mask(6, 0.5, rng)
    vis = gather_visible(tokens, mask)
    full = scatter_with_mask_tokens(vis, mask, np.zeros(4))
    assert np.array_equal(full[~mask.flags], tokens.tokens[~mask.flags])


def test_scatter_masked_rows_equal_mask_token():
    rng = np.random.default_rng(6)
    tokens = _seq(rng.standard_normal((6, 4)))
    mask = sample_mask(6, 0.75, rng)
    mask_token = rng.standard_normal(4)
    full = scatter_with_mask_tokens(gather_visible(tokens, mask), mask, mask_token)
    assert np.array_equal(full[mask.flags], np.tile(mask_token, (mask.n_masked, 1)))


def test_scatter_zero_masked_identity():
    tokens = _seq(np.random.default_rng(0).standard_normal((4, 3)))
    mask = PatchMask(flags=np.zeros(4, dtype=bool), ratio=0.0)
    full = scatter_with_mask_tokens(gather_visible(tokens, mask), mask, np.zeros(3))
    assert np.array_equal(full, tokens.tokens)


def test_batch_masks_rectangular_and_ordered():
    rng = np.random.default_rng(9)
    flags = sample_mask_batch(16, 0.75, 8, rng)
    assert flags.shape == (8, 16)
    assert np.all((~flags).sum(axis=1) == 4)
    ids = visible_ids(flags)
    assert ids.shape == (8, 4)
    assert np.all(np.diff(ids, axis=1) > 0)  # ascending original order
