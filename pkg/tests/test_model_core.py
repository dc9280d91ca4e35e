import math

import numpy as np
import pytest

from maskdistill import (DistillConfig, ModelConfig, TokenSequence, forward_decoder,
                         forward_encoder, forward_teacher, init_model, patchify,
                         pixel_targets, pos_embed_table, project_to_teacher_dim,
                         sample_mask, sample_mask_batch, student_backward, student_forward,
                         unpatchify)
from maskdistill.model import _drop_path_scale
from maskdistill.objective import mkd_loss_and_grad
from maskdistill.store import param_shapes

from helpers import central_diff_grads, max_grad_mismatch, small_config, tiny_config


# ---------------------------------------------------------------------------
# initialization

def test_init_deterministic_bit_identical():
    cfg = small_config()
    a = init_model(cfg, seed=5)
    b = init_model(cfg, seed=5)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name], b[name])


def test_init_different_seeds_differ():
    cfg = small_config()
    a, b = init_model(cfg, seed=5), init_model(cfg, seed=6)
    assert any(not np.array_equal(a[n], b[n]) for n in a.names())


def test_xavier_uniform_bounds_all_weights():
    cfg = small_config()
    store = init_model(cfg, seed=0)
    checked = 0
    for name, shape in param_shapes(cfg):
        if name.endswith(".w"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            assert np.all(np.abs(store[name]) <= bound), name
            checked += 1
    assert checked > 10


def test_biases_zero_gains_one():
    store = init_model(small_config(), seed=0)
    assert np.all(store["enc.patch_embed.b"] == 0)
    assert np.all(store["enc.ln.g"] == 1)
    assert np.all(store["enc.blocks.0.ln1.b"] == 0)


def test_invalid_config_rejected():
    with pytest.raises(Exception):
        ModelConfig(image_size=30, patch_size=8)
    with pytest.raises(Exception):
        ModelConfig(embed_dim=30, num_heads=4)
    with pytest.raises(Exception):
        ModelConfig(drop_path_rate=1.5)


# ---------------------------------------------------------------------------
# patchify

def test_patchify_vitb_shape():
    # 224x224x3 with 16px patches -> 196 tokens of dim 768
    img = np.random.default_rng(0).random((224, 224, 3), dtype=np.float32)
    seq = patchify(img, 16)
    assert seq.tokens.shape == (196, 768)
    assert np.array_equal(seq.position_ids, np.arange(196))


def test_patchify_small():
    img = np.zeros((32, 32, 3))
    assert patchify(img, 8).tokens.shape == (16, 192)


def test_patchify_roundtrip_bit_exact():
    rng = np.random.default_rng(1)
    img = rng.random((32, 32, 3), dtype=np.float32)
    seq = patchify(img, 8)
    back = unpatchify(seq.tokens, 8, (4, 4))
    assert np.array_equal(back, img)
    batch = rng.random((3, 16, 16, 2), dtype=np.float32)
    assert np.array_equal(unpatchify(patchify(batch, 4).tokens, 4, (4, 4)), batch)


def test_patchify_indivisible_error():
    with pytest.raises(ValueError):
        patchify(np.zeros((30, 32, 3)), 8)


def test_patchify_row_major_order():
    # pixel value = row*100 + col identifies the patch origin
    img = np.fromfunction(lambda r, c, _: r * 100 + c, (4, 4, 1))
    seq = patchify(img, 2)
    # patch 1 (row 0, col 1) top-left pixel is (0, 2)
    assert seq.tokens[1][0] == 2
    # patch 2 (row 1, col 0) top-left pixel is (2, 0)
    assert seq.tokens[2][0] == 200


# ---------------------------------------------------------------------------
# encoder forward

def test_attention_rows_sum_to_one():
    cfg = small_config(depth=3)
    store = init_model(cfg, seed=2)
    img = np.random.default_rng(3).random((2, 32, 32, 3), dtype=np.float32)
    _, record = forward_encoder(store, patchify(img, 8), record_attention=True)
    assert record.n_layers == 3
    record.validate(tol=1e-5)


def test_eval_forward_deterministic():
    cfg = small_config(drop_path_rate=0.5)
    store = init_model(cfg, seed=2)
    seq = patchify(np.random.default_rng(0).random((32, 32, 3), dtype=np.float32), 8)
    a, _ = forward_encoder(store, seq, training=False)
    b, _ = forward_encoder(store, seq, training=False)
    assert np.array_equal(a.tokens, b.tokens)


def test_encoder_matches_hand_computed_oracle():
    """1-layer, dim-4, single-head model on 2 tokens vs a pure-Python oracle."""
    cfg = ModelConfig(image_size=2, patch_size=1, in_channels=4, embed_dim=4, depth=1,
                      num_heads=1, mlp_ratio=2.0, use_decoder=False, projection_dim=4)
    store = init_model(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(11)
    for name in store.names():  # hand-set every parameter to random values
        store.params[name] = rng.uniform(-0.8, 0.8, size=store[name].shape)
    tokens = rng.uniform(-1, 1, size=(2, 4))
    seq = TokenSequence(tokens=tokens, position_ids=np.array([0, 1]))
    got, _ = forward_encoder(store, seq)

    p = store.params

    def ln(vec, g, b):
        mu = sum(vec) / len(vec)
        var = sum((x - mu) ** 2 for x in vec) / len(vec)
        inv = 1.0 / math.sqrt(var + 1e-6)
        return [(x - mu) * inv * gi + bi for x, gi, bi in zip(vec, g, b)]

    def matvec(w, x, b):  # w is [in, out]
        return [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]

    def gelu(x):
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))

    # position rows for ids 0,1 on the 2x2 grid: [sin r, cos r, sin c, cos c]
    pos = [[math.sin(i // 2), math.cos(i // 2), math.sin(i % 2), math.cos(i % 2)]
           for i in (0, 1)]
    x0 = []
    for t in range(2):
        e = matvec(p["enc.patch_embed.w"].tolist(), tokens[t].tolist(),
                   p["enc.patch_embed.b"].tolist())
        x0.append([e[d] + pos[t][d] for d in range(4)])

    n1 = [ln(x0[t], p["enc.blocks.0.ln1.g"], p["enc.blocks.0.ln1.b"]) for t in range(2)]
    qkv = [matvec(p["enc.blocks.0.attn.qkv.w"].tolist(), n1[t],
                  p["enc.blocks.0.attn.qkv.b"].tolist()) for t in range(2)]
    q = [row[0:4] for row in qkv]
    k = [row[4:8] for row in qkv]
    v = [row[8:12] for row in qkv]
    scale = 1.0 / math.sqrt(4.0)
    attn_out = []
    for i in range(2):
        scores = [sum(q[i][d] * k[j][d] for d in range(4)) * scale for j in range(2)]
        mx = max(scores)
        expd = [math.exp(s - mx) for s in scores]
        a = [e / sum(expd) for e in expd]
        o = [a[0] * v[0][d] + a[1] * v[1][d] for d in range(4)]
        attn_out.append(matvec(p["enc.blocks.0.attn.out.w"].tolist(), o,
                               p["enc.blocks.0.attn.out.b"].tolist()))
    x1 = [[x0[t][d] + attn_out[t][d] for d in range(4)] for t in range(2)]
    n2 = [ln(x1[t], p["enc.blocks.0.ln2.g"], p["enc.blocks.0.ln2.b"]) for t in range(2)]
    mlp = []
    for t in range(2):
        h = matvec(p["enc.blocks.0.mlp.fc1.w"].tolist(), n2[t],
                   p["enc.blocks.0.mlp.fc1.b"].tolist())
        u = [gelu(x) for x in h]
        mlp.append(matvec(p["enc.blocks.0.mlp.fc2.w"].tolist(), u,
                          p["enc.blocks.0.mlp.fc2.b"].tolist()))
    x2 = [[x1[t][d] + mlp[t][d] for d in range(4)] for t in range(2)]
    expected = [ln(x2[t], p["enc.ln.g"], p["enc.ln.b"]) for t in range(2)]
    assert np.allclose(got.tokens, expected, atol=1e-6)


# ---------------------------------------------------------------------------
# decoder and projection

def test_decoder_output_full_length():
    cfg = small_config()
    store = init_model(cfg, seed=4)
    rng = np.random.default_rng(5)
    mask = sample_mask(cfg.n_patches, 0.75, rng)
    vis = TokenSequence(tokens=rng.standard_normal((mask.n_visible, cfg.embed_dim))
                        .astype(np.float32),
                        position_ids=mask.visible_indices)
    out = forward_decoder(store, vis, mask)
    assert out.shape == (cfg.n_patches, cfg.decoder_dim)


def test_decoder_permutation_invariant():
    cfg = small_config()
    store = init_model(cfg, seed=4)
    rng = np.random.default_rng(6)
    mask = sample_mask(cfg.n_patches, 0.5, rng)
    feats = rng.standard_normal((mask.n_visible, cfg.embed_dim)).astype(np.float32)
    base = forward_decoder(store, TokenSequence(feats, mask.visible_indices), mask)
    # permuting rows together with their position ids must not change the output
    perm = rng.permutation(mask.n_visible)
    permuted = forward_decoder(store, TokenSequence(feats[perm],
                                                    mask.visible_indices[perm]), mask)
    assert np.allclose(permuted, base, atol=1e-5)


def test_decoder_rejects_wrong_position_ids():
    cfg = small_config()
    store = init_model(cfg, seed=4)
    mask = sample_mask(cfg.n_patches, 0.5, np.random.default_rng(6))
    feats = np.zeros((mask.n_visible, cfg.embed_dim), dtype=np.float32)
    wrong = (mask.visible_indices + 1) % cfg.n_patches
    with pytest.raises(ValueError):
        forward_decoder(store, TokenSequence(feats, wrong), mask)


def test_decoder_zero_masked_consumes_all_tokens():
    cfg = small_config()
    store = init_model(cfg, seed=4)
    rng = np.random.default_rng(7)
    mask = sample_mask(cfg.n_patches, 0.0, rng)
    feats = rng.standard_normal((cfg.n_patches, cfg.embed_dim)).astype(np.float32)
    out = forward_decoder(store, TokenSequence(feats, np.arange(cfg.n_patches)), mask)
    assert out.shape[0] == cfg.n_patches
    # no row came from the mask token: recompute with a poisoned token, nothing changes
    store.params["dec.mask_token"] = store["dec.mask_token"] + 100.0
    out2 = forward_decoder(store, TokenSequence(feats, np.arange(cfg.n_patches)), mask)
    assert np.array_equal(out, out2)


def test_decoder_visible_count_mismatch():
    cfg = small_config()
    store = init_model(cfg, seed=4)
    mask = sample_mask(cfg.n_patches, 0.75, np.random.default_rng(0))
    bad = TokenSequence(np.zeros((mask.n_visible + 1, cfg.embed_dim), dtype=np.float32),
                        np.arange(mask.n_visible + 1))
    with pytest.raises(ValueError):
        forward_decoder(store, bad, mask)


def test_projection_identity_and_linearity():
    cfg = small_config(projection_dim=16)  # decoder_dim 16 -> square head
    store = init_model(cfg, seed=8)
    store.params["proj.w"] = np.eye(16, dtype=np.float32)
    store.params["proj.b"] = np.zeros(16, dtype=np.float32)
    feats = np.random.default_rng(0).standard_normal((5, 16)).astype(np.float32)
    assert np.allclose(project_to_teacher_dim(store, feats), feats)
    # linearity with zero bias
    out1 = project_to_teacher_dim(store, 3.0 * feats)
    assert np.allclose(out1, 3.0 * project_to_teacher_dim(store, feats), atol=1e-5)


def test_projection_output_dim_contract():
    cfg = small_config(projection_dim=24)
    store = init_model(cfg, seed=8)
    feats = np.zeros((7, cfg.decoder_dim), dtype=np.float32)
    assert project_to_teacher_dim(store, feats).shape == (7, 24)
    with pytest.raises(ValueError):
        project_to_teacher_dim(store, np.zeros((7, cfg.decoder_dim + 1), dtype=np.float32))


# ---------------------------------------------------------------------------
# teacher targets

def test_teacher_pixel_target_is_standardized_patchify():
    cfg = small_config()
    store = init_model(cfg, seed=9)
    img = np.random.default_rng(10).random((32, 32, 3), dtype=np.float32)
    got = forward_teacher(store, img, target="pixel")
    tokens = patchify(img, 8).tokens
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    assert np.allclose(got, (tokens - mu) / np.sqrt(var + 1e-6), atol=1e-6)
    raw = forward_teacher(store, img, target="pixel", normalize_pixel=False)
    assert np.array_equal(raw, tokens)


def test_teacher_block0_is_embedding_plus_positions():
    cfg = small_config()
    store = init_model(cfg, seed=9)
    img = np.random.default_rng(11).random((32, 32, 3), dtype=np.float32)
    got = forward_teacher(store, img, target="block_0")
    tokens = patchify(img, 8).tokens
    expected = tokens @ store["enc.patch_embed.w"] + store["enc.patch_embed.b"] \
        + pos_embed_table(cfg.embed_dim, cfg.grid, np.float32)
    assert np.allclose(got, expected, atol=1e-6)


def test_teacher_final_ln_toggle_changes_output():
    cfg = small_config()
    store = init_model(cfg, seed=9)
    # make the final LN non-trivial
    rng = np.random.default_rng(12)
    store.params["enc.ln.g"] = rng.uniform(0.5, 2.0, cfg.embed_dim).astype(np.float32)
    img = rng.random((32, 32, 3)).astype(np.float32)
    a = forward_teacher(store, img, target="block_2", apply_final_ln=False)
    b = forward_teacher(store, img, target="block_2", apply_final_ln=True)
    assert not np.allclose(a, b)


def test_teacher_block_beyond_depth_errors():
    store = init_model(small_config(depth=2), seed=9)
    with pytest.raises(ValueError):
        forward_teacher(store, np.zeros((32, 32, 3), dtype=np.float32), target="block_3")


def test_teacher_always_eval_mode():
    # even with a stochastic-depth config, teacher targets are deterministic
    cfg = small_config(drop_path_rate=0.5)
    store = init_model(cfg, seed=9)
    img = np.random.default_rng(21).random((2, 32, 32, 3)).astype(np.float32)
    a = forward_teacher(store, img, target="block_2")
    b = forward_teacher(store, img, target="block_2")
    assert np.array_equal(a, b)


def test_teacher_block_last_matches_encoder_up_to_final_ln():
    cfg = small_config()
    store = init_model(cfg, seed=13)
    img = np.random.default_rng(14).random((32, 32, 3), dtype=np.float32)
    with_ln = forward_teacher(store, img, target=f"block_{cfg.depth}", apply_final_ln=True)
    enc, _ = forward_encoder(store, patchify(img, 8))
    assert np.allclose(with_ln, enc.tokens, atol=1e-6)


# ---------------------------------------------------------------------------
# stochastic depth

def test_drop_path_skip_frequency():
    rng = np.random.default_rng(15)
    scales = _drop_path_scale(100_000, 0.3, True, rng)[:, 0, 0]
    skip_freq = np.mean(scales == 0.0)
    assert abs(skip_freq - 0.3) < 0.02
    assert abs(scales.mean() - 1.0) < 0.02  # kept branches rescaled to preserve expectation


def test_drop_path_linear_scaling_first_block_never_drops():
    cfg = small_config(depth=2, drop_path_rate=0.9)
    store = init_model(cfg, seed=16)
    rng = np.random.default_rng(17)
    img = np.random.default_rng(18).random((8, 32, 32, 3), dtype=np.float32)
    seq = patchify(img, 8)
    eval_out, _ = forward_encoder(store, seq, training=False)
    train_out, _ = forward_encoder(store, seq, training=True, rng=rng)
    assert not np.allclose(eval_out.tokens, train_out.tokens)


def test_training_requires_rng_when_dropping():
    cfg = small_config(drop_path_rate=0.2)
    store = init_model(cfg, seed=16)
    seq = patchify(np.zeros((2, 32, 32, 3), dtype=np.float32), 8)
    with pytest.raises(ValueError):
        forward_encoder(store, seq, training=True, rng=None)


def test_encoder_rejects_wrong_token_dim():
    cfg = small_config()
    store = init_model(cfg, seed=16)
    bad = TokenSequence(tokens=np.zeros((4, cfg.patch_dim + 1), dtype=np.float32),
                        position_ids=np.arange(4))
    with pytest.raises(ValueError):
        forward_encoder(store, bad)


# ---------------------------------------------------------------------------
# masked-content independence (asymmetric design)

def test_masked_pixels_cannot_influence_outputs():
    cfg = small_config()
    store = init_model(cfg, seed=19)
    rng = np.random.default_rng(20)
    img = rng.random((2, 32, 32, 3)).astype(np.float32)
    flags = sample_mask_batch(cfg.n_patches, 0.75, 2, rng)
    tokens = patchify(img, 8).tokens
    pred1, cache1 = student_forward(store, tokens, flags)

    poisoned = tokens.copy()
    poisoned[np.broadcast_to(flags[..., None], tokens.shape)] = \
        rng.standard_normal(int(flags.sum()) * tokens.shape[-1]).astype(np.float32)
    pred2, cache2 = student_forward(store, poisoned, flags)
    assert np.array_equal(cache1["vis"], cache2["vis"])          # gathered visible rows
    assert np.array_equal(cache1["enc_out"], cache2["enc_out"])  # encoder features
    assert np.array_equal(pred1, pred2)                          # full prediction


# ---------------------------------------------------------------------------
# gradients: analytic VJPs vs central finite differences

def _gradcheck(cfg, distill_kwargs, seed=1):
    rng = np.random.default_rng(seed)
    store = init_model(cfg, seed=seed, dtype=np.float64)
    dcfg = DistillConfig(mask_ratio=0.75, **distill_kwargs)
    imgs = rng.standard_normal((2, cfg.image_size, cfg.image_size, 3))
    tokens = patchify(imgs, cfg.patch_size).tokens
    flags = sample_mask_batch(cfg.n_patches, dcfg.mask_ratio, 2, rng)
    target = rng.standard_normal((2, cfg.n_patches, cfg.projection_dim))

    def loss_only():
        pred, _ = student_forward(store, tokens, flags)
        return mkd_loss_and_grad(pred, target, flags, dcfg, need_grad=False)[0]

    pred, cache = student_forward(store, tokens, flags)
    _, dpred = mkd_loss_and_grad(pred, target, flags, dcfg)
    grads = student_backward(dpred, cache, store)
    assert set(grads) == set(store.params)
    worst = 0.0
    for name, p in store.params.items():
        numeric = central_diff_grads(loss_only, p)
        worst = max(worst, max_grad_mismatch(grads[name].reshape(-1), numeric))
    return worst


def test_gradients_match_finite_differences_asymmetric():
    worst = _gradcheck(tiny_config(), dict(loss_kind="smooth_l1", target="block_2",
                                           smooth_l1_beta=0.5))
    assert worst < 1e-4, f"max relative gradient error {worst}"


def test_gradients_match_finite_differences_vanilla_arch():
    cfg = tiny_config(use_decoder=False)
    worst = _gradcheck(cfg, dict(loss_kind="smooth_l1", target="block_2"))
    assert worst < 1e-4, f"max relative gradient error {worst}"


def test_gradients_match_finite_differences_neg_cosine():
    worst = _gradcheck(tiny_config(), dict(loss_kind="neg_cosine", target="block_2",
                                           loss_positions="all"))
    assert worst < 1e-4, f"max relative gradient error {worst}"
