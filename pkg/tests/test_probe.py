import numpy as np
import pytest

from maskdistill import (DataError, ModelConfig, ProbeConfig, evaluate_accuracy,
                         forward_encoder, init_model, patchify, pooled_features,
                         synthetic_colors, train_probe)
from maskdistill.data import DatasetManifest, DatasetRecord
from maskdistill.probe import ProbeHead, softmax_cross_entropy

from helpers import small_config


def test_pooled_matches_explicit_mean():
    cfg = small_config()
    store = init_model(cfg, seed=0)
    img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    pooled = pooled_features(store, img)
    feats, _ = forward_encoder(store, patchify(img, cfg.patch_size))
    manual = feats.tokens.sum(axis=0) / feats.tokens.shape[0]
    assert np.allclose(pooled, manual, atol=1e-7)


def test_pooled_single_patch_degenerate_model():
    cfg = ModelConfig(image_size=8, patch_size=8, embed_dim=16, depth=1, num_heads=2,
                      decoder_dim=8, decoder_heads=1, projection_dim=16)
    store = init_model(cfg, seed=0)
    img = np.random.default_rng(2).random((8, 8, 3)).astype(np.float32)
    feats, _ = forward_encoder(store, patchify(img, 8))
    assert np.allclose(pooled_features(store, img), feats.tokens[0], atol=1e-7)


def test_pooled_constant_feature_rows():
    # when every token feature equals c, the pooled vector is c
    cfg = small_config()
    store = init_model(cfg, seed=3)
    img = np.full((32, 32, 3), 0.3, dtype=np.float32)
    feats, _ = forward_encoder(store, patchify(img, 8))
    constant = np.tile(feats.tokens[:1], (feats.tokens.shape[0], 1))
    assert np.allclose(constant.mean(axis=0), feats.tokens[0], atol=1e-7)


def test_pooled_batched_matches_per_image():
    cfg = small_config()
    store = init_model(cfg, seed=3)
    imgs = np.random.default_rng(14).random((3, 32, 32, 3)).astype(np.float32)
    batched = pooled_features(store, imgs)
    assert batched.shape == (3, cfg.embed_dim)
    singles = np.stack([pooled_features(store, imgs[i]) for i in range(3)])
    assert np.allclose(batched, singles, atol=1e-6)


def test_label_smoothing_zero_equals_plain_ce():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((6, 5))
    labels = rng.integers(0, 5, size=6)
    loss, _ = softmax_cross_entropy(logits, labels, smoothing=0.0)
    # independent plain cross-entropy
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(6), labels]))
    assert abs(loss - expected) < 1e-10


def test_softmax_ce_grad_matches_numeric():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, size=4)
    _, g = softmax_cross_entropy(logits, labels, smoothing=0.1)
    h = 1e-7
    for i in range(4):
        for j in range(3):
            logits[i, j] += h
            up, _ = softmax_cross_entropy(logits, labels, 0.1)
            logits[i, j] -= 2 * h
            dn, _ = softmax_cross_entropy(logits, labels, 0.1)
            logits[i, j] += h
            assert abs((up - dn) / (2 * h) - g[i, j]) < 1e-6


def test_linear_probe_freezes_encoder_and_separates():
    cfg = small_config()
    store = init_model(cfg, seed=6)
    data = synthetic_colors(200, 10, 32, seed=0)
    before = store.digest()
    head = train_probe(store, data, ProbeConfig(mode="linear_probe", epochs=20,
                                                base_lr=4e-2, batch_size=50),
                       np.random.default_rng(7))
    assert store.digest() == before           # frozen contract, bit-identical
    acc = evaluate_accuracy(head, store, data)
    assert acc > 0.99                         # linearly separable toy corpus


def test_constant_predictor_chance_level():
    cfg = small_config()
    store = init_model(cfg, seed=8)
    data = synthetic_colors(200, 10, 32, seed=1)  # balanced: 20 per class
    head = ProbeHead(w=np.zeros((cfg.embed_dim, 10)), b=np.zeros(10))
    acc = evaluate_accuracy(head, store, data)
    assert acc == pytest.approx(0.1, abs=0.02)


def test_perfect_predictor_accuracy_one():
    # constant-color classes with a trained head: every image is classified
    cfg = small_config()
    store = init_model(cfg, seed=6)
    data = synthetic_colors(100, 5, 32, seed=0)
    head = train_probe(store, data, ProbeConfig(mode="linear_probe", epochs=25,
                                                base_lr=4e-2, batch_size=50),
                       np.random.default_rng(7))
    assert evaluate_accuracy(head, store, data) == 1.0


def test_accuracy_deterministic():
    cfg = small_config()
    store = init_model(cfg, seed=9)
    data = synthetic_colors(60, 3, 32, seed=2)
    head = ProbeHead(w=np.ones((cfg.embed_dim, 3)), b=np.zeros(3))
    assert evaluate_accuracy(head, store, data) == evaluate_accuracy(head, store, data)


def test_accuracy_label_permutation_invariance():
    cfg = small_config()
    store = init_model(cfg, seed=10)
    data = synthetic_colors(90, 3, 32, seed=3)
    head = train_probe(store, data, ProbeConfig(mode="linear_probe", epochs=15,
                                                base_lr=4e-2, batch_size=30),
                       np.random.default_rng(0))
    base = evaluate_accuracy(head, store, data)
    perm = np.array([2, 0, 1])
    permuted_head = ProbeHead(w=head.w[:, perm], b=head.b[perm], mu=head.mu,
                              sigma=head.sigma)
    relabeled = DatasetManifest(
        records=[DatasetRecord(source=r.source,
                               label=int(np.argwhere(perm == r.label)[0, 0]))
                 for r in data.records],
        class_count=3, normalize_mean=data.normalize_mean, normalize_std=data.normalize_std)
    assert evaluate_accuracy(permuted_head, store, relabeled) == pytest.approx(base)


def test_probe_trains_on_manifest_smaller_than_batch():
    cfg = small_config()
    store = init_model(cfg, seed=15)
    data = synthetic_colors(20, 4, 32, seed=5)  # smaller than the default batch
    head = train_probe(store, data, ProbeConfig(mode="linear_probe", epochs=25,
                                                base_lr=4e-2, batch_size=64),
                       np.random.default_rng(0))
    assert np.any(head.w != 0)  # the head actually trained
    assert evaluate_accuracy(head, store, data) > 0.9


def test_probe_requires_labels():
    cfg = small_config()
    store = init_model(cfg, seed=11)
    unlabeled = DatasetManifest(
        records=[DatasetRecord(source=np.zeros((32, 32, 3), dtype=np.uint8), label=None)],
        class_count=1)
    with pytest.raises(DataError):
        train_probe(store, unlabeled, ProbeConfig(mode="linear_probe", epochs=1))


def test_finetune_updates_encoder_and_learns():
    cfg = small_config()
    store = init_model(cfg, seed=12)
    data = synthetic_colors(128, 4, 32, seed=4)
    before = store.digest()
    head, tuned = train_probe(store, data,
                              ProbeConfig(mode="finetune", epochs=3, base_lr=2e-3,
                                          layer_decay=0.75, batch_size=32),
                              np.random.default_rng(13))
    assert tuned.digest() != before
    acc = evaluate_accuracy(head, tuned, data)
    assert acc > 0.5


def test_finetune_layer_decay_geometric():
    from maskdistill.probe import _layer_lr_scales
    from maskdistill import layer_decay_factor

    scales = _layer_lr_scales(depth=4, decay=0.75)
    assert scales["head.w"] == 1.0
    assert scales["enc.ln.g"] == 1.0
    assert scales["enc.patch_embed.w"] == pytest.approx(layer_decay_factor(0, 5, 0.75))
    for i in range(4):
        assert scales[f"enc.blocks.{i}.attn.qkv.w"] == \
            pytest.approx(layer_decay_factor(i + 1, 5, 0.75))
    ratios = [scales[f"enc.blocks.{i}.mlp.fc1.w"] / scales[f"enc.blocks.{i + 1}.mlp.fc1.w"]
              for i in range(3)]
    assert np.allclose(ratios, 0.75)
