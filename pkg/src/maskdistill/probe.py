"""Downstream evaluation of pre-trained encoders: mean-pooled linear probe and
end-to-end fine-tuning with layer-wise learning-rate decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import OptimConfig, ProbeConfig
from .errors import DataError, NumericsError
from .model import (_batched, _core_bwd, _core_fwd, _embed, _linear_bwd,
                    forward_encoder, patchify)
from .store import ParameterStore
from .trainer import OptimizerState, adamw_step, layer_decay_factor, lr_at


def pooled_features(store: ParameterStore, image: np.ndarray) -> np.ndarray:
    """Mean over all patch tokens of the last-block (post-LN) encoder output."""
    seq = patchify(image, store.config.patch_size)
    feats, _ = forward_encoder(store, seq)
    return feats.tokens.mean(axis=-2)


@dataclass
class ProbeHead:
    """Linear classifier over pooled features, with optional train-set feature
    standardization (applied identically at train and eval time)."""

    w: np.ndarray
    b: np.ndarray
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None

    def logits(self, feats: np.ndarray) -> np.ndarray:
        if self.mu is not None:
            feats = (feats - self.mu) / self.sigma
        return feats @ self.w + self.b


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          smoothing: float = 0.0):
    """Label-smoothed cross entropy; returns (mean loss, dL/dlogits)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    n, k = logits.shape
    q = np.full_like(p, smoothing / k)
    q[np.arange(n), labels] += 1.0 - smoothing
    logp = z - np.log(e.sum(axis=-1, keepdims=True))
    loss = float(-(q * logp).sum(axis=-1).mean())
    return loss, ((p - q) / n).astype(logits.dtype)


def _all_pooled(store: ParameterStore, manifest, batch_size: int = 128) -> np.ndarray:
    from .analysis import _eval_batches

    _, batches = _eval_batches(store, manifest, len(manifest), batch_size)
    return np.concatenate([pooled_features(store, b.images) for b in batches], axis=0)


def _check_labeled(manifest) -> np.ndarray:
    labels = manifest.labels
    if np.any(labels < 0):
        raise DataError("probe training needs a fully labeled manifest")
    return labels


def _probe_optim(cfg: ProbeConfig, n_records: int, weight_decay: float) -> OptimConfig:
    bs = min(cfg.batch_size, n_records)   # tiny manifests still get full batches
    return OptimConfig(base_lr=cfg.base_lr, batch_size=bs,
                       beta1=0.9, beta2=0.999, weight_decay=weight_decay,
                       warmup_epochs=0, total_epochs=cfg.epochs,
                       steps_per_epoch=max(1, n_records // bs))


def train_probe(params: ParameterStore, manifest, cfg: ProbeConfig,
                rng: np.random.Generator | None = None):
    """Fit a classifier on pooled features.

    linear_probe: the encoder is frozen (bit-identical afterwards) and only the
    zero-initialized head is trained. finetune: the encoder trains too, with a
    geometric layer-wise learning-rate decay from head to patch embedding.
    Returns ProbeHead, or (ProbeHead, ParameterStore) under finetune.
    """
    labels = _check_labeled(manifest)
    if rng is None:
        rng = np.random.default_rng(0)
    k = manifest.class_count
    dim = params.config.embed_dim
    dtype = params.dtype
    if cfg.mode == "linear_probe":
        feats = _all_pooled(params, manifest)
        mu = feats.mean(axis=0)
        sigma = feats.std(axis=0) + 1e-6
        feats = ((feats - mu) / sigma).astype(dtype)
        head = {"head.w": np.zeros((dim, k), dtype=dtype),
                "head.b": np.zeros(k, dtype=dtype)}
        optim = _probe_optim(cfg, len(manifest), weight_decay=0.0)
        opt_state = OptimizerState.for_params(head)
        n = feats.shape[0]
        bs = optim.batch_size
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n - bs + 1, bs):
                idx = order[start:start + bs]
                logits = feats[idx] @ head["head.w"] + head["head.b"]
                loss, dlogits = softmax_cross_entropy(logits, labels[idx], cfg.label_smoothing)
                if not np.isfinite(loss):
                    raise NumericsError("non-finite probe loss")
                grads = {"head.w": feats[idx].T @ dlogits, "head.b": dlogits.sum(axis=0)}
                adamw_step(head, grads, opt_state, lr_at(step, optim), optim)
                step += 1
        return ProbeHead(w=head["head.w"], b=head["head.b"], mu=mu, sigma=sigma)

    # finetune: head + encoder, layer-decayed learning rates
    from .data import make_batches

    encoder = params
    trainable = dict(encoder.params)
    trainable["head.w"] = np.zeros((dim, k), dtype=dtype)
    trainable["head.b"] = np.zeros(k, dtype=dtype)
    scales = _layer_lr_scales(encoder.config.depth, cfg.layer_decay)
    optim = _probe_optim(cfg, len(manifest), weight_decay=0.05)
    opt_state = OptimizerState.for_params(trainable)
    spe = optim.steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        for batch in make_batches(manifest, optim.batch_size, None, rng,
                                  output_size=encoder.config.image_size):
            seq = patchify(batch.images, encoder.config.patch_size)
            x, _ = _batched(seq.tokens)
            x0 = _embed(encoder, x, seq.position_ids)
            feats, cache = _core_fwd(x0, encoder, "enc", training=True, rng=rng)
            pooled = feats.mean(axis=-2)
            logits = pooled @ trainable["head.w"] + trainable["head.b"]
            loss, dlogits = softmax_cross_entropy(logits, batch.labels, cfg.label_smoothing)
            if not np.isfinite(loss):
                raise NumericsError("non-finite fine-tune loss")
            grads = {"head.w": pooled.T @ dlogits, "head.b": dlogits.sum(axis=0)}
            dpooled = dlogits @ trainable["head.w"].T
            dfeats = np.broadcast_to(dpooled[:, None, :] / feats.shape[-2], feats.shape)
            dx0 = _core_bwd(np.ascontiguousarray(dfeats, dtype=feats.dtype), cache,
                            encoder, grads)
            _linear_bwd(dx0, x, encoder.params["enc.patch_embed.w"], grads, "enc.patch_embed")
            adamw_step(trainable, grads, opt_state, lr_at(step, optim), optim,
                       lr_scales=scales)
            step += 1
            if step >= spe * cfg.epochs:
                break
    head = ProbeHead(w=trainable["head.w"], b=trainable["head.b"])
    return head, encoder


def _layer_lr_scales(depth: int, decay: float) -> dict[str, float]:
    """Geometric factors: patch embedding is group 0, block i is group i+1,
    final LN and head share the top group (factor 1)."""
    num_layers = depth + 1
    scales: dict[str, float] = {}
    scales["enc.patch_embed.w"] = layer_decay_factor(0, num_layers, decay)
    scales["enc.patch_embed.b"] = scales["enc.patch_embed.w"]
    for i in range(depth):
        f = layer_decay_factor(i + 1, num_layers, decay)
        for leaf in ("ln1.g", "ln1.b", "attn.qkv.w", "attn.qkv.b", "attn.out.w", "attn.out.b",
                     "ln2.g", "ln2.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b"):
            scales[f"enc.blocks.{i}.{leaf}"] = f
    for name in ("enc.ln.g", "enc.ln.b", "head.w", "head.b"):
        scales[name] = 1.0
    return scales


def evaluate_accuracy(head: ProbeHead, params: ParameterStore, manifest,
                      batch_size: int = 128) -> float:
    """Top-1 accuracy of the trained head over a labeled manifest."""
    labels = _check_labeled(manifest)
    feats = _all_pooled(params, manifest, batch_size)
    preds = head.logits(feats.astype(np.float64)).argmax(axis=-1)
    return float((preds == labels).mean())
