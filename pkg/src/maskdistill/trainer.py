"""AdamW optimization, the warmup + cosine learning-rate schedule, and the
per-stage masked-distillation training loop.

The teacher is read-only here: ``train_stage`` asks its target provider for
targets and never writes teacher storage (per-step teacher updates, when a
momentum policy wants them, are supplied from outside via ``step_hook``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import DistillConfig, OptimConfig
from .errors import ConfigError, NumericsError
from .masking import sample_mask_batch
from .model import patchify, student_forward, student_backward
from .objective import mkd_loss_and_grad
from .store import ParameterStore


def scale_lr(base_lr: float, batch_size: int) -> float:
    """Linear batch-size scaling: the per-256 base rate times batch_size/256."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return base_lr * batch_size / 256.0


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Learning rate for optimizer step ``step`` (0-based).

    Linear ramp from 0 to the peak over the warmup steps, then half-cosine
    decay toward 0 over the remaining steps.
    """
    peak = scale_lr(cfg.base_lr, cfg.batch_size)
    warmup = cfg.warmup_steps
    if step < warmup:
        return peak * step / warmup
    span = cfg.total_steps - warmup
    if span <= 0:
        return peak
    t = step - warmup
    return peak * 0.5 * (math.cos(math.pi * t / span) + 1.0)


def layer_decay_factor(layer_index: int, num_layers: int, decay: float) -> float:
    """Geometric fine-tuning lr factor: decay^(num_layers - layer_index),
    with the embedding at index 0 and the head at index num_layers."""
    return decay ** (num_layers - layer_index)


@dataclass
class OptimizerState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adamw_step(params: dict[str, np.ndarray] | ParameterStore, grads: dict[str, np.ndarray],
               opt_state: OptimizerState, lr: float, cfg: OptimConfig,
               lr_scales: dict[str, float] | None = None):
    """One decoupled-weight-decay Adam update, applied in place.

    Only parameters with an entry in ``grads`` are touched. ``lr_scales``
    optionally multiplies the rate per parameter (layer-wise decay).
    """
    pdict = params.params if isinstance(params, ParameterStore) else params
    opt_state.step += 1
    t = opt_state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        p = pdict[name]
        m = opt_state.m[name]
        v = opt_state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        step_lr = lr * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p
        p -= (step_lr * update).astype(p.dtype)
    return params, opt_state


@dataclass
class StepRow:
    step: int
    epoch: int
    lr: float
    loss: float


_STREAM_BATCH, _STREAM_MASK, _STREAM_MODEL, _STREAM_AUG = 0, 1, 2, 3


def epoch_stream(stage_seed: int, epoch: int, tag: int) -> np.random.Generator:
    """Independent generator for one (stage, epoch, purpose) triple.

    Deriving streams this way lets a mid-stage resume rebuild the exact
    remaining trajectory from the checkpoint's counters alone.
    """
    return np.random.default_rng(np.random.SeedSequence((stage_seed, epoch, tag)))


def train_stage(state, data, optim: OptimConfig, distill: DistillConfig, *,
                target_provider, augment=None, opt_state: OptimizerState | None = None,
                start_epoch: int = 0, step_hook=None, step_rows: list[StepRow] | None = None,
                stop_after_epoch: int | None = None):
    """Run one distillation stage; returns (student store, per-epoch loss trace).

    Per batch: sample patch masks, fetch teacher targets for the intact images,
    run the masked student, backprop the reconstruction loss, take one AdamW
    step. ``state`` provides the student store and per-stage seed; the teacher
    store is never written.
    """
    from .data import make_batches

    student: ParameterStore = state.student
    cfg = student.config
    stage_seed = state.seeds[state.stage_index]
    spe = len(data.records) // optim.batch_size
    if spe != optim.steps_per_epoch:
        raise ConfigError(
            f"optim.steps_per_epoch={optim.steps_per_epoch} but dataset yields {spe} "
            f"batches of {optim.batch_size}")
    if opt_state is None:
        opt_state = OptimizerState.for_params(student.params)
    trace: list[float] = list(state.loss_trace) if getattr(state, "loss_trace", None) else []
    trace = trace[:start_epoch]

    for epoch in range(start_epoch, optim.total_epochs):
        batch_rng = epoch_stream(stage_seed, epoch, _STREAM_BATCH)
        mask_rng = epoch_stream(stage_seed, epoch, _STREAM_MASK)
        model_rng = epoch_stream(stage_seed, epoch, _STREAM_MODEL)
        aug_rng = epoch_stream(stage_seed, epoch, _STREAM_AUG)
        losses = np.empty(spe)
        for i, batch in enumerate(make_batches(data, optim.batch_size, augment, batch_rng,
                                               aug_rng=aug_rng)):
            step = epoch * spe + i
            tokens_full = patchify(batch.images, cfg.patch_size).tokens
            flags = sample_mask_batch(cfg.n_patches, distill.mask_ratio,
                                      batch.images.shape[0], mask_rng)
            targets = target_provider(batch.images, tokens_full, batch.indices)
            pred, cache = student_forward(student, tokens_full, flags,
                                          training=True, rng=model_rng)
            loss, dpred = mkd_loss_and_grad(pred, targets.astype(pred.dtype), flags, distill)
            if not math.isfinite(loss):
                raise NumericsError(
                    f"non-finite loss at stage {state.stage_index} epoch {epoch} step {i}")
            grads = student_backward(dpred, cache, student)
            if optim.grad_clip is not None:
                clip_grads(grads, optim.grad_clip)
            lr = lr_at(step, optim)
            adamw_step(student, grads, opt_state, lr, optim)
            losses[i] = loss
            if step_rows is not None:
                step_rows.append(StepRow(step=step, epoch=epoch, lr=lr, loss=loss))
            if step_hook is not None:
                step_hook(step)
        trace.append(float(losses.mean()))
        state.epoch_in_stage = epoch + 1
        state.loss_trace = trace
        state.opt_state = opt_state
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return student, trace
