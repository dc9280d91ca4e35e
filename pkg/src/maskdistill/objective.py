"""Reconstruction objectives: Smooth L1 and negative cosine, restricted to
masked patch positions by default.

Teacher targets are plain arrays here; no gradient ever flows into them — the
``*_grad`` functions differentiate with respect to the student prediction only.
"""

from __future__ import annotations

import numpy as np

from .config import DistillConfig
from .masking import _as_flags


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> float:
    """Mean over elements of the Huber-style penalty:
    0.5*d^2/beta for |d| < beta, |d| - 0.5*beta otherwise."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    ad = np.abs(d)
    val = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return float(val.mean())


def smooth_l1_grad(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> np.ndarray:
    d = pred - target
    g = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return (g / d.size).astype(pred.dtype)


def neg_cosine(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rows (last axis = feature dim) of -cos(pred_row, target_row)."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    pn = np.linalg.norm(pred, axis=-1)
    tn = np.linalg.norm(target, axis=-1)
    if np.any(pn == 0) or np.any(tn == 0):
        raise ValueError("zero-norm row in cosine loss")
    cos = (pred * target).sum(axis=-1) / (pn * tn)
    return float(-cos.mean())


def neg_cosine_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pn = np.linalg.norm(pred, axis=-1, keepdims=True)
    tn = np.linalg.norm(target, axis=-1, keepdims=True)
    cos = ((pred * target).sum(axis=-1, keepdims=True)) / (pn * tn)
    g = -(target / (pn * tn) - cos * pred / (pn * pn))
    n_rows = pred.size // pred.shape[-1]
    return (g / n_rows).astype(pred.dtype)


def _select(rows: np.ndarray, flags: np.ndarray, positions: str) -> np.ndarray:
    if positions == "all":
        return rows.reshape(-1, rows.shape[-1])
    if rows.ndim == 2:
        sel = rows[flags]
    else:
        if flags.ndim == 1:
            sel = rows[:, flags, :].reshape(-1, rows.shape[-1])
        else:
            sel = rows[flags]
    if sel.shape[0] == 0:
        raise ValueError("masked_only loss with zero masked patches")
    return sel


def mkd_loss(student_pred: np.ndarray, teacher_target: np.ndarray, mask,
             cfg: DistillConfig) -> float:
    """Distillation loss between full-length student predictions and teacher
    targets, measured only at masked rows unless ``loss_positions == 'all'``."""
    loss, _ = mkd_loss_and_grad(student_pred, teacher_target, mask, cfg, need_grad=False)
    return loss


def mkd_loss_and_grad(student_pred: np.ndarray, teacher_target: np.ndarray, mask,
                      cfg: DistillConfig, need_grad: bool = True):
    student_pred = np.asarray(student_pred)
    teacher_target = np.asarray(teacher_target)
    if student_pred.shape != teacher_target.shape:
        raise ValueError(f"shape mismatch {student_pred.shape} vs {teacher_target.shape}")
    flags = _as_flags(mask)
    pred_rows = _select(student_pred, flags, cfg.loss_positions)
    tgt_rows = _select(teacher_target, flags, cfg.loss_positions)
    if cfg.loss_kind == "smooth_l1":
        loss = smooth_l1(pred_rows, tgt_rows, cfg.smooth_l1_beta)
        drows = smooth_l1_grad(pred_rows, tgt_rows, cfg.smooth_l1_beta) if need_grad else None
    else:
        loss = neg_cosine(pred_rows, tgt_rows)
        drows = neg_cosine_grad(pred_rows, tgt_rows) if need_grad else None
    if not need_grad:
        return loss, None
    dpred = np.zeros_like(student_pred)
    if cfg.loss_positions == "all":
        dpred[...] = drows.reshape(student_pred.shape)
    elif student_pred.ndim == 2:
        dpred[flags] = drows
    elif flags.ndim == 1:
        dpred[:, flags, :] = drows.reshape(student_pred.shape[0], -1, student_pred.shape[-1])
    else:
        dpred[flags] = drows
    return loss, dpred
