"""Representation analysis: averaged attention distance, singular-value
spectrum percentages, SVD-based unsupervised object localization with CorLoc,
and the performance-variance metric.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateFeaturesError
from .model import patchify
from .store import ParameterStore


@dataclass
class BoundingBox:
    """Pixel-space box; max-exclusive edges, so area = (x_max-x_min)*(y_max-y_min)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def _to_box(b) -> BoundingBox:
    return b if isinstance(b, BoundingBox) else BoundingBox(*b)


def iou(a, b) -> float:
    a, b = _to_box(a), _to_box(b)
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _patch_centers(grid: tuple[int, int], patch_size: float) -> np.ndarray:
    rows, cols = grid
    idx = np.arange(rows * cols)
    return np.stack([(idx % cols + 0.5) * patch_size,
                     (idx // cols + 0.5) * patch_size], axis=1)


def avg_attention_distance(attn: np.ndarray, grid: tuple[int, int], patch_size: float):
    """Attention-weighted mean distance between query and key patch centers.

    ``attn`` is [..., T, T] over exactly rows*cols patch tokens; a heads axis
    at position -3, and any leading batch axes, are averaged into per-head
    scalars. Returns [heads] (or a scalar for a plain [T, T] matrix).
    """
    attn = np.asarray(attn, dtype=np.float64)
    rows, cols = grid
    t = rows * cols
    if attn.shape[-1] != t or attn.shape[-2] != t:
        raise ValueError(f"attention shape {attn.shape} does not cover a {rows}x{cols} grid")
    sums = attn.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-3:
        raise ValueError("attention rows are not normalized")
    centers = _patch_centers(grid, patch_size)
    dist = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    per_query = (attn * dist).sum(axis=-1)        # [..., T]
    if attn.ndim == 2:
        return float(per_query.mean())
    flat = per_query.reshape(-1, per_query.shape[-2], t)   # [lead, H, T]
    return flat.mean(axis=(0, 2))


def topk_singular_percentage(features: np.ndarray, k: int) -> float:
    """Share of the singular-value sum captured by the k largest values."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D [n, d] matrix")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    if k < 1 or k > min(features.shape):
        raise ValueError(f"k={k} outside [1, min(n, d)]")
    s = np.linalg.svd(features, compute_uv=False)
    total = s.sum()
    if total == 0:
        raise DegenerateFeaturesError("all-zero feature matrix")
    return float(s[:k].sum() / total)


def _border_contacts(cells: np.ndarray, grid: tuple[int, int]) -> int:
    rows, cols = grid
    r, c = cells // cols, cells % cols
    return int(np.sum((r == 0) | (r == rows - 1) | (c == 0) | (c == cols - 1)))


def unsup_localize(features: np.ndarray, grid: tuple[int, int], patch_size: float) -> BoundingBox:
    """Spectral foreground box: sign of the first left singular vector of the
    centered patch features splits foreground from background; the smaller
    region (border contact breaks ties) is foreground, and the box wraps its
    largest 4-connected component.
    """
    features = np.asarray(features, dtype=np.float64)
    rows, cols = grid
    if features.ndim != 2 or features.shape[0] != rows * cols:
        raise ValueError(f"features shape {features.shape} does not match grid {grid}")
    centered = features - features.mean(axis=0, keepdims=True)
    scale = np.abs(features).max()
    if scale == 0 or np.abs(centered).max() <= 1e-10 * max(scale, 1.0):
        raise DegenerateFeaturesError("constant features carry no localization signal")
    u, _, _ = np.linalg.svd(centered, full_matrices=False)
    signs = u[:, 0] >= 0
    pos, neg = np.flatnonzero(signs), np.flatnonzero(~signs)
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateFeaturesError("sign split produced a single region")
    if len(pos) != len(neg):
        fg = pos if len(pos) < len(neg) else neg
    else:
        bp, bn = _border_contacts(pos, grid), _border_contacts(neg, grid)
        fg = pos if bp <= bn else neg
    mask = np.zeros(rows * cols, dtype=bool)
    mask[fg] = True
    labels, n = ndimage.label(mask.reshape(rows, cols),
                              structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    comp = labels == (int(np.argmax(sizes)) + 1)
    rr, cc = np.nonzero(comp)
    return BoundingBox(x_min=float(cc.min() * patch_size), y_min=float(rr.min() * patch_size),
                       x_max=float((cc.max() + 1) * patch_size),
                       y_max=float((rr.max() + 1) * patch_size))


def corloc(pred_boxes, gt_boxes) -> float:
    """Fraction of images whose predicted box overlaps some ground-truth box
    with IoU strictly greater than 0.5."""
    if len(pred_boxes) == 0 or len(pred_boxes) != len(gt_boxes):
        raise ValueError("need one predicted box and >=1 ground-truth boxes per image")
    hits = 0
    for pred, gts in zip(pred_boxes, gt_boxes):
        if len(gts) == 0:
            raise ValueError("image without ground-truth boxes")
        if max(iou(pred, g) for g in gts) > 0.5:
            hits += 1
    return hits / len(pred_boxes)


def performance_std(values) -> float:
    """Population standard deviation, as used for cross-teacher performance spread."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("need at least two values")
    return float(np.std(values))


# ---------------------------------------------------------------------------
# dataset-level reports

@dataclass
class AttentionDistanceReport:
    distances: np.ndarray      # [layers, heads], pixels


@dataclass
class SvdSpectrumReport:
    percentages: np.ndarray    # [layers, len(ks)]
    ks: tuple[int, ...]


def _eval_batches(store: ParameterStore, manifest, n_images: int, batch_size: int):
    """First n_images of the manifest, in manifest order, as normalized batches."""
    from .data import Batch, _bilinear_resize, _load_image, normalize_image

    n = min(n_images, len(manifest))
    size = store.config.image_size
    batches = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        imgs = []
        for i in idx:
            img = _load_image(manifest.records[i].source)
            if img.shape[:2] != (size, size):
                img = _bilinear_resize(img, size)
            imgs.append(np.ascontiguousarray(img, dtype=np.float32))
        images = normalize_image(np.stack(imgs), manifest.normalize_mean,
                                 manifest.normalize_std)
        batches.append(Batch(images=images, labels=manifest.labels[idx], indices=idx))
    return n, batches


def attention_distance_report(store: ParameterStore, manifest, n_images: int = 64,
                              batch_size: int = 32) -> AttentionDistanceReport:
    """Mean attention distance per layer/head, averaged over ``n_images``."""
    from .model import _batched, _core_fwd, _embed

    cfg = store.config
    _, batches = _eval_batches(store, manifest, n_images, batch_size)
    sums, count = None, 0
    for batch in batches:
        seq = patchify(batch.images, cfg.patch_size)
        x, _ = _batched(seq.tokens)
        x = _embed(store, x, seq.position_ids)
        _, cache = _core_fwd(x, store, "enc", record=True)
        per_layer = np.stack([avg_attention_distance(a, cfg.grid, cfg.patch_size)
                              * a.shape[0] for a in cache["records"]])
        sums = per_layer if sums is None else sums + per_layer
        count += batch.images.shape[0]
    return AttentionDistanceReport(distances=sums / count)


def svd_spectrum_report(store: ParameterStore, manifest, n_images: int = 32,
                        ks: tuple[int, ...] = (1, 2, 3, 4, 5),
                        batch_size: int = 32) -> SvdSpectrumReport:
    """Top-k singular percentage per layer, averaged over images."""
    from .model import _batched, _core_fwd, _embed

    cfg = store.config
    _, batches = _eval_batches(store, manifest, n_images, batch_size)
    acc = np.zeros((cfg.depth, len(ks)))
    count = 0
    for batch in batches:
        seq = patchify(batch.images, cfg.patch_size)
        x, _ = _batched(seq.tokens)
        x = _embed(store, x, seq.position_ids)
        _, cache = _core_fwd(x, store, "enc", capture=True)
        for li, layer_feats in enumerate(cache["captures"]):
            for img_feats in layer_feats:
                for ki, k in enumerate(ks):
                    acc[li, ki] += topk_singular_percentage(img_feats, k)
        count += batch.images.shape[0]
    return SvdSpectrumReport(percentages=acc / count, ks=tuple(ks))


def localize_report(store: ParameterStore, manifest, n_images: int = 32,
                    batch_size: int = 32) -> list[BoundingBox]:
    """One spectral box per image, from the last-block (post-LN) features."""
    from .model import forward_encoder

    cfg = store.config
    _, batches = _eval_batches(store, manifest, n_images, batch_size)
    boxes = []
    for batch in batches:
        seq = patchify(batch.images, cfg.patch_size)
        feats, _ = forward_encoder(store, seq)
        for f in feats.tokens:
            boxes.append(unsup_localize(f, cfg.grid, cfg.patch_size))
    return boxes


def write_attention_csv(path: str, report: AttentionDistanceReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "head", "mean_distance_px"])
        for li, row in enumerate(report.distances):
            for hi, d in enumerate(row):
                w.writerow([li, hi, f"{d:.6f}"])


def write_svd_csv(path: str, report: SvdSpectrumReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "k", "percentage"])
        for li, row in enumerate(report.percentages):
            for ki, k in enumerate(report.ks):
                w.writerow([li, k, f"{row[ki]:.6f}"])


def write_boxes_csv(path: str, boxes: list[BoundingBox], ious=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["image", "x_min", "y_min", "x_max", "y_max"]
        if ious is not None:
            header.append("best_iou")
        w.writerow(header)
        for i, b in enumerate(boxes):
            row = [i, b.x_min, b.y_min, b.x_max, b.y_max]
            if ious is not None:
                row.append(f"{ious[i]:.4f}")
            w.writerow(row)


def plot_attention_distance(report: AttentionDistanceReport, path: str) -> None:
    """Distance-vs-layer scatter, one point per head."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    layers = np.arange(report.distances.shape[0])
    for h in range(report.distances.shape[1]):
        ax.scatter(layers, report.distances[:, h], s=18, alpha=0.8, label=f"head {h}")
    ax.plot(layers, report.distances.mean(axis=1), "k--", lw=1, label="mean")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean attention distance (px)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_svd_spectrum(report: SvdSpectrumReport, path: str) -> None:
    """Percentage-vs-layer curves, one per k."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    layers = np.arange(report.percentages.shape[0])
    for ki, k in enumerate(report.ks):
        ax.plot(layers, report.percentages[:, ki], marker="o", ms=3, label=f"top-{k}")
    ax.set_xlabel("layer")
    ax.set_ylabel("singular value percentage")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
