"""Dataset ingestion, synthetic corpora, augmentation, and batching.

Real datasets use a class-per-directory PNG tree; synthetic corpora are
generated in memory. Normalization stats ride on the manifest: ImageNet
channel statistics for directory trees, (0.5, 0.5) for synthetic images.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .config import AugmentConfig, DataConfig
from .errors import DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SYNTHETIC_MEAN = (0.5, 0.5, 0.5)
SYNTHETIC_STD = (0.5, 0.5, 0.5)


@dataclass
class DatasetRecord:
    """One example: a file path or an embedded uint8 array, plus an optional label."""

    source: str | np.ndarray
    label: int | None = None


@dataclass
class DatasetManifest:
    records: list[DatasetRecord]
    class_count: int
    split: str = "train"
    normalize_mean: tuple[float, ...] = SYNTHETIC_MEAN
    normalize_std: tuple[float, ...] = SYNTHETIC_STD
    boxes: list[list[tuple[float, float, float, float]]] | None = None

    def __post_init__(self):
        if not self.records:
            raise DataError("empty dataset")
        for r in self.records:
            if r.label is not None and not (0 <= r.label < self.class_count):
                raise DataError(f"label {r.label} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if r.label is None else r.label for r in self.records])


@dataclass
class Batch:
    images: np.ndarray          # [B, S, S, C] normalized float32
    labels: np.ndarray          # [B] int (-1 when unlabeled)
    indices: np.ndarray         # [B] manifest record indices


def _load_image(source) -> np.ndarray:
    """Decode to float [H, W, C] in [0, 1]. Accepts embedded arrays, PNG paths,
    and raw .npy arrays (uint8 or float already in [0, 1])."""
    if isinstance(source, np.ndarray):
        arr = source
    elif str(source).lower().endswith(".npy"):
        try:
            arr = np.load(source)
        except Exception as exc:
            raise DataError(f"unreadable image {source}: {exc}") from exc
    else:
        from PIL import Image

        try:
            with Image.open(source) as im:
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:
            raise DataError(f"unreadable image {source}: {exc}") from exc
    if arr.ndim != 3:
        raise DataError(f"image {source} must be [H, W, C], got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def load_dataset(root: str, split: str = "train") -> DatasetManifest:
    """Scan a class-per-directory tree; labels follow lexicographic class order.

    Both loads of the same root produce identical manifests (sorted scan).
    """
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} is not a directory")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise DataError(f"no class directories under {root!r}")
    records = []
    for label, cls in enumerate(classes):
        cdir = os.path.join(root, cls)
        for fname in sorted(os.listdir(cdir)):
            if fname.lower().endswith((".png", ".npy")):
                records.append(DatasetRecord(source=os.path.join(cdir, fname), label=label))
    if not records:
        raise DataError(f"no .png/.npy images under {root!r}")
    return DatasetManifest(records=records, class_count=len(classes), split=split,
                           normalize_mean=IMAGENET_MEAN, normalize_std=IMAGENET_STD)


def split_manifest(manifest: DatasetManifest, val_fraction: float,
                   seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic stratification-free train/val split by shuffled index."""
    n = len(manifest)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val >= n:
        raise DataError(f"val_fraction {val_fraction} leaves an empty split for n={n}")
    order = np.random.default_rng(np.random.SeedSequence((seed, 91))).permutation(n)
    def sub(ids, split):
        return DatasetManifest(records=[manifest.records[i] for i in ids],
                               class_count=manifest.class_count, split=split,
                               normalize_mean=manifest.normalize_mean,
                               normalize_std=manifest.normalize_std,
                               boxes=None if manifest.boxes is None
                               else [manifest.boxes[i] for i in ids])
    return sub(order[n_val:], "train"), sub(order[:n_val], "val")


# ---------------------------------------------------------------------------
# synthetic corpora

def synthetic_gratings(n_images: int, classes: int, image_size: int = 32,
                       seed: int = 7, noise: float = 0.30,
                       amp_range: tuple[float, float] = (0.25, 0.50),
                       frequency: float = 4.0) -> DatasetManifest:
    """Fine-grained oriented gratings: class k is orientation k*pi/classes.

    Phase, amplitude, brightness offset, and heavy pixel noise are nuisance
    factors. The close orientation spacing plus low SNR keeps pooled
    random-encoder features well below ceiling while leaving the global
    structure recoverable from a few visible patches.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    labels = rng.integers(0, classes, size=n_images)
    records = []
    for label in labels:
        theta = np.pi * label / classes
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(*amp_range)
        offset = rng.uniform(-0.1, 0.1)
        wave = np.sin(2 * np.pi * frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img = 0.5 + offset + amp * 0.5 * wave[..., None]
        img = img + rng.normal(0.0, noise, size=(image_size, image_size, 3))
        img = np.clip(img, 0.0, 1.0)
        records.append(DatasetRecord(source=(img * 255).astype(np.uint8), label=int(label)))
    return DatasetManifest(records=records, class_count=classes, split="train",
                           normalize_mean=SYNTHETIC_MEAN, normalize_std=SYNTHETIC_STD)


def synthetic_blobs(n_images: int, classes: int = 1, image_size: int = 32,
                    seed: int = 7) -> DatasetManifest:
    """Textured rectangular foreground on a contrasting noisy background, with
    ground-truth boxes attached for localization metrics."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    records, boxes = [], []
    for _ in range(n_images):
        bg = rng.uniform(0.1, 0.35)
        img = rng.normal(bg, 0.05, size=(image_size, image_size, 3))
        w = int(rng.integers(image_size // 4, image_size // 2 + 1))
        h = int(rng.integers(image_size // 4, image_size // 2 + 1))
        x0 = int(rng.integers(0, image_size - w + 1))
        y0 = int(rng.integers(0, image_size - h + 1))
        fg = rng.uniform(0.65, 0.9, size=3)
        img[y0:y0 + h, x0:x0 + w] = fg + rng.normal(0, 0.05, size=(h, w, 3))
        img = np.clip(img, 0.0, 1.0)
        label = int(rng.integers(0, classes))
        records.append(DatasetRecord(source=(img * 255).astype(np.uint8), label=label))
        boxes.append([(float(x0), float(y0), float(x0 + w), float(y0 + h))])
    return DatasetManifest(records=records, class_count=classes, split="train",
                           normalize_mean=SYNTHETIC_MEAN, normalize_std=SYNTHETIC_STD,
                           boxes=boxes)


def synthetic_colors(n_images: int, classes: int, image_size: int = 32,
                     seed: int = 7) -> DatasetManifest:
    """Constant-color images, one color per class; linearly separable pooled
    features with essentially any encoder. Useful as a sanity corpus."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 29)))
    palette = rng.uniform(0.1, 0.9, size=(classes, 3))
    labels = np.arange(n_images) % classes
    records = [DatasetRecord(source=np.broadcast_to(
        (palette[l] * 255).astype(np.uint8), (image_size, image_size, 3)).copy(), label=int(l))
        for l in labels]
    return DatasetManifest(records=records, class_count=classes, split="train",
                           normalize_mean=SYNTHETIC_MEAN, normalize_std=SYNTHETIC_STD)


def build_dataset(cfg: DataConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """(train, val) manifests for a DataConfig."""
    if cfg.source == "synthetic":
        maker = {"gratings": synthetic_gratings, "blobs": synthetic_blobs}[cfg.kind]
        manifest = maker(cfg.n_images, cfg.classes, cfg.image_size, cfg.seed)
    else:
        manifest = load_dataset(cfg.source)
    return split_manifest(manifest, cfg.val_fraction, seed=cfg.seed)


# ---------------------------------------------------------------------------
# augmentation and batching

def _bilinear_resize(image: np.ndarray, out_size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h == out_size and w == out_size:
        return image
    ys = (np.arange(out_size) + 0.5) * h / out_size - 0.5
    xs = (np.arange(out_size) + 0.5) * w / out_size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_crop_geometry(h: int, w: int, cfg: AugmentConfig,
                         rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Draw (crop_h, crop_w, y0, x0) for a random resized crop.

    The area fraction is uniform in ``crop_scale``; the aspect ratio is drawn
    uniformly from the sub-interval of [3/4, 4/3] that keeps the crop inside
    the image, so the realized area fraction stays uniform (up to integer
    rounding) instead of being skewed by rejection retries.
    """
    low, high = cfg.crop_scale
    frac = rng.uniform(low, high)
    area = frac * h * w
    # feasibility: crop_w = sqrt(area*r) <= w and crop_h = sqrt(area/r) <= h
    r_min = max(3.0 / 4.0, area / (h * h))
    r_max = min(4.0 / 3.0, (w * w) / area)
    if r_min > r_max:  # extreme aspect images: fall back to the feasible point
        r_min = r_max = float(np.clip(area / (h * h), 3.0 / 4.0, 4.0 / 3.0))
    ratio = rng.uniform(r_min, r_max)
    cw = min(w, max(1, int(round(np.sqrt(area * ratio)))))
    ch = min(h, max(1, int(round(np.sqrt(area / ratio)))))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    return ch, cw, y0, x0


def random_resized_crop(image: np.ndarray, cfg: AugmentConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Crop a random area fraction (uniform in ``crop_scale``) at an aspect
    ratio within [3/4, 4/3], then resize to ``output_size``."""
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise DataError(f"degenerate image {h}x{w}")
    ch, cw, y0, x0 = sample_crop_geometry(h, w, cfg, rng)
    crop = image[y0:y0 + ch, x0:x0 + cw]
    return _bilinear_resize(crop, cfg.output_size)


def normalize_image(image: np.ndarray, mean, std) -> np.ndarray:
    return ((image - np.asarray(mean, dtype=image.dtype))
            / np.asarray(std, dtype=image.dtype))


def denormalize_image(image: np.ndarray, mean, std) -> np.ndarray:
    return image * np.asarray(std, dtype=image.dtype) + np.asarray(mean, dtype=image.dtype)


def make_batches(manifest: DatasetManifest, batch_size: int, augment: AugmentConfig | None,
                 rng: np.random.Generator, aug_rng: np.random.Generator | None = None,
                 output_size: int | None = None):
    """Epoch iterator of normalized batches; shuffled, last partial batch dropped.

    Yields Batch(images, labels, indices); the record indices let precomputed
    teacher features line up with their images. Without augmentation, images
    whose size differs from ``output_size`` are bilinearly resized.
    """
    n = len(manifest)
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if batch_size > n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {n}")
    if aug_rng is None:
        aug_rng = rng
    order = rng.permutation(n)
    mean, std = manifest.normalize_mean, manifest.normalize_std
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        images = []
        for i in idx:
            img = _load_image(manifest.records[i].source)
            if augment is not None:
                img = random_resized_crop(img, augment, aug_rng)
                if augment.flip_prob > 0 and aug_rng.random() < augment.flip_prob:
                    img = img[:, ::-1]
            elif output_size is not None and img.shape[:2] != (output_size, output_size):
                img = _bilinear_resize(img, output_size)
            images.append(np.ascontiguousarray(img, dtype=np.float32))
        batch = normalize_image(np.stack(images), mean, std)
        yield Batch(images=batch, labels=manifest.labels[idx], indices=idx)
