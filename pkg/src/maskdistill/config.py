"""Configuration dataclasses and their invariants.

Every config validates itself in ``__post_init__`` and raises ``ConfigError``
on violations, so downstream code can assume fields are consistent.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass
class ModelConfig:
    """Architecture of the encoder (plain ViT) plus the student-side extras.

    The encoder is a standard pre-norm ViT: linear patch embedding, fixed 2D
    sin-cos position embeddings, ``depth`` transformer blocks, final LayerNorm.
    When ``use_decoder`` is set the student gets a lightweight decoder that
    restores masked positions from a learned mask token; otherwise the mask
    token is inserted at the embedding level and the encoder runs full-length.
    ``projection_dim`` is the width of the linear head mapping student output
    onto the teacher's feature dimension.
    """

    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    use_decoder: bool = True
    decoder_dim: int | None = None
    decoder_depth: int = 2
    decoder_heads: int | None = None
    projection_dim: int | None = None
    final_ln_on_target: bool = False
    in_channels: int = 3

    def __post_init__(self):
        _require(self.image_size > 0 and self.patch_size > 0, "image_size and patch_size must be positive")
        _require(self.image_size % self.patch_size == 0,
                 f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        _require(self.depth >= 1, "depth must be >= 1")
        _require(self.embed_dim % self.num_heads == 0,
                 f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        _require(0.0 <= self.drop_path_rate <= 1.0, "drop_path_rate must lie in [0, 1]")
        _require(self.mlp_ratio > 0, "mlp_ratio must be positive")
        _require(self.in_channels >= 1, "in_channels must be >= 1")
        if self.decoder_dim is None:
            self.decoder_dim = max(4, self.embed_dim // 2)
        if self.decoder_heads is None:
            self.decoder_heads = max(1, self.num_heads // 2)
        if self.projection_dim is None:
            self.projection_dim = self.embed_dim
        _require(self.projection_dim >= 1, "projection_dim must be >= 1")
        # sin-cos tables split the width across two axes and sin/cos pairs
        _require(self.embed_dim % 4 == 0, "embed_dim must be divisible by 4 (2D sin-cos position embedding)")
        if self.use_decoder:
            _require(self.decoder_depth >= 1, "decoder_depth must be >= 1")
            _require(self.decoder_dim % self.decoder_heads == 0,
                     f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
            _require(self.decoder_dim % 4 == 0, "decoder_dim must be divisible by 4 (sin-cos position embedding)")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return (side, side)

    @property
    def n_patches(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def decoder_mlp_dim(self) -> int:
        return int(round(self.decoder_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


_LOSS_KINDS = ("smooth_l1", "neg_cosine")
_LOSS_POSITIONS = ("masked_only", "all")


@dataclass
class DistillConfig:
    """What the student reconstructs and how the mismatch is scored.

    ``target`` is either ``"pixel"`` (per-patch standardized pixels) or
    ``"block_<k>"`` for the teacher encoder's k-th block output, with
    ``block_0`` meaning the patch embedding (+ position embedding) output.
    """

    loss_kind: str = "smooth_l1"
    smooth_l1_beta: float = 1.0
    loss_positions: str = "masked_only"
    target: str = "block_4"
    apply_final_ln: bool = False
    mask_ratio: float = 0.75
    normalize_pixel_target: bool = True

    def __post_init__(self):
        _require(self.loss_kind in _LOSS_KINDS, f"loss_kind must be one of {_LOSS_KINDS}")
        _require(self.smooth_l1_beta > 0, "smooth_l1_beta must be positive")
        _require(self.loss_positions in _LOSS_POSITIONS, f"loss_positions must be one of {_LOSS_POSITIONS}")
        _require(0.0 <= self.mask_ratio <= 1.0, "mask_ratio must lie in [0, 1]")
        self.target_kind, self.target_block = _parse_target(self.target)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("target_kind", None)
        d.pop("target_block", None)
        return d


def _parse_target(target: str) -> tuple[str, int | None]:
    if target == "pixel":
        return "pixel", None
    if target == "block_last":
        return "block", None        # resolved against the model depth by RunConfig
    if target.startswith("block_"):
        try:
            k = int(target[len("block_"):])
        except ValueError:
            raise ConfigError(f"malformed target {target!r}") from None
        _require(k >= 0, "target block index must be >= 0")
        return "block", k
    raise ConfigError(f"target must be 'pixel' or 'block_<k>', got {target!r}")


@dataclass
class MomentumPolicy:
    """Teacher-update policy: vanilla (copy at breakpoints, frozen otherwise),
    constant EMA coefficient, or a cosine ramp between two coefficients."""

    kind: str = "vanilla"
    value: float | None = None          # constant
    start: float | None = None          # cosine
    end: float | None = None

    def __post_init__(self):
        if self.kind == "vanilla":
            pass
        elif self.kind == "constant":
            _require(self.value is not None and 0.0 <= self.value <= 1.0,
                     "constant momentum needs a value in [0, 1]")
        elif self.kind == "cosine":
            _require(self.start is not None and self.end is not None,
                     "cosine momentum needs start and end values")
            _require(0.0 <= self.start <= 1.0 and 0.0 <= self.end <= 1.0,
                     "cosine momentum endpoints must lie in [0, 1]")
            _require(self.start <= self.end, "cosine momentum requires start <= end")
        else:
            raise ConfigError(f"unknown momentum kind {self.kind!r}")

    @classmethod
    def vanilla(cls) -> "MomentumPolicy":
        return cls(kind="vanilla")

    @classmethod
    def constant(cls, m: float) -> "MomentumPolicy":
        return cls(kind="constant", value=m)

    @classmethod
    def cosine(cls, a: float, b: float) -> "MomentumPolicy":
        return cls(kind="cosine", start=a, end=b)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimConfig:
    """AdamW + schedule settings. ``base_lr`` is the per-256-samples rate;
    the peak rate is ``base_lr * batch_size / 256``."""

    base_lr: float = 1.5e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    total_epochs: int = 100
    steps_per_epoch: int = 100
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        _require(0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0, "betas must lie in (0, 1)")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.warmup_epochs <= self.total_epochs, "warmup_epochs must be <= total_epochs")
        _require(self.warmup_epochs >= 0 and self.total_epochs >= 1, "epoch counts must be nonnegative")
        _require(self.steps_per_epoch >= 1, "steps_per_epoch must be >= 1")
        _require(self.weight_decay >= 0, "weight_decay must be nonnegative")
        _require(self.grad_clip is None or self.grad_clip > 0, "grad_clip must be positive when set")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AugmentConfig:
    """Pre-training augmentation: random resized crop + horizontal flip."""

    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    output_size: int = 32
    normalize_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    normalize_std: tuple[float, ...] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        low, high = self.crop_scale
        _require(0.0 < low <= high <= 1.0, "crop_scale must satisfy 0 < low <= high <= 1")
        _require(0.0 <= self.flip_prob <= 1.0, "flip_prob must lie in [0, 1]")
        _require(self.output_size >= 1, "output_size must be >= 1")
        _require(all(s > 0 for s in self.normalize_std), "normalize_std entries must be positive")


@dataclass
class ProbeConfig:
    """Downstream evaluation: frozen linear probe or full fine-tuning."""

    mode: str = "linear_probe"
    epochs: int = 30
    base_lr: float = 1e-2
    layer_decay: float = 0.75
    label_smoothing: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        _require(self.mode in ("linear_probe", "finetune"), "mode must be linear_probe or finetune")
        _require(self.epochs >= 1, "epochs must be >= 1")
        _require(0.0 < self.layer_decay <= 1.0, "layer_decay must lie in (0, 1]")
        _require(0.0 <= self.label_smoothing < 1.0, "label_smoothing must lie in [0, 1)")
        _require(self.batch_size >= 1, "batch_size must be >= 1")


@dataclass
class DataConfig:
    """Dataset source: a class-per-directory image tree or a synthetic spec."""

    source: str = "synthetic"
    kind: str = "gratings"              # synthetic generator family
    n_images: int = 5000
    classes: int = 10
    image_size: int = 32
    seed: int = 7
    val_fraction: float = 0.1
    augment: bool = False
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        _require(self.val_fraction >= 0.0 and self.val_fraction < 1.0, "val_fraction must lie in [0, 1)")
        if self.source == "synthetic":
            _require(self.kind in ("gratings", "blobs"), "synthetic kind must be 'gratings' or 'blobs'")
            _require(self.n_images >= 1 and self.classes >= 1, "synthetic spec needs n_images and classes >= 1")


@dataclass
class RunConfig:
    """Everything one pre-training run needs, as loaded from a config file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    momentum: MomentumPolicy = field(default_factory=MomentumPolicy.vanilla)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stages: tuple[int, ...] = (8, 8)
    student_reinit: bool = True
    teacher: str = "random"             # "random" or path to an imported teacher
    output_dir: str = "runs/out"
    base_seed: int = 0
    save_every_epoch: bool = False
    per_step_metrics: bool = True

    def __post_init__(self):
        _require(len(self.stages) >= 1 and all(e >= 1 for e in self.stages),
                 "stages must list at least one positive epoch count")
        if self.distill.target == "block_last":
            self.distill.target = f"block_{self.model.depth}"
            self.distill.target_kind, self.distill.target_block = "block", self.model.depth
        if self.data.image_size != self.model.image_size:
            raise ConfigError(
                f"data image_size {self.data.image_size} != model image_size {self.model.image_size}")
        if self.distill.target_kind == "pixel":
            expected = self.model.patch_dim
            if self.model.projection_dim != expected:
                raise ConfigError(
                    f"pixel targets need projection_dim == patch_size^2*channels ({expected}), "
                    f"got {self.model.projection_dim}")
        elif self.distill.target_block is not None and self.distill.target_block > self.model.depth:
            raise ConfigError(
                f"target block {self.distill.target_block} exceeds teacher depth {self.model.depth}")
