"""Named parameter collections and their initialization.

Parameter names are hierarchical, e.g. ``enc.blocks.2.attn.qkv.w``. Everything
under ``enc.`` is the plain ViT encoder and is exactly what transfers to the
teacher at a stage breakpoint; ``dec.*`` / ``proj.*`` / ``aux.*`` are
student-side apparatus and are re-initialized with the student.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import ConfigError

ENCODER_PREFIX = "enc."


def _block_shapes(prefix: str, dim: int, mlp_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.ln1.g", (dim,)),
        (f"{prefix}.ln1.b", (dim,)),
        (f"{prefix}.attn.qkv.w", (dim, 3 * dim)),
        (f"{prefix}.attn.qkv.b", (3 * dim,)),
        (f"{prefix}.attn.out.w", (dim, dim)),
        (f"{prefix}.attn.out.b", (dim,)),
        (f"{prefix}.ln2.g", (dim,)),
        (f"{prefix}.ln2.b", (dim,)),
        (f"{prefix}.mlp.fc1.w", (dim, mlp_dim)),
        (f"{prefix}.mlp.fc1.b", (mlp_dim,)),
        (f"{prefix}.mlp.fc2.w", (mlp_dim, dim)),
        (f"{prefix}.mlp.fc2.b", (dim,)),
    ]


def param_shapes(config: ModelConfig, encoder_only: bool = False) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs; the order fixes the RNG consumption at init."""
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("enc.patch_embed.w", (config.patch_dim, config.embed_dim)),
        ("enc.patch_embed.b", (config.embed_dim,)),
    ]
    for i in range(config.depth):
        shapes += _block_shapes(f"enc.blocks.{i}", config.embed_dim, config.mlp_dim)
    shapes += [("enc.ln.g", (config.embed_dim,)), ("enc.ln.b", (config.embed_dim,))]
    if encoder_only:
        return shapes
    if config.use_decoder:
        shapes += [
            ("dec.embed.w", (config.embed_dim, config.decoder_dim)),
            ("dec.embed.b", (config.decoder_dim,)),
            ("dec.mask_token", (config.decoder_dim,)),
        ]
        for i in range(config.decoder_depth):
            shapes += _block_shapes(f"dec.blocks.{i}", config.decoder_dim, config.decoder_mlp_dim)
        shapes += [("dec.ln.g", (config.decoder_dim,)), ("dec.ln.b", (config.decoder_dim,))]
        head_in = config.decoder_dim
    else:
        shapes += [("aux.mask_token", (config.embed_dim,))]
        head_in = config.embed_dim
    shapes += [("proj.w", (head_in, config.projection_dim)), ("proj.b", (config.projection_dim,))]
    return shapes


@dataclass
class ParameterStore:
    """Map from parameter name to array, plus provenance metadata."""

    params: dict[str, np.ndarray]
    config: ModelConfig
    init_seed: int = 0
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def config_hash(self) -> str:
        return self.config.config_hash()

    def names(self) -> list[str]:
        return list(self.params.keys())

    def validate(self) -> None:
        """Check finiteness and shape consistency against the config."""
        expected = dict(param_shapes(self.config, encoder_only=self.is_encoder_only()))
        for name, arr in self.params.items():
            if name not in expected:
                raise ConfigError(f"unexpected parameter {name!r}")
            if tuple(arr.shape) != expected[name]:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name}: non-finite values")
        missing = set(expected) - set(self.params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")

    def is_encoder_only(self) -> bool:
        return all(name.startswith(ENCODER_PREFIX) for name in self.params)

    def encoder_subset(self) -> "ParameterStore":
        """Copy of the plain-ViT part (what a teacher consists of)."""
        params = {k: v.copy() for k, v in self.params.items() if k.startswith(ENCODER_PREFIX)}
        return ParameterStore(params=params, config=self.config, init_seed=self.init_seed,
                              meta=dict(self.meta))

    def copy(self) -> "ParameterStore":
        return ParameterStore(params={k: v.copy() for k, v in self.params.items()},
                              config=self.config, init_seed=self.init_seed, meta=dict(self.meta))

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(params={k: v.astype(dtype) for k, v in self.params.items()},
                              config=self.config, init_seed=self.init_seed, meta=dict(self.meta))

    def digest(self) -> str:
        """Content hash over names and raw little-endian float bytes."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            arr = np.ascontiguousarray(self.params[name])
            h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        return h.hexdigest()


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_model(config: ModelConfig, seed: int, dtype=np.float32,
               encoder_only: bool = False) -> ParameterStore:
    """Xavier-uniform weights, zero biases, unit LayerNorm gains.

    Mask tokens get small Gaussian values (0.02 std) so they are trainable but
    start near zero. Deterministic: the same (config, seed) yields bit-identical
    stores.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config, encoder_only=encoder_only):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w":
            params[name] = xavier_uniform(shape, rng, dtype)
        elif leaf == "b":
            params[name] = np.zeros(shape, dtype=dtype)
        elif leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf == "mask_token":
            params[name] = (0.02 * rng.standard_normal(shape)).astype(dtype)
        else:
            raise AssertionError(f"unhandled parameter kind {name}")
    store = ParameterStore(params=params, config=config, init_seed=seed,
                           meta={"config_hash": config.config_hash(), "init_seed": seed})
    return store


def zeros_like_params(store: ParameterStore) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in store.params.items()}
