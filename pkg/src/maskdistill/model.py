"""Vision transformer forward/backward passes on plain numpy arrays.

The encoder is a pre-norm ViT (patch embedding, fixed 2D sin-cos position
embeddings, multi-head self-attention blocks with optional stochastic depth,
final LayerNorm). The student additionally runs either a lightweight decoder
over mask tokens (asymmetric design) or a full-length encoder with an
input-level mask token, followed by a linear projection onto the teacher's
feature dimension.

Backward passes are hand-written vector-Jacobian products; every function that
participates in training has a ``*_bwd`` counterpart, and the composite
``student_forward`` / ``student_backward`` pair is validated against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .config import ModelConfig
from .masking import _as_flags, gather_rows, scatter_rows, visible_ids
from .store import ParameterStore

LN_EPS = 1e-6
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@dataclass
class TokenSequence:
    """Tokens plus the original patch index of each row."""

    tokens: np.ndarray
    position_ids: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class AttentionRecord:
    """Per-layer attention probabilities, each array shaped [..., heads, T, T]."""

    layers: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return self.layers[0].shape[-3]

    def validate(self, tol: float = 1e-5) -> None:
        for i, a in enumerate(self.layers):
            if np.any(a < 0):
                raise ValueError(f"layer {i}: negative attention weight")
            sums = a.sum(axis=-1)
            if np.max(np.abs(sums - 1.0)) > tol:
                raise ValueError(f"layer {i}: attention rows do not sum to 1")


# ---------------------------------------------------------------------------
# patches and position embeddings

def patchify(image: np.ndarray, patch_size: int) -> TokenSequence:
    """Split [H, W, C] (or [B, H, W, C]) into row-major non-overlapping patch
    tokens of dimension patch_size**2 * C."""
    image = np.asarray(image)
    if image.ndim == 3:
        h, w, c = image.shape
        lead = ()
    elif image.ndim == 4:
        _, h, w, c = image.shape
        lead = image.shape[:1]
    else:
        raise ValueError(f"expected [H,W,C] or [B,H,W,C], got shape {image.shape}")
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gr, gc = h // patch_size, w // patch_size
    x = image.reshape(lead + (gr, patch_size, gc, patch_size, c))
    x = np.moveaxis(x, -3, -4)  # [..., gr, gc, p, p, c]
    tokens = x.reshape(lead + (gr * gc, patch_size * patch_size * c))
    return TokenSequence(tokens=np.ascontiguousarray(tokens),
                         position_ids=np.arange(gr * gc))


def unpatchify(tokens: np.ndarray, patch_size: int, grid: tuple[int, int]) -> np.ndarray:
    """Inverse of patchify for tokens in row-major patch order."""
    tokens = np.asarray(tokens)
    gr, gc = grid
    c = tokens.shape[-1] // (patch_size * patch_size)
    lead = tokens.shape[:-2]
    x = tokens.reshape(lead + (gr, gc, patch_size, patch_size, c))
    x = np.moveaxis(x, -4, -3)  # [..., gr, p, gc, p, c]
    return np.ascontiguousarray(x.reshape(lead + (gr * patch_size, gc * patch_size, c)))


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / (10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2)))
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@lru_cache(maxsize=32)
def _pos_embed_cached(dim: int, rows: int, cols: int, dtype_str: str) -> np.ndarray:
    idx = np.arange(rows * cols)
    emb = np.concatenate([_sincos_1d(dim // 2, idx // cols),
                          _sincos_1d(dim // 2, idx % cols)], axis=1)
    out = emb.astype(np.dtype(dtype_str))
    out.setflags(write=False)
    return out


def pos_embed_table(dim: int, grid: tuple[int, int], dtype=np.float32) -> np.ndarray:
    """Fixed 2D sin-cos embedding table, [rows*cols, dim], row-major."""
    return _pos_embed_cached(dim, grid[0], grid[1], np.dtype(dtype).str)


# ---------------------------------------------------------------------------
# primitive layers

def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _linear_fwd(x, w, b):
    return x @ w + b


def _linear_bwd(dy, x, w, grads, name):
    din = x.shape[-1]
    dout = dy.shape[-1]
    _acc(grads, name + ".w", x.reshape(-1, din).T @ dy.reshape(-1, dout))
    _acc(grads, name + ".b", dy.reshape(-1, dout).sum(axis=0))
    return dy @ w.T


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_bwd(dy, cache, g, grads, name):
    xhat, inv = cache
    _acc(grads, name + ".g", (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
    _acc(grads, name + ".b", dy.reshape(-1, xhat.shape[-1]).sum(axis=0))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _acc(grads: dict, name: str, val: np.ndarray) -> None:
    if name in grads:
        grads[name] += val
    else:
        grads[name] = val


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attn_fwd(x, store, prefix, n_heads, record):
    p = store.params
    qkv = _linear_fwd(x, p[prefix + ".qkv.w"], p[prefix + ".qkv.b"])
    d = x.shape[-1]
    q = _split_heads(qkv[..., :d], n_heads)
    k = _split_heads(qkv[..., d:2 * d], n_heads)
    v = _split_heads(qkv[..., 2 * d:], n_heads)
    scale = 1.0 / float(np.sqrt(d // n_heads))
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    merged = _merge_heads(a @ v)
    y = _linear_fwd(merged, p[prefix + ".out.w"], p[prefix + ".out.b"])
    cache = {"x": x, "q": q, "k": k, "v": v, "a": a, "merged": merged,
             "scale": scale, "n_heads": n_heads}
    return y, cache, (a.copy() if record else None)


def _attn_bwd(dy, cache, store, grads, prefix):
    p = store.params
    q, k, v, a = cache["q"], cache["k"], cache["v"], cache["a"]
    dmerged = _linear_bwd(dy, cache["merged"], p[prefix + ".out.w"], grads, prefix + ".out")
    do = _split_heads(dmerged, cache["n_heads"])
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
    ds *= cache["scale"]
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
    return _linear_bwd(dqkv, cache["x"], p[prefix + ".qkv.w"], grads, prefix + ".qkv")


def _mlp_fwd(x, store, prefix):
    p = store.params
    h = _linear_fwd(x, p[prefix + ".fc1.w"], p[prefix + ".fc1.b"])
    u = _gelu(h)
    y = _linear_fwd(u, p[prefix + ".fc2.w"], p[prefix + ".fc2.b"])
    return y, {"x": x, "h": h, "u": u}


def _mlp_bwd(dy, cache, store, grads, prefix):
    p = store.params
    du = _linear_bwd(dy, cache["u"], p[prefix + ".fc2.w"], grads, prefix + ".fc2")
    dh = du * _gelu_grad(cache["h"])
    return _linear_bwd(dh, cache["x"], p[prefix + ".fc1.w"], grads, prefix + ".fc1")


def _drop_path_scale(batch: int, rate: float, training: bool, rng) -> np.ndarray | None:
    """Per-sample residual-branch scale: 0 (dropped) or 1/(1-rate) (kept)."""
    if not training or rate <= 0.0:
        return None
    if rng is None:
        raise ValueError("training with drop_path_rate > 0 requires an rng")
    if rate >= 1.0:
        return np.zeros((batch, 1, 1))
    keep = (rng.random(batch) >= rate).astype(np.float64)
    return (keep / (1.0 - rate))[:, None, None]


def _block_fwd(x, store, prefix, n_heads, rate, training, rng, record):
    p = store.params
    n1, ln1_cache = _ln_fwd(x, p[prefix + ".ln1.g"], p[prefix + ".ln1.b"])
    a_out, attn_cache, rec = _attn_fwd(n1, store, prefix + ".attn", n_heads, record)
    s1 = _drop_path_scale(x.shape[0], rate, training, rng)
    x1 = x + (a_out if s1 is None else (a_out * s1).astype(x.dtype))
    n2, ln2_cache = _ln_fwd(x1, p[prefix + ".ln2.g"], p[prefix + ".ln2.b"])
    m_out, mlp_cache = _mlp_fwd(n2, store, prefix + ".mlp")
    s2 = _drop_path_scale(x.shape[0], rate, training, rng)
    y = x1 + (m_out if s2 is None else (m_out * s2).astype(x.dtype))
    cache = {"ln1": ln1_cache, "attn": attn_cache, "s1": s1,
             "ln2": ln2_cache, "mlp": mlp_cache, "s2": s2}
    return y, cache, rec


def _block_bwd(dy, cache, store, grads, prefix):
    p = store.params
    dm = dy if cache["s2"] is None else (dy * cache["s2"]).astype(dy.dtype)
    dn2 = _mlp_bwd(dm, cache["mlp"], store, grads, prefix + ".mlp")
    dx1 = dy + _ln_bwd(dn2, cache["ln2"], p[prefix + ".ln2.g"], grads, prefix + ".ln2")
    da = dx1 if cache["s1"] is None else (dx1 * cache["s1"]).astype(dy.dtype)
    dn1 = _attn_bwd(da, cache["attn"], store, grads, prefix + ".attn")
    return dx1 + _ln_bwd(dn1, cache["ln1"], p[prefix + ".ln1.g"], grads, prefix + ".ln1")


def _core_spec(config: ModelConfig, which: str):
    if which == "enc":
        rates = np.linspace(0.0, config.drop_path_rate, config.depth)
        return config.depth, config.num_heads, rates
    return config.decoder_depth, config.decoder_heads, np.zeros(config.decoder_depth)


def _core_fwd(x, store, which, *, training=False, rng=None, record=False, capture=False):
    """Transformer blocks + final LayerNorm. Returns (y, cache)."""
    depth, heads, rates = _core_spec(store.config, which)
    caches, records, captures = [], [], []
    for i in range(depth):
        x, c, rec = _block_fwd(x, store, f"{which}.blocks.{i}", heads, float(rates[i]),
                               training, rng, record)
        caches.append(c)
        if record:
            records.append(rec)
        if capture:
            captures.append(x)
    p = store.params
    y, ln_cache = _ln_fwd(x, p[f"{which}.ln.g"], p[f"{which}.ln.b"])
    cache = {"blocks": caches, "ln": ln_cache, "which": which,
             "records": records if record else None,
             "captures": captures if capture else None}
    return y, cache


def _core_bwd(dy, cache, store, grads):
    which = cache["which"]
    p = store.params
    dx = _ln_bwd(dy, cache["ln"], p[f"{which}.ln.g"], grads, f"{which}.ln")
    for i in reversed(range(len(cache["blocks"]))):
        dx = _block_bwd(dx, cache["blocks"][i], store, grads, f"{which}.blocks.{i}")
    return dx


# ---------------------------------------------------------------------------
# public forward operations

def _batched(tokens: np.ndarray) -> tuple[np.ndarray, bool]:
    if tokens.ndim == 2:
        return tokens[None], True
    if tokens.ndim == 3:
        return tokens, False
    raise ValueError(f"expected [T, D] or [B, T, D] tokens, got shape {tokens.shape}")


def _embed(store: ParameterStore, raw_tokens: np.ndarray, position_ids: np.ndarray) -> np.ndarray:
    p = store.params
    cfg = store.config
    if raw_tokens.shape[-1] != cfg.patch_dim:
        raise ValueError(f"token dim {raw_tokens.shape[-1]} != patch dim {cfg.patch_dim}")
    e = _linear_fwd(raw_tokens, p["enc.patch_embed.w"], p["enc.patch_embed.b"])
    table = pos_embed_table(cfg.embed_dim, cfg.grid, e.dtype)
    return e + table[position_ids]


def forward_encoder(store: ParameterStore, tokens: TokenSequence, record_attention: bool = False,
                    training: bool = False, rng: np.random.Generator | None = None):
    """Encode raw pixel-patch tokens; returns (features, attention record or None).

    Features are the final-LayerNorm output, one row per input token. With
    ``training`` set, stochastic depth is applied (requires ``rng``); eval mode
    is deterministic.
    """
    x, squeeze = _batched(tokens.tokens)
    x = _embed(store, x, tokens.position_ids)
    y, cache = _core_fwd(x, store, "enc", training=training, rng=rng, record=record_attention)
    if squeeze:
        y = y[0]
    record = None
    if record_attention:
        layers = cache["records"]
        record = AttentionRecord(layers=[a[0] if squeeze else a for a in layers])
    return TokenSequence(tokens=y, position_ids=tokens.position_ids), record


def forward_decoder(store: ParameterStore, visible: TokenSequence, mask) -> np.ndarray:
    """Decode visible encoder features back to full patch length.

    Masked positions are filled with the learned mask token before decoding and
    position embeddings are re-added at every row's original patch index.
    """
    cfg = store.config
    if not cfg.use_decoder:
        raise ValueError("model was configured without a decoder")
    flags = _as_flags(mask)
    expected = visible_ids(flags)
    ids = np.asarray(visible.position_ids)
    x, squeeze = _batched(visible.tokens)
    if x.shape[-2] != expected.shape[-1]:
        raise ValueError(
            f"visible count {x.shape[-2]} != mask visible count {expected.shape[-1]}")
    # rows are placed at their own position ids, so input order is irrelevant
    if not np.array_equal(np.sort(ids, axis=-1), expected):
        raise ValueError("visible position ids do not match the mask's visible set")
    p = store.params
    d_in = _linear_fwd(x, p["dec.embed.w"], p["dec.embed.b"])
    full = scatter_rows(d_in, ids, flags.shape[-1], p["dec.mask_token"])
    table = pos_embed_table(cfg.decoder_dim, cfg.grid, full.dtype)
    full = full + table
    y, _ = _core_fwd(full, store, "dec")
    return y[0] if squeeze else y


def project_to_teacher_dim(store: ParameterStore, features: np.ndarray) -> np.ndarray:
    """Linear head mapping student features onto the teacher's embedding width."""
    p = store.params
    if features.shape[-1] != p["proj.w"].shape[0]:
        raise ValueError(f"feature dim {features.shape[-1]} != head input {p['proj.w'].shape[0]}")
    return _linear_fwd(features, p["proj.w"], p["proj.b"])


def pixel_targets(image: np.ndarray, patch_size: int, normalize: bool = True) -> np.ndarray:
    """Raw pixel patches, per-patch standardized to zero mean / unit variance."""
    tokens = patchify(image, patch_size).tokens
    if not normalize:
        return tokens
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + LN_EPS)


def forward_teacher(store: ParameterStore | None, image: np.ndarray, target: str = "block_last",
                    apply_final_ln: bool = False, normalize_pixel: bool = True) -> np.ndarray:
    """Teacher targets from an intact (unmasked) image.

    ``target="pixel"`` returns normalized pixel patches; ``"block_0"`` the
    patch-embedding (+ position) output; ``"block_k"`` the k-th block output.
    The encoder's final LayerNorm is applied to the selected features iff
    ``apply_final_ln``. Always runs in eval mode (no stochastic depth).
    """
    if target == "pixel":
        if store is None:
            raise ValueError("pixel targets without a store need pixel_targets(image, patch_size)")
        return pixel_targets(image, store.config.patch_size, normalize=normalize_pixel)
    if store is None:
        raise ValueError("block targets require teacher parameters")
    cfg = store.config
    if target == "block_last":
        k = cfg.depth
    elif target.startswith("block_"):
        k = int(target[len("block_"):])
    else:
        raise ValueError(f"unknown target {target!r}")
    if k > cfg.depth:
        raise ValueError(f"target block {k} exceeds depth {cfg.depth}")
    seq = patchify(image, cfg.patch_size)
    x, squeeze = _batched(seq.tokens)
    x0 = _embed(store, x, seq.position_ids)
    if k == 0:
        feats = x0
    else:
        _, heads, _ = _core_spec(cfg, "enc")
        feats = x0
        for i in range(k):
            feats, _, _ = _block_fwd(feats, store, f"enc.blocks.{i}", heads, 0.0, False, None, False)
    if apply_final_ln:
        p = store.params
        feats, _ = _ln_fwd(feats, p["enc.ln.g"], p["enc.ln.b"])
    return feats[0] if squeeze else feats


# ---------------------------------------------------------------------------
# full student path (training)

def student_forward(store: ParameterStore, full_tokens: np.ndarray, mask, *,
                    training: bool = False, rng: np.random.Generator | None = None,
                    record_attention: bool = False):
    """Masked student pass: full-length predictions in teacher dimension.

    ``full_tokens`` are the raw pixel patches of the whole image, [B, N, pd];
    only visible rows ever enter the encoder when the decoder is in use, so
    masked pixel content cannot influence the output.
    """
    cfg = store.config
    p = store.params
    flags = _as_flags(mask)
    x, squeeze = _batched(full_tokens)
    if squeeze and flags.ndim == 2:
        raise ValueError("batched mask with a single token sequence")
    ids = visible_ids(flags)
    n_total = flags.shape[-1]
    cache: dict = {"flags": flags, "ids": ids, "squeeze": squeeze}

    if cfg.use_decoder:
        vis = gather_rows(x, ids)
        e = _linear_fwd(vis, p["enc.patch_embed.w"], p["enc.patch_embed.b"])
        table = pos_embed_table(cfg.embed_dim, cfg.grid, e.dtype)
        x0 = e + table[ids]
        enc_out, enc_cache = _core_fwd(x0, store, "enc", training=training, rng=rng,
                                       record=record_attention)
        d_in = _linear_fwd(enc_out, p["dec.embed.w"], p["dec.embed.b"])
        full = scatter_rows(d_in, ids, n_total, p["dec.mask_token"])
        dtable = pos_embed_table(cfg.decoder_dim, cfg.grid, full.dtype)
        full = full + dtable
        dec_out, dec_cache = _core_fwd(full, store, "dec")
        pred = _linear_fwd(dec_out, p["proj.w"], p["proj.b"])
        cache.update(mode="decoder", vis=vis, enc=enc_cache, enc_out=enc_out,
                     dec=dec_cache, dec_out=dec_out)
    else:
        e = _linear_fwd(x, p["enc.patch_embed.w"], p["enc.patch_embed.b"])
        bmask = np.broadcast_to(flags[..., None] if flags.ndim > 1 else flags[None, :, None],
                                e.shape[:-1] + (1,))
        filled = np.where(bmask, p["aux.mask_token"].astype(e.dtype), e)
        table = pos_embed_table(cfg.embed_dim, cfg.grid, e.dtype)
        x0 = filled + table
        enc_out, enc_cache = _core_fwd(x0, store, "enc", training=training, rng=rng,
                                       record=record_attention)
        pred = _linear_fwd(enc_out, p["proj.w"], p["proj.b"])
        cache.update(mode="vanilla", raw=x, enc=enc_cache, enc_out=enc_out, bmask=bmask)
    if squeeze:
        pred = pred[0]
    cache["pred_shape"] = pred.shape
    return pred, cache


def student_backward(dpred: np.ndarray, cache: dict, store: ParameterStore) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every student parameter, given dL/dpred."""
    p = store.params
    grads: dict[str, np.ndarray] = {}
    d = dpred[None] if cache["squeeze"] else dpred
    if cache["mode"] == "decoder":
        ddec_out = _linear_bwd(d, cache["dec_out"], p["proj.w"], grads, "proj")
        dfull = _core_bwd(ddec_out, cache["dec"], store, grads)
        ids = cache["ids"]
        dd_in = gather_rows(dfull, ids)
        # every non-visible row of dfull flowed through the mask token
        dmt = dfull.reshape(-1, dfull.shape[-1]).sum(axis=0) \
            - dd_in.reshape(-1, dfull.shape[-1]).sum(axis=0)
        _acc(grads, "dec.mask_token", dmt)
        denc_out = _linear_bwd(dd_in, cache["enc_out"], p["dec.embed.w"], grads, "dec.embed")
        dx0 = _core_bwd(denc_out, cache["enc"], store, grads)
        _linear_bwd(dx0, cache["vis"], p["enc.patch_embed.w"], grads, "enc.patch_embed")
    else:
        denc_out = _linear_bwd(d, cache["enc_out"], p["proj.w"], grads, "proj")
        dx0 = _core_bwd(denc_out, cache["enc"], store, grads)
        bmask = cache["bmask"]
        dmt = np.where(bmask, dx0, 0.0).reshape(-1, dx0.shape[-1]).sum(axis=0)
        _acc(grads, "aux.mask_token", dmt)
        de = np.where(bmask, 0.0, dx0).astype(dx0.dtype)
        _linear_bwd(de, cache["raw"], p["enc.patch_embed.w"], grads, "enc.patch_embed")
    return grads
