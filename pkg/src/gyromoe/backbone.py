"""Masked-autoencoder transformer backbone for 1-D rate segments.

A segment is split into fixed-length patches, linearly embedded with
sinusoidal position codes, and a subset of patch tokens (the mask) is
hidden from the encoder. The decoder sees encoder latents re-expanded to
the full grid, with a learned mask token standing in at hidden positions,
and predicts every patch.

Attention logits can carry an additive distance penalty
``B[i, j] = -(pos_i - pos_j)^2 / (2 sigma^2)`` with a single learnable
sigma shared across layers and heads. As sigma grows the penalty vanishes
and the block reduces to plain dot-product attention; sigma is kept inside
[sigma_min, sigma_max] by clamping after each optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import DiffContext, Param, Tensor
from .errors import ConfigError, ContractError, DimensionError, MaskError

GD_PLACEMENTS = ("none", "encoder", "decoder", "both")


@dataclass
class BackboneConfig:
    patch_len: int = 16
    embed_dim: int = 64
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    gd_placement: str = "decoder"
    sigma_init: float = 8.0
    sigma_min: float = 0.5
    sigma_max: float = 1e6

    def __post_init__(self):
        if self.patch_len < 1:
            raise ConfigError(f"patch_len must be >= 1, got {self.patch_len}")
        if self.embed_dim < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}"
            )
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.gd_placement not in GD_PLACEMENTS:
            raise ConfigError(
                f"gd_placement must be one of {GD_PLACEMENTS}, got {self.gd_placement!r}"
            )
        if not 0.0 < self.sigma_min <= self.sigma_init <= self.sigma_max:
            raise ConfigError(
                f"need 0 < sigma_min <= sigma_init <= sigma_max, got "
                f"({self.sigma_min}, {self.sigma_init}, {self.sigma_max})"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass(frozen=True)
class MaskSet:
    """Hidden patch indices within a grid of ``n_patches`` patches."""

    hidden: frozenset
    n_patches: int

    def __post_init__(self):
        if self.n_patches < 1:
            raise ContractError(f"n_patches must be >= 1, got {self.n_patches}")
        object.__setattr__(self, "hidden", frozenset(int(i) for i in self.hidden))
        for i in self.hidden:
            if not 0 <= i < self.n_patches:
                raise MaskError(f"mask index {i} outside [0, {self.n_patches})")

    def hidden_sorted(self) -> np.ndarray:
        return np.asarray(sorted(self.hidden), dtype=np.int64)

    def visible_sorted(self) -> np.ndarray:
        vis = [i for i in range(self.n_patches) if i not in self.hidden]
        return np.asarray(vis, dtype=np.int64)

    def is_empty(self) -> bool:
        return len(self.hidden) == 0


@dataclass
class TokenSequence:
    """Token matrix plus the patch-grid positions each row came from."""

    tokens: Tensor
    positions: np.ndarray


# ---------------------------------------------------------------------------
# Parameter store.


class ModelParams:
    """Ordered name -> Param store for one backbone."""

    def __init__(self, store: dict, config: BackboneConfig):
        self.store = store
        self.config = config

    def __getitem__(self, name: str) -> Param:
        try:
            return self.store[name]
        except KeyError:
            raise ConfigError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self.store

    def names(self):
        return list(self.store.keys())

    def items(self):
        return self.store.items()

    def all_params(self):
        return list(self.store.values())

    def n_scalars(self) -> int:
        """Total trainable scalar count, counting shared buffers once."""
        seen = set()
        total = 0
        for p in self.store.values():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.tensor.data.size
        return total

    def clamp_sigma(self):
        cfg = self.config
        if "gd_sigma" in self.store:
            arr = self.store["gd_sigma"].tensor.data
            np.clip(arr, cfg.sigma_min, cfg.sigma_max, out=arr)

    def to_arrays(self) -> dict:
        return {name: p.tensor.data.copy() for name, p in self.store.items()}

    def load_arrays(self, arrays: dict):
        for name, p in self.store.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter '{name}'")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.tensor.data.shape:
                raise DimensionError(
                    f"parameter '{name}' shape {arr.shape} does not match expected "
                    f"{p.tensor.data.shape}"
                )
            p.tensor.data[...] = arr


def _block_spec(prefix: str, d: int, r: int) -> list:
    return [
        (f"{prefix}.ln1.g", (d,), "ln_gain"),
        (f"{prefix}.ln1.b", (d,), "bias"),
        (f"{prefix}.attn.wq", (d, d), "weight"),
        (f"{prefix}.attn.bq", (d,), "bias"),
        (f"{prefix}.attn.wk", (d, d), "weight"),
        (f"{prefix}.attn.bk", (d,), "bias"),
        (f"{prefix}.attn.wv", (d, d), "weight"),
        (f"{prefix}.attn.bv", (d,), "bias"),
        (f"{prefix}.attn.wo", (d, d), "weight"),
        (f"{prefix}.attn.bo", (d,), "bias"),
        (f"{prefix}.ln2.g", (d,), "ln_gain"),
        (f"{prefix}.ln2.b", (d,), "bias"),
        (f"{prefix}.mlp.w1", (d, r * d), "weight"),
        (f"{prefix}.mlp.b1", (r * d,), "bias"),
        (f"{prefix}.mlp.w2", (r * d, d), "weight"),
        (f"{prefix}.mlp.b2", (d,), "bias"),
    ]


def param_spec(config: BackboneConfig) -> list:
    """Ordered (name, shape, init_kind) triples for one backbone."""
    d = config.embed_dim
    spec = [
        ("embed.w", (config.patch_len, d), "weight"),
        ("embed.b", (d,), "bias"),
    ]
    for i in range(config.enc_layers):
        spec.extend(_block_spec(f"enc{i}", d, config.mlp_ratio))
    spec.append(("mask_token", (1, d), "weight"))
    for i in range(config.dec_layers):
        spec.extend(_block_spec(f"dec{i}", d, config.mlp_ratio))
    spec.extend(
        [
            ("dec_norm.g", (d,), "ln_gain"),
            ("dec_norm.b", (d,), "bias"),
            ("head.w", (d, config.patch_len), "weight"),
            ("head.b", (config.patch_len,), "bias"),
        ]
    )
    if config.gd_placement != "none":
        spec.append(("gd_sigma", (), "sigma"))
    return spec


def is_encoder_param(name: str) -> bool:
    """Encoder-side scope: patch embedding and encoder blocks."""
    return name.startswith("embed.") or name.startswith("enc")


def init_param_array(kind: str, shape, rng: np.random.Generator, config: BackboneConfig) -> np.ndarray:
    if kind == "weight":
        return rng.normal(0.0, 0.02, shape)
    if kind == "bias":
        return np.zeros(shape)
    if kind == "ln_gain":
        return np.ones(shape)
    if kind == "sigma":
        return np.asarray(config.sigma_init)
    raise ConfigError(f"unknown init kind '{kind}'")


def init_params(config: BackboneConfig, rng: np.random.Generator) -> ModelParams:
    store = {}
    for name, shape, kind in param_spec(config):
        store[name] = Param(init_param_array(kind, shape, rng, config))
    return ModelParams(store, config)


# ---------------------------------------------------------------------------
# Patching and position codes.


def patchify(values: np.ndarray, patch_len: int) -> np.ndarray:
    """Reshape a flat segment into [n_patches, patch_len] rows."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"patchify needs a 1-D input, got {arr.shape}")
    if patch_len < 1 or arr.size % patch_len != 0:
        raise DimensionError(
            f"segment length {arr.size} is not a multiple of patch length {patch_len}"
        )
    return arr.reshape(-1, patch_len)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"unpatchify needs a 2-D input, got {arr.shape}")
    return arr.reshape(-1)


def pe_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position codes, [n_positions, dim]."""
    if dim % 2 != 0:
        raise ConfigError(f"position code width must be even, got {dim}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


# ---------------------------------------------------------------------------
# Gaussian-decay attention.


def gd_bias(n_tokens: int, sigma: float, positions=None) -> np.ndarray:
    """Additive logit penalty ``-(pos_i - pos_j)^2 / (2 sigma^2)``."""
    if sigma <= 0.0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    if positions is None:
        positions = np.arange(n_tokens, dtype=np.float64)
    else:
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (n_tokens,):
            raise DimensionError(
                f"positions shape {positions.shape} does not match n_tokens {n_tokens}"
            )
    d = positions[:, None] - positions[None, :]
    return -(d * d) / (2.0 * sigma * sigma)


def gd_attention(q, k, v, sigma: float | None, positions=None) -> np.ndarray:
    """Single-head attention with the distance penalty applied to logits.

    ``sigma=None`` disables the penalty entirely; large sigma approaches the
    same limit smoothly. Inputs are [n, d_k] / [n, d_k] / [n, d_v].
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("gd_attention needs 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"gd_attention shapes q{q.shape} k{k.shape} v{v.shape} are incompatible"
        )
    logits = q @ k.T / math.sqrt(q.shape[1])
    if sigma is not None:
        logits = logits + gd_bias(q.shape[0], sigma, positions)
    shifted = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def _gd_bias_tensor(ctx: DiffContext, sigma_param: Param, positions: np.ndarray) -> Tensor:
    # differentiable in sigma: B = (-0.5 / sigma^2) * d^2
    pos = np.asarray(positions, dtype=np.float64)
    d = pos[:, None] - pos[None, :]
    d2 = dm.constant(d * d)
    s2 = dm.square(ctx, sigma_param)
    inv = dm.reciprocal(ctx, s2)
    coef = dm.scale(ctx, inv, -0.5)
    return dm.scalar_mul(ctx, coef, d2)


# ---------------------------------------------------------------------------
# Transformer blocks (pre-norm).


def _linear(ctx, x, params, w_name, b_name):
    return dm.add(ctx, dm.matmul(ctx, x, params[w_name]), params[b_name])


def _attention_sublayer(ctx, params, prefix, config, x, bias_term):
    d_k = config.head_dim
    h = dm.layer_norm(ctx, x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    q = _linear(ctx, h, params, f"{prefix}.attn.wq", f"{prefix}.attn.bq")
    k = _linear(ctx, h, params, f"{prefix}.attn.wk", f"{prefix}.attn.bk")
    v = _linear(ctx, h, params, f"{prefix}.attn.wv", f"{prefix}.attn.bv")
    head_outs = []
    for head in range(config.heads):
        cols = np.arange(head * d_k, (head + 1) * d_k, dtype=np.int64)
        qh = dm.gather(ctx, q, cols, axis=1)
        kh = dm.gather(ctx, k, cols, axis=1)
        vh = dm.gather(ctx, v, cols, axis=1)
        logits = dm.scale(ctx, dm.matmul(ctx, qh, dm.transpose(ctx, kh)), 1.0 / math.sqrt(d_k))
        if bias_term is not None:
            logits = dm.add(ctx, logits, bias_term)
        attn = dm.row_softmax(ctx, logits)
        head_outs.append(dm.matmul(ctx, attn, vh))
    merged = head_outs[0] if len(head_outs) == 1 else dm.concat(ctx, head_outs, axis=1)
    out = _linear(ctx, merged, params, f"{prefix}.attn.wo", f"{prefix}.attn.bo")
    return dm.add(ctx, x, out)


def _mlp_sublayer(ctx, params, prefix, x):
    h = dm.layer_norm(ctx, x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = _linear(ctx, h, params, f"{prefix}.mlp.w1", f"{prefix}.mlp.b1")
    h = dm.gelu(ctx, h)
    h = _linear(ctx, h, params, f"{prefix}.mlp.w2", f"{prefix}.mlp.b2")
    return dm.add(ctx, x, h)


def _run_blocks(ctx, params, config, x, prefix, n_layers, positions, use_gd):
    bias_term = None
    if use_gd:
        bias_term = _gd_bias_tensor(ctx, params["gd_sigma"], positions)
    for i in range(n_layers):
        x = _attention_sublayer(ctx, params, f"{prefix}{i}", config, x, bias_term)
        x = _mlp_sublayer(ctx, params, f"{prefix}{i}", x)
    return x


# ---------------------------------------------------------------------------
# Backbone passes.


def embed(ctx: DiffContext, params: ModelParams, config: BackboneConfig, values) -> TokenSequence:
    """Patchify, linearly project, and add position codes for all patches."""
    patches = patchify(dm.value(values), config.patch_len)
    n = patches.shape[0]
    tok = _linear(ctx, dm.constant(patches), params, "embed.w", "embed.b")
    tok = dm.add(ctx, tok, dm.constant(pe_table(n, config.embed_dim)))
    return TokenSequence(tok, np.arange(n, dtype=np.int64))


def apply_mask(ctx: DiffContext, seq: TokenSequence, mask: MaskSet) -> TokenSequence:
    """Drop hidden-position tokens; raises if nothing stays visible."""
    if len(seq.positions) != mask.n_patches:
        raise DimensionError(
            f"mask covers {mask.n_patches} patches but sequence has {len(seq.positions)}"
        )
    visible = mask.visible_sorted()
    if visible.size == 0:
        raise MaskError("mask hides every patch; encoder needs at least one visible token")
    return TokenSequence(dm.gather(ctx, seq.tokens, visible, axis=0), visible)


def encode(ctx: DiffContext, params: ModelParams, config: BackboneConfig, seq: TokenSequence) -> TokenSequence:
    use_gd = config.gd_placement in ("encoder", "both")
    x = _run_blocks(ctx, params, config, seq.tokens, "enc", config.enc_layers, seq.positions, use_gd)
    return TokenSequence(x, seq.positions)


def pad_with_mask_tokens(
    ctx: DiffContext,
    params: ModelParams,
    config: BackboneConfig,
    latent: TokenSequence,
    mask: MaskSet,
) -> TokenSequence:
    """Re-expand latents to the full grid, mask token at hidden slots."""
    n_total = mask.n_patches
    full = dm.scatter(ctx, latent.tokens, latent.positions, n_total, axis=0)
    hidden = mask.hidden_sorted()
    if hidden.size:
        ones = dm.constant(np.ones((hidden.size, 1)))
        tiled = dm.matmul(ctx, ones, params["mask_token"])
        full = dm.add(ctx, full, dm.scatter(ctx, tiled, hidden, n_total, axis=0))
    # fresh position codes for the decoder stack
    full = dm.add(ctx, full, dm.constant(pe_table(n_total, config.embed_dim)))
    return TokenSequence(full, np.arange(n_total, dtype=np.int64))


def decode(ctx: DiffContext, params: ModelParams, config: BackboneConfig, seq: TokenSequence) -> Tensor:
    """Decoder blocks, final norm, and per-patch linear prediction head."""
    use_gd = config.gd_placement in ("decoder", "both")
    x = _run_blocks(ctx, params, config, seq.tokens, "dec", config.dec_layers, seq.positions, use_gd)
    x = dm.layer_norm(ctx, x, params["dec_norm.g"], params["dec_norm.b"])
    return _linear(ctx, x, params, "head.w", "head.b")


def forward(
    ctx: DiffContext,
    params: ModelParams,
    config: BackboneConfig,
    values,
    mask: MaskSet,
) -> Tensor:
    """Full masked-autoencoder pass; returns the flat [L] prediction."""
    vals = dm.value(values)
    n_patches = vals.size // config.patch_len
    if mask.n_patches != n_patches:
        raise DimensionError(
            f"mask covers {mask.n_patches} patches but segment has {n_patches}"
        )
    seq = embed(ctx, params, config, vals)
    visible = apply_mask(ctx, seq, mask)
    latent = encode(ctx, params, config, visible)
    full = pad_with_mask_tokens(ctx, params, config, latent, mask)
    patches = decode(ctx, params, config, full)
    return dm.reshape(ctx, patches, (vals.size,))


def forward_values(params: ModelParams, config: BackboneConfig, values, mask: MaskSet) -> np.ndarray:
    """Inference-only wrapper returning a plain ndarray."""
    return forward(DiffContext(), params, config, values, mask).data
