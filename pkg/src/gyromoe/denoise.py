"""Dual-branch denoise expert.

Two backbone branches see complementary 50% patch masks of the same noisy
segment: branch A hides odd patches, branch B hides even ones. Each branch
is trained to predict a cleaner target at its own hidden positions, and at
inference the two half-predictions are fused into a full segment.

Training data comes from FFT-guided augmentation of static noise records:
a smooth motion snippet is scaled to sit near the measured noise floor and
added in, then extra noise with the same spectral shape as the record is
synthesized (random phases) and mixed on top. The clean mix (before the
extra noise) is the regression target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import diffmath as dm
from .diffmath import DiffContext, Param, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .optim import Adam
from .signal import ClipSpec, SampleSeries, Segment, SpectralDensity, psd

log = logging.getLogger("gyromoe.denoise")

SHARE_MODES = ("none", "encoder", "decoder", "both")


@dataclass
class AugmentConfig:
    """Knobs for the weak-signal injection and spectral corruption."""

    snippet_pool: list
    beta: float = 8.0
    corruption_gain: float = 1.0

    def __post_init__(self):
        if not self.snippet_pool:
            raise ConfigError("augmentation needs a nonempty snippet pool")
        if self.beta <= 0.0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.corruption_gain < 0.0:
            raise ConfigError(f"corruption_gain must be >= 0, got {self.corruption_gain}")


@dataclass
class DeConfig:
    clip: ClipSpec
    backbone: bb.BackboneConfig = field(default_factory=lambda: bb.BackboneConfig(gd_placement="decoder"))
    weight_share: str = "both"
    learn_rate: float = 1e-3
    batch_size: int = 32
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.weight_share not in SHARE_MODES:
            raise ConfigError(
                f"weight_share must be one of {SHARE_MODES}, got {self.weight_share!r}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


class DeParams:
    """Two branch parameter stores with configurable overlap."""

    def __init__(self, branch_a: bb.ModelParams, branch_b: bb.ModelParams, weight_share: str):
        self.branch_a = branch_a
        self.branch_b = branch_b
        self.weight_share = weight_share

    def unique_params(self):
        seen = set()
        out = []
        for p in list(self.branch_a.store.values()) + list(self.branch_b.store.values()):
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def n_scalars(self) -> int:
        return sum(p.tensor.data.size for p in self.unique_params())

    def clamp_sigma(self):
        self.branch_a.clamp_sigma()
        self.branch_b.clamp_sigma()

    def to_arrays(self) -> dict:
        """Canonical name -> array map: shared buffers once, others prefixed."""
        out = {}
        for name, pa in self.branch_a.store.items():
            pb = self.branch_b.store[name]
            if pa is pb:
                out[name] = pa.tensor.data.copy()
            else:
                out[f"a.{name}"] = pa.tensor.data.copy()
                out[f"b.{name}"] = pb.tensor.data.copy()
        return out

    def load_arrays(self, arrays: dict):
        for name, pa in self.branch_a.store.items():
            pb = self.branch_b.store[name]
            if pa is pb:
                src = arrays.get(name)
                if src is None:
                    raise ConfigError(f"checkpoint missing shared parameter '{name}'")
                _copy_into(pa, src, name)
            else:
                src_a, src_b = arrays.get(f"a.{name}"), arrays.get(f"b.{name}")
                if src_a is None or src_b is None:
                    raise ConfigError(f"checkpoint missing branch parameter '{name}'")
                _copy_into(pa, src_a, f"a.{name}")
                _copy_into(pb, src_b, f"b.{name}")


def _copy_into(param: Param, arr, name: str):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != param.tensor.data.shape:
        raise DimensionError(
            f"parameter '{name}' shape {arr.shape} does not match expected {param.tensor.data.shape}"
        )
    param.tensor.data[...] = arr


def _share_predicate(mode: str):
    if mode == "both":
        return lambda name: True
    if mode == "none":
        return lambda name: False
    if mode == "encoder":
        return bb.is_encoder_param
    return lambda name: not bb.is_encoder_param(name)


def build_de_params(config: DeConfig, rng: np.random.Generator) -> DeParams:
    """Initialize both branches, aliasing buffers selected by weight_share."""
    shared = _share_predicate(config.weight_share)
    store_a, store_b = {}, {}
    for name, shape, kind in bb.param_spec(config.backbone):
        p = Param(bb.init_param_array(kind, shape, rng, config.backbone))
        store_a[name] = p
        if shared(name):
            store_b[name] = p
        else:
            store_b[name] = Param(bb.init_param_array(kind, shape, rng, config.backbone))
    return DeParams(
        bb.ModelParams(store_a, config.backbone),
        bb.ModelParams(store_b, config.backbone),
        config.weight_share,
    )


# ---------------------------------------------------------------------------
# Cross masks and fusion.


def cross_masks(num_patches: int) -> tuple[bb.MaskSet, bb.MaskSet]:
    """Complementary 50% masks: A hides odd patches, B hides even ones."""
    if num_patches < 2:
        raise ContractError(f"cross masks need at least 2 patches, got {num_patches}")
    odd = frozenset(range(1, num_patches, 2))
    even = frozenset(range(0, num_patches, 2))
    return bb.MaskSet(odd, num_patches), bb.MaskSet(even, num_patches)


def fuse(pred_a, pred_b, mask_a: bb.MaskSet, mask_b: bb.MaskSet, patch_len: int) -> np.ndarray:
    """Stitch branch outputs, taking each branch at its own hidden patches."""
    a = np.asarray(dm.value(pred_a), dtype=np.float64)
    c = np.asarray(dm.value(pred_b), dtype=np.float64)
    if a.shape != c.shape or a.ndim != 1:
        raise DimensionError(f"fuse needs matching 1-D inputs, got {a.shape} and {c.shape}")
    n = mask_a.n_patches
    if mask_b.n_patches != n or a.size != n * patch_len:
        raise DimensionError("fuse masks do not tile the segment")
    if mask_a.hidden | mask_b.hidden != frozenset(range(n)) or mask_a.hidden & mask_b.hidden:
        raise ContractError("fuse needs complementary masks covering every patch")
    out = np.empty_like(a)
    for i in range(n):
        src = a if i in mask_a.hidden else c
        out[i * patch_len : (i + 1) * patch_len] = src[i * patch_len : (i + 1) * patch_len]
    return out


# ---------------------------------------------------------------------------
# FFT-guided augmentation.


def noise_floor(density: SpectralDensity) -> float:
    """Median one-sided PSD level, a robust white-floor estimate."""
    return float(np.median(density.power))


@dataclass
class InjectionResult:
    x_mix: np.ndarray
    x_clean: np.ndarray
    offset: int
    alpha: float
    snippet_len: int


def inject_weak_signal(
    noise: SampleSeries,
    snippet: np.ndarray,
    beta: float,
    rng: np.random.Generator,
    floor: float | None = None,
) -> InjectionResult:
    """Add a scaled snippet at a random offset inside a noise record.

    The scale is ``alpha = beta * sqrt(floor) / max|snippet|``, tying the
    injected amplitude to the measured noise floor. Returns both the mixed
    signal and the identical clean copy; corruption is applied separately.
    """
    s = np.asarray(snippet, dtype=np.float64)
    n = len(noise)
    if s.ndim != 1 or s.size == 0:
        raise ContractError("snippet must be a nonempty 1-D array")
    if s.size > n:
        raise ContractError(f"snippet of {s.size} does not fit in record of {n}")
    peak = float(np.abs(s).max())
    if peak <= 0.0:
        raise ContractError("snippet is identically zero")
    if floor is None:
        floor = noise_floor(psd(noise))
    if floor < 0.0:
        raise ContractError(f"noise floor must be >= 0, got {floor}")
    alpha = beta * math.sqrt(floor) / peak
    offset = int(rng.integers(0, n - s.size + 1))
    x_clean = noise.values.copy()
    x_clean[offset : offset + s.size] += alpha * s
    return InjectionResult(x_clean.copy(), x_clean, offset, alpha, s.size)


def spectral_corruption(
    values: np.ndarray,
    sample_rate: float,
    density: SpectralDensity,
    gain: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Add synthetic noise whose PSD matches ``gain`` times the given shape.

    Per-bin magnitudes are derived from the one-sided density and phases are
    drawn uniformly; the DC bin stays zero. ``gain=0`` returns an untouched
    copy.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ContractError("spectral_corruption needs a 1-D record of >= 2 samples")
    if gain < 0.0:
        raise ContractError(f"gain must be >= 0, got {gain}")
    if gain == 0.0:
        return x.copy()
    n = x.size
    k = n // 2 + 1
    if density.power.shape != (k,):
        raise DimensionError(
            f"density has {density.power.shape[0]} bins but record needs {k}"
        )
    # invert the one-sided periodogram convention: S_k = c_k |X_k|^2 / (fs n)
    c = np.full(k, 2.0)
    c[0] = 1.0
    if n % 2 == 0:
        c[-1] = 1.0
    mags = np.sqrt(gain * density.power * sample_rate * n / c)
    spec = np.zeros(k, dtype=np.complex128)
    phases = rng.uniform(0.0, 2.0 * math.pi, k)
    spec[1:] = mags[1:] * np.exp(1j * phases[1:])
    if n % 2 == 0:
        spec[-1] = mags[-1] * (1.0 if phases[-1] < math.pi else -1.0)
    return x + np.fft.irfft(spec, n=n)


def augment_segment(
    noise: SampleSeries,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, InjectionResult]:
    """Full augmentation chain: inject a weak snippet, then corrupt the mix."""
    density = psd(noise)
    floor = noise_floor(density)
    snippet = aug.snippet_pool[int(rng.integers(0, len(aug.snippet_pool)))]
    inj = inject_weak_signal(noise, snippet, aug.beta, rng, floor=floor)
    x_mix = spectral_corruption(inj.x_mix, noise.sample_rate, density, aug.corruption_gain, rng)
    return x_mix, inj.x_clean, inj


# ---------------------------------------------------------------------------
# Forward passes, loss, training.


def dual_forward(
    ctx: DiffContext,
    de_params: DeParams,
    config: DeConfig,
    values_norm,
    mask_a: bb.MaskSet,
    mask_b: bb.MaskSet,
) -> tuple[Tensor, Tensor]:
    pred_a = bb.forward(ctx, de_params.branch_a, config.backbone, values_norm, mask_a)
    pred_b = bb.forward(ctx, de_params.branch_b, config.backbone, values_norm, mask_b)
    return pred_a, pred_b


def branch_loss(target, pred, mask: bb.MaskSet, patch_len: int, ctx: DiffContext | None = None) -> Tensor:
    """Mean squared error at the samples the branch had hidden."""
    from .ore import mask_sample_indices  # local import avoids a cycle

    ctx = ctx if ctx is not None else (pred._ctx if isinstance(pred, Tensor) else DiffContext())
    tv = np.asarray(dm.value(target), dtype=np.float64)
    ph = pred if isinstance(pred, (Tensor, Param)) else dm.constant(pred)
    idx = mask_sample_indices(mask, patch_len)
    if idx.size == 0:
        raise ContractError("branch mask hides no patches")
    diff = dm.sub(ctx, dm.constant(tv[idx]), dm.gather(ctx, ph, idx))
    return dm.mean(ctx, dm.square(ctx, diff))


def de_pair_loss(
    target,
    pred_a,
    pred_b,
    mask_a: bb.MaskSet,
    mask_b: bb.MaskSet,
    patch_len: int,
    ctx: DiffContext | None = None,
) -> Tensor:
    """Sum of the two branch losses on complementary masks."""
    if ctx is None and isinstance(pred_a, Tensor):
        ctx = pred_a._ctx
    ctx = ctx if ctx is not None else DiffContext()
    la = branch_loss(target, pred_a, mask_a, patch_len, ctx=ctx)
    lb = branch_loss(target, pred_b, mask_b, patch_len, ctx=ctx)
    return dm.add(ctx, la, lb)


@dataclass
class DeTrainTrace:
    step_losses: list
    epoch_means: list


def train_de(
    noise_segments,
    sample_rate: float,
    aug: AugmentConfig,
    config: DeConfig,
    epochs: int,
    seed: int,
) -> tuple[DeParams, DeTrainTrace]:
    """Train both branches on freshly augmented noise segments each epoch."""
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    segs = [np.asarray(s, dtype=np.float64) for s in noise_segments]
    if not segs:
        raise ConfigError("train_de needs at least one noise segment")
    P = config.backbone.patch_len
    seg_len = segs[0].size
    if seg_len % P != 0 or seg_len // P < 2:
        raise ContractError(
            f"segment length {seg_len} must tile into >= 2 patches of {P}"
        )
    for s in segs:
        if s.shape != (seg_len,):
            raise ContractError("all noise segments must share one length")
    rng = np.random.default_rng(seed)
    de_params = build_de_params(config, rng)
    mask_a, mask_b = cross_masks(seg_len // P)
    opt = Adam(de_params.unique_params(), lr=config.learn_rate, clip_norm=config.grad_clip)
    trace = DeTrainTrace([], [])
    level = config.clip.level
    n = len(segs)
    B = config.batch_size
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, B):
            batch = order[start : start + B]
            opt.zero_grad()
            batch_losses = []
            for i in batch:
                series = SampleSeries(segs[i], sample_rate)
                x_mix, x_clean, _ = augment_segment(series, aug, rng)
                ctx = DiffContext()
                pred_a, pred_b = dual_forward(
                    ctx, de_params, config, x_mix / level, mask_a, mask_b
                )
                loss = de_pair_loss(
                    x_clean / level, pred_a, pred_b, mask_a, mask_b, P, ctx=ctx
                )
                dm.backward(dm.scale(ctx, loss, 1.0 / batch.size), ctx)
                batch_losses.append(float(loss.data))
            opt.step()
            de_params.clamp_sigma()
            step_loss = float(np.mean(batch_losses))
            trace.step_losses.append(step_loss)
            epoch_losses.append(step_loss)
        epoch_mean = float(np.mean(epoch_losses))
        trace.epoch_means.append(epoch_mean)
        log.info("de epoch %d/%d mean loss %.6f", epoch + 1, epochs, epoch_mean)
    return de_params, trace


def denoise(seg: Segment, de_params: DeParams, config: DeConfig) -> Segment:
    """Run both branches on a segment and fuse their hidden-side outputs."""
    P = config.backbone.patch_len
    if seg.values.size % P != 0:
        raise ContractError(
            f"segment length {seg.values.size} does not tile into patches of {P}"
        )
    mask_a, mask_b = cross_masks(seg.values.size // P)
    level = config.clip.level
    ctx = DiffContext()
    pred_a, pred_b = dual_forward(ctx, de_params, config, seg.values / level, mask_a, mask_b)
    fused = fuse(pred_a.data, pred_b.data, mask_a, mask_b, P) * level
    return Segment(fused, seg.origin_index, seg.true_len)


def make_noise_fn(de_params: DeParams, config: DeConfig):
    """Adapter giving the gate a segment -> full-length prediction callable."""

    def noise_fn(seg: Segment) -> np.ndarray:
        return denoise(seg, de_params, config).values

    return noise_fn


# ---------------------------------------------------------------------------
# Checkpoint glue.

_KIND_DE = 2.0


def save_de(path, de_params: DeParams, config: DeConfig) -> None:
    from .checkpoint import save_checkpoint
    from .ore import _backbone_meta

    meta = _backbone_meta(config.backbone)
    meta.update(
        kind=_KIND_DE,
        clip_level=config.clip.level,
        weight_share=SHARE_MODES.index(config.weight_share),
    )
    save_checkpoint(path, de_params.to_arrays(), meta)


def load_de(path) -> tuple[DeParams, DeConfig]:
    from .checkpoint import load_checkpoint
    from .ore import _backbone_from_meta

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != _KIND_DE:
        raise ConfigError(f"checkpoint at {path} is not a noise-expert checkpoint")
    backbone_cfg = _backbone_from_meta(meta)
    try:
        share = SHARE_MODES[int(meta["weight_share"])]
    except (KeyError, IndexError):
        raise ConfigError("checkpoint metadata is missing the weight-share mode") from None
    config = DeConfig(clip=ClipSpec(meta["clip_level"]), backbone=backbone_cfg, weight_share=share)
    de_params = build_de_params(config, np.random.default_rng(0))
    de_params.load_arrays(arrays)
    return de_params, config
