"""Over-range reconstruction expert.

Training is self-supervised: clean synthetic segments are saturated at an
artificial rail, the saturated patches are hidden from the encoder, and the
decoder is trained to recover the clean values there. The loss couples a
masked L2 term with a first-difference correlation term and an
energy-barrier regularizer computed on the prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import diffmath as dm
from .diffmath import DiffContext, Param, Tensor
from .errors import ConfigError, ContractError
from .optim import Adam
from .signal import CLIP_EPS, ClipSpec, Segment, clip, saturated_mask

log = logging.getLogger("gyromoe.ore")


@dataclass
class OreConfig:
    clip: ClipSpec
    backbone: bb.BackboneConfig = field(default_factory=lambda: bb.BackboneConfig(gd_placement="decoder"))
    lambda_corr: float = 0.5
    lambda_pinn: float = 0.2
    lambda_sign: float = 1.0
    kappa: float = 1.0
    learn_rate: float = 1e-3
    batch_size: int = 32
    grad_clip: float = 1.0

    def __post_init__(self):
        for name in ("lambda_corr", "lambda_pinn", "lambda_sign"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.kappa <= 0.0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainTrace:
    step_losses: list
    epoch_means: list
    skipped_segments: int = 0


def mask_from_flags(flags: np.ndarray, patch_len: int) -> bb.MaskSet:
    """Hide every patch containing at least one flagged sample."""
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 1 or flags.size % patch_len != 0:
        raise ContractError(
            f"flag vector of {flags.size} does not tile into patches of {patch_len}"
        )
    n = flags.size // patch_len
    hidden = frozenset(i for i in range(n) if flags[i * patch_len : (i + 1) * patch_len].any())
    return bb.MaskSet(hidden, n)


def threshold_mask(values_norm: np.ndarray, patch_len: int, eps: float = CLIP_EPS) -> bb.MaskSet:
    """Mask built from rail contact on a normalized segment (rail at 1)."""
    arr = np.asarray(values_norm, dtype=np.float64)
    return mask_from_flags(np.abs(arr) >= 1.0 - eps, patch_len)


def mask_sample_indices(mask: bb.MaskSet, patch_len: int) -> np.ndarray:
    """Flat sample indices covered by the hidden patches, ascending."""
    hidden = mask.hidden_sorted()
    if hidden.size == 0:
        return np.empty(0, dtype=np.int64)
    return (hidden[:, None] * patch_len + np.arange(patch_len, dtype=np.int64)[None, :]).reshape(-1)


def _resolve_ctx(ctx, *tensors):
    if ctx is not None:
        return ctx
    for t in tensors:
        if isinstance(t, Tensor) and t._ctx is not None:
            return t._ctx
    return DiffContext()


def corr_loss(x, x_hat, mask_samples, lambda_sign: float = 1.0, ctx: DiffContext | None = None) -> Tensor:
    """First-difference matching plus a value pin at trend reversals.

    The first term is the mean over masked samples t >= 1 of
    ``((x_t - x_{t-1}) - (xh_t - xh_{t-1}))^2``. The second term pins the
    predicted value at masked extrema of the true signal (samples where the
    sign of the first difference flips), weighted by ``lambda_sign``.
    """
    xv = np.asarray(dm.value(x), dtype=np.float64)
    ctx = _resolve_ctx(ctx, x_hat)
    xh = x_hat if isinstance(x_hat, (Tensor, Param)) else dm.constant(x_hat)
    xh_shape = dm.value(xh).shape
    if xv.ndim != 1 or xh_shape != xv.shape:
        raise ContractError(
            f"corr_loss needs matching 1-D series, got {xv.shape} and {xh_shape}"
        )
    m = np.unique(np.asarray(mask_samples, dtype=np.int64))
    if m.size == 0:
        raise ContractError("corr_loss needs a nonempty sample mask")
    if (m < 0).any() or (m >= xv.size).any():
        raise ContractError("corr_loss mask index out of range")
    usable = m[m >= 1]
    if usable.size == 0:
        raise ContractError("corr_loss mask has no usable index (first differences start at t=1)")
    d_true = xv[usable] - xv[usable - 1]
    d_hat = dm.sub(ctx, dm.gather(ctx, xh, usable), dm.gather(ctx, xh, usable - 1))
    total = dm.mean(ctx, dm.square(ctx, dm.sub(ctx, dm.constant(d_true), d_hat)))
    if lambda_sign > 0.0:
        n = xv.size
        cand = m[(m >= 1) & (m <= n - 2)]
        if cand.size:
            s_here = np.sign(xv[cand] - xv[cand - 1])
            s_next = np.sign(xv[cand + 1] - xv[cand])
            extrema = cand[s_here != s_next]
            if extrema.size:
                pin = dm.mean(
                    ctx,
                    dm.square(ctx, dm.sub(ctx, dm.constant(xv[extrema]), dm.gather(ctx, xh, extrema))),
                )
                total = dm.add(ctx, total, dm.scale(ctx, pin, lambda_sign))
    return total


def pinn_loss(x_hat, mask_samples, kappa: float = 1.0, ctx: DiffContext | None = None) -> Tensor:
    """Energy-barrier regularizer on the predicted trajectory.

    Per usable masked sample t (2 <= t <= N-2) the signed power proxy is
    ``e_t = 0.5 * (D2[t-1] + D2[t]) * D1[t]`` with D2 the second and D1 the
    first difference of the prediction. The mean energy is squashed with a
    sigmoid and pushed away from both 0 and 1 by
    ``-log(u) - kappa * log(1 - u)``; a constant prediction lands exactly at
    ``u = 1/2`` giving ``(1 + kappa) * log 2``.
    """
    if kappa <= 0.0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    ctx = _resolve_ctx(ctx, x_hat)
    xh = x_hat if isinstance(x_hat, (Tensor, Param)) else dm.constant(x_hat)
    xh_data = dm.value(xh)
    if xh_data.ndim != 1:
        raise ContractError(f"pinn_loss needs a 1-D series, got {xh_data.shape}")
    n = xh_data.size
    m = np.unique(np.asarray(mask_samples, dtype=np.int64))
    if m.size == 0:
        raise ContractError("pinn_loss needs a nonempty sample mask")
    if (m < 0).any() or (m >= n).any():
        raise ContractError("pinn_loss mask index out of range")
    usable = m[(m >= 2) & (m <= n - 2)]
    if usable.size == 0:
        raise ContractError("pinn_loss mask has no usable index in [2, N-2]")
    x_p1 = dm.gather(ctx, xh, usable + 1)
    x_0 = dm.gather(ctx, xh, usable)
    x_m1 = dm.gather(ctx, xh, usable - 1)
    x_m2 = dm.gather(ctx, xh, usable - 2)
    # 0.5*(D2[t-1] + D2[t]) telescopes to 0.5*(x[t+1] - x[t] - x[t-1] + x[t-2])
    acc = dm.scale(ctx, dm.sub(ctx, dm.sub(ctx, x_p1, x_0), dm.sub(ctx, x_m1, x_m2)), 0.5)
    vel = dm.sub(ctx, x_0, x_m1)
    e_bar = dm.mean(ctx, dm.mul(ctx, acc, vel))
    u = dm.sigmoid(ctx, e_bar)
    one = dm.constant(np.asarray(1.0))
    barrier_lo = dm.scale(ctx, dm.log(ctx, u), -1.0)
    barrier_hi = dm.scale(ctx, dm.log(ctx, dm.sub(ctx, one, u)), -float(kappa))
    return dm.add(ctx, barrier_lo, barrier_hi)


def ore_total_loss(x, x_hat, mask_samples, config: OreConfig, ctx: DiffContext | None = None) -> Tensor:
    """Masked L2 plus weighted correlation and energy-barrier terms."""
    ctx = _resolve_ctx(ctx, x_hat)
    xv = np.asarray(dm.value(x), dtype=np.float64)
    xh = x_hat if isinstance(x_hat, (Tensor, Param)) else dm.constant(x_hat)
    m = np.unique(np.asarray(mask_samples, dtype=np.int64))
    if m.size == 0:
        raise ContractError("ore_total_loss needs a nonempty sample mask")
    l2 = dm.mean(
        ctx, dm.square(ctx, dm.sub(ctx, dm.constant(xv[m]), dm.gather(ctx, xh, m)))
    )
    total = l2
    if config.lambda_corr > 0.0:
        c = corr_loss(xv, xh, m, lambda_sign=config.lambda_sign, ctx=ctx)
        total = dm.add(ctx, total, dm.scale(ctx, c, config.lambda_corr))
    if config.lambda_pinn > 0.0:
        p = pinn_loss(xh, m, kappa=config.kappa, ctx=ctx)
        total = dm.add(ctx, total, dm.scale(ctx, p, config.lambda_pinn))
    return total


# ---------------------------------------------------------------------------
# Training and inference.


def _prepare_segment(clean: np.ndarray, config: OreConfig):
    P = config.backbone.patch_len
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 1 or clean.size % P != 0:
        raise ContractError(
            f"training segment of {clean.shape} does not tile into patches of {P}"
        )
    clipped = clip(clean, config.clip)
    flags = saturated_mask(clipped, config.clip)
    if not flags.any():
        return None
    mask = mask_from_flags(flags, P)
    if len(mask.hidden) == mask.n_patches:
        return None  # nothing left for the encoder
    level = config.clip.level
    midx = mask_sample_indices(mask, P)
    return clipped / level, clean / level, mask, midx


def train_ore(
    segments,
    config: OreConfig,
    epochs: int,
    seed: int,
) -> tuple[bb.ModelParams, TrainTrace]:
    """Train the reconstruction expert on clean segments.

    Each segment is saturated at the configured rail; segments that never
    touch the rail (or saturate everywhere) are skipped. Returns the trained
    parameters and the per-step/per-epoch loss trace.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    rng = np.random.default_rng(seed)
    params = bb.init_params(config.backbone, rng)
    prepared = []
    skipped = 0
    for seg in segments:
        item = _prepare_segment(seg, config)
        if item is None:
            skipped += 1
        else:
            prepared.append(item)
    if not prepared:
        raise ConfigError(
            "no usable training segment: each one either misses the clip rail "
            "or saturates every patch"
        )
    log.info("ore training: %d usable segments, %d skipped", len(prepared), skipped)
    opt = Adam(params.all_params(), lr=config.learn_rate, clip_norm=config.grad_clip)
    trace = TrainTrace([], [], skipped_segments=skipped)
    n = len(prepared)
    B = config.batch_size
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, B):
            batch = order[start : start + B]
            opt.zero_grad()
            batch_losses = []
            for i in batch:
                x_in, x_tgt, mask, midx = prepared[i]
                ctx = DiffContext()
                pred = bb.forward(ctx, params, config.backbone, x_in, mask)
                loss = ore_total_loss(x_tgt, pred, midx, config, ctx=ctx)
                dm.backward(dm.scale(ctx, loss, 1.0 / batch.size), ctx)
                batch_losses.append(float(loss.data))
            opt.step()
            params.clamp_sigma()
            step_loss = float(np.mean(batch_losses))
            trace.step_losses.append(step_loss)
            epoch_losses.append(step_loss)
        epoch_mean = float(np.mean(epoch_losses))
        trace.epoch_means.append(epoch_mean)
        log.info("ore epoch %d/%d mean loss %.6f", epoch + 1, epochs, epoch_mean)
    return params, trace


def reconstruct(seg: Segment, params: bb.ModelParams, config: OreConfig) -> Segment:
    """Replace saturated samples with model predictions.

    Samples off the rail pass through untouched; a segment with no rail
    contact is returned as an identical copy.
    """
    vals = seg.values.copy()
    flags = saturated_mask(vals, config.clip)
    flags[seg.true_len :] = False
    if not flags.any():
        return Segment(vals, seg.origin_index, seg.true_len)
    P = config.backbone.patch_len
    mask = mask_from_flags(flags, P)
    level = config.clip.level
    pred = bb.forward_values(params, config.backbone, vals / level, mask)
    vals[flags] = pred[flags] * level
    return Segment(vals, seg.origin_index, seg.true_len)


def make_peak_fn(params: bb.ModelParams, config: OreConfig):
    """Adapter giving the gate a segment -> full-length prediction callable."""

    def peak_fn(seg: Segment) -> np.ndarray:
        return reconstruct(seg, params, config).values

    return peak_fn


# ---------------------------------------------------------------------------
# Checkpoint glue. The backbone geometry and clip level ride along as
# metadata so inference needs nothing beyond the file.

_KIND_ORE = 1.0


def _backbone_meta(cfg: bb.BackboneConfig) -> dict:
    return {
        "patch_len": cfg.patch_len,
        "embed_dim": cfg.embed_dim,
        "enc_layers": cfg.enc_layers,
        "dec_layers": cfg.dec_layers,
        "heads": cfg.heads,
        "mlp_ratio": cfg.mlp_ratio,
        "gd_placement": bb.GD_PLACEMENTS.index(cfg.gd_placement),
        "sigma_init": cfg.sigma_init,
        "sigma_min": cfg.sigma_min,
        "sigma_max": cfg.sigma_max,
    }


def _backbone_from_meta(meta: dict) -> bb.BackboneConfig:
    try:
        return bb.BackboneConfig(
            patch_len=int(meta["patch_len"]),
            embed_dim=int(meta["embed_dim"]),
            enc_layers=int(meta["enc_layers"]),
            dec_layers=int(meta["dec_layers"]),
            heads=int(meta["heads"]),
            mlp_ratio=int(meta["mlp_ratio"]),
            gd_placement=bb.GD_PLACEMENTS[int(meta["gd_placement"])],
            sigma_init=float(meta["sigma_init"]),
            sigma_min=float(meta["sigma_min"]),
            sigma_max=float(meta["sigma_max"]),
        )
    except (KeyError, IndexError) as exc:
        raise ConfigError(f"checkpoint metadata incomplete: {exc}") from None


def save_ore(path, params: bb.ModelParams, config: OreConfig) -> None:
    from .checkpoint import save_checkpoint

    meta = _backbone_meta(config.backbone)
    meta.update(kind=_KIND_ORE, clip_level=config.clip.level)
    save_checkpoint(path, params.to_arrays(), meta)


def load_ore(path) -> tuple[bb.ModelParams, OreConfig]:
    from .checkpoint import load_checkpoint

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != _KIND_ORE:
        raise ConfigError(f"checkpoint at {path} is not a peak-expert checkpoint")
    backbone_cfg = _backbone_from_meta(meta)
    config = OreConfig(clip=ClipSpec(meta["clip_level"]), backbone=backbone_cfg)
    params = bb.init_params(backbone_cfg, np.random.default_rng(0))
    params.load_arrays(arrays)
    return params, config
