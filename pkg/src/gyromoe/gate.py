"""Segment gate: route windows to the range or noise expert and splice.

Routing is rule-based per fixed-length segment. The peak route fires when
at least ``peak_run`` consecutive samples sit on the clip rail; the noise
route fires when some run of ``quiet_run`` consecutive samples stays below
the quiet threshold. Splicing walks the segment left to right: a saturated
sample takes the peak expert's value and advances by one; a fully quiet
window of ``quiet_run`` samples takes the noise expert's values as a block
and advances by the block length; everything else passes through.

The implementation batches that walk (vectorized rail replacement plus
run-length block placement) but is sample-for-sample identical to the
scalar procedure above.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .signal import CLIP_EPS, ClipSpec, SampleSeries, Segment, saturated_mask, segment, stitch

log = logging.getLogger("gyromoe.gate")


@dataclass
class GateConfig:
    clip: ClipSpec
    segment_len: int = 256
    peak_run: int = 3
    quiet_run: int = 32
    quiet_threshold: float | None = None  # None -> 0.1 * clip level
    clip_eps: float = CLIP_EPS

    def __post_init__(self):
        if self.segment_len < 1:
            raise ConfigError(f"segment_len must be >= 1, got {self.segment_len}")
        if self.peak_run < 1:
            raise ConfigError(f"peak_run must be >= 1, got {self.peak_run}")
        if self.quiet_run < 1:
            raise ConfigError(f"quiet_run must be >= 1, got {self.quiet_run}")
        if self.quiet_threshold is not None and self.quiet_threshold <= 0.0:
            raise ConfigError(
                f"quiet_threshold must be positive, got {self.quiet_threshold}"
            )
        if not 0.0 <= self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must lie in [0, 1), got {self.clip_eps}")

    @property
    def quiet_tau(self) -> float:
        if self.quiet_threshold is not None:
            return self.quiet_threshold
        return 0.1 * self.clip.level


@dataclass
class RouteDecision:
    peak: bool
    noise: bool
    clipped_ranges: list = field(default_factory=list)
    quiet_ranges: list = field(default_factory=list)


def _runs(mask: np.ndarray) -> list:
    """Maximal True runs as half-open (start, stop) pairs."""
    if mask.size == 0:
        return []
    padded = np.concatenate(([False], mask, [False]))
    edges = np.diff(padded.astype(np.int8))
    starts = np.nonzero(edges == 1)[0]
    stops = np.nonzero(edges == -1)[0]
    return list(zip(starts.tolist(), stops.tolist()))


def route(values: np.ndarray, config: GateConfig) -> RouteDecision:
    """Routing flags and the runs that produced them, for one window."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("route needs a nonempty 1-D window")
    sat = saturated_mask(x, config.clip, config.clip_eps)
    quiet = np.abs(x) < config.quiet_tau
    clipped_ranges = _runs(sat)
    peak = any(e - s >= config.peak_run for s, e in clipped_ranges)
    quiet_ranges = [(s, e) for s, e in _runs(quiet) if e - s >= config.quiet_run]
    return RouteDecision(peak, bool(quiet_ranges), clipped_ranges, quiet_ranges)


def _quiet_blocks(quiet: np.ndarray, sat: np.ndarray | None, q: int) -> np.ndarray:
    """Samples consumed as noise-expert blocks by the left-to-right walk.

    ``sat`` is the rail mask when the peak route fired (rail samples take
    single steps in the walk and so can shift block starts), or None.
    """
    covered = np.zeros(quiet.size, dtype=bool)
    for s, e in _runs(quiet):
        if e - s < q:
            continue
        if sat is None or not sat[s:e].any():
            k = (e - s) // q
            covered[s : s + k * q] = True
        else:
            t = s
            while t < e:
                if sat[t]:
                    t += 1
                elif t + q <= e:
                    covered[t : t + q] = True
                    t += q
                else:
                    t += 1
    return covered


def _splice(
    x: np.ndarray,
    decision: RouteDecision,
    config: GateConfig,
    p_hat: np.ndarray | None,
    n_hat: np.ndarray | None,
) -> np.ndarray:
    y = x.copy()
    sat = saturated_mask(x, config.clip, config.clip_eps)
    if decision.noise:
        quiet = np.abs(x) < config.quiet_tau
        covered = _quiet_blocks(quiet, sat if decision.peak else None, config.quiet_run)
        y[covered] = n_hat[: x.size][covered]
    else:
        covered = np.zeros(x.size, dtype=bool)
    if decision.peak:
        repl = sat & ~covered
        y[repl] = p_hat[: x.size][repl]
    return y


def _expert_output(fn, seg: Segment, name: str) -> np.ndarray:
    out = np.asarray(fn(seg), dtype=np.float64)
    if out.shape != seg.values.shape:
        raise ContractError(
            f"{name} expert returned shape {out.shape}, expected {seg.values.shape}"
        )
    return out


def enhance(
    series: SampleSeries,
    config: GateConfig,
    peak_fn=None,
    noise_fn=None,
) -> SampleSeries:
    """Route every window of ``series`` and splice expert outputs in.

    ``peak_fn`` / ``noise_fn`` map a Segment to a full-length prediction
    array. An expert is only consulted on windows where its route fires;
    if a route fires and its expert is missing, that is a configuration
    error. Windows where nothing fires pass through untouched.
    """
    segs = segment(series, config.segment_len, config.segment_len)
    out_segs = []
    n_peak = n_noise = 0
    for seg in segs:
        x = seg.true_values()
        decision = route(x, config)
        if decision.peak and peak_fn is None:
            raise ConfigError(
                f"peak route fired on segment at {seg.origin_index} but no peak expert is loaded"
            )
        if decision.noise and noise_fn is None:
            raise ConfigError(
                f"noise route fired on segment at {seg.origin_index} but no noise expert is loaded"
            )
        p_hat = _expert_output(peak_fn, seg, "peak") if decision.peak else None
        n_hat = _expert_output(noise_fn, seg, "noise") if decision.noise else None
        y = _splice(x, decision, config, p_hat, n_hat)
        n_peak += int(decision.peak)
        n_noise += int(decision.noise)
        padded = np.zeros_like(seg.values)
        padded[: seg.true_len] = y
        out_segs.append(Segment(padded, seg.origin_index, seg.true_len))
    log.info(
        "enhance: %d segments, %d peak-routed, %d noise-routed", len(segs), n_peak, n_noise
    )
    return SampleSeries(stitch(out_segs, len(series)), series.sample_rate)
