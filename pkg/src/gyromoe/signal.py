"""Sample carriers, CSV ingestion, segmentation, spectra, and synthetic motion.

Angular rate is carried in deg/s throughout; time bases are uniform. All
arrays are float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CsvFormatError, CsvParseError

CSV_HEADER = "t,omega"

# relative tolerance used when deciding a sample sits on the clip rail
CLIP_EPS = 1e-6


def _as_float_array(values, name="values"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ContractError(f"{name} must be nonempty")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name} contains non-finite entries")
    return arr


@dataclass
class SampleSeries:
    """A uniformly sampled angular-rate stream.

    Parameters
    ----------
    values : array_like
        Rate samples in deg/s, finite, at least one sample.
    sample_rate : float
        Sampling frequency in Hz, strictly positive.
    """

    values: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.values = _as_float_array(self.values)
        self.sample_rate = float(self.sample_rate)
        if not math.isfinite(self.sample_rate) or self.sample_rate <= 0.0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.values.size

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def times(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.float64) / self.sample_rate


@dataclass
class Segment:
    """A fixed-length window cut from a series.

    ``values`` always has the full window length; when the window ran past
    the end of the source series the tail is zero padding and ``true_len``
    records how many leading samples are real.
    """

    values: np.ndarray
    origin_index: int
    true_len: int

    def __post_init__(self):
        self.values = _as_float_array(self.values, "segment values")
        if not 1 <= self.true_len <= self.values.size:
            raise ContractError(
                f"true_len {self.true_len} outside [1, {self.values.size}]"
            )
        if self.origin_index < 0:
            raise ContractError(f"origin_index must be >= 0, got {self.origin_index}")

    def true_values(self) -> np.ndarray:
        return self.values[: self.true_len]


@dataclass(frozen=True)
class ClipSpec:
    """Symmetric saturation rail: representable range is [-level, +level]."""

    level: float

    def __post_init__(self):
        if not math.isfinite(self.level) or self.level <= 0.0:
            raise ContractError(f"clip level must be positive, got {self.level}")

    def rail_threshold(self, eps: float = CLIP_EPS) -> float:
        """Magnitude at or above which a sample counts as saturated."""
        return self.level * (1.0 - eps)


@dataclass(frozen=True)
class NormState:
    """Scale captured by ``normalize`` so outputs can be mapped back."""

    level: float


@dataclass
class SpectralDensity:
    """One-sided power spectral density with its frequency grid."""

    frequencies: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        self.power = np.asarray(self.power, dtype=np.float64)
        if self.frequencies.shape != self.power.shape:
            raise ContractError(
                f"frequency grid {self.frequencies.shape} does not match power {self.power.shape}"
            )
        if (self.power < 0.0).any():
            raise ContractError("spectral power must be nonnegative")


def clip(values: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Saturate ``values`` into [-level, +level]."""
    arr = _as_float_array(values)
    return np.clip(arr, -spec.level, spec.level)


def saturated_mask(values: np.ndarray, spec: ClipSpec, eps: float = CLIP_EPS) -> np.ndarray:
    """Boolean mask of samples sitting on (or numerically at) the rail."""
    arr = np.asarray(values, dtype=np.float64)
    return np.abs(arr) >= spec.rail_threshold(eps)


def segment(series: SampleSeries, seg_len: int, stride: int) -> list[Segment]:
    """Cut ``series`` into fixed-length windows.

    Window origins advance by ``stride``; a window running past the end is
    zero padded and its ``true_len`` records the real sample count. A series
    shorter than ``seg_len`` yields a single padded segment.
    """
    n = len(series)
    if seg_len < 1:
        raise ContractError(f"segment length must be >= 1, got {seg_len}")
    if not 1 <= stride <= seg_len:
        raise ContractError(f"stride {stride} outside [1, {seg_len}]")
    out = []
    for origin in range(0, n, stride):
        avail = n - origin
        true_len = min(avail, seg_len)
        vals = np.zeros(seg_len, dtype=np.float64)
        vals[:true_len] = series.values[origin : origin + true_len]
        out.append(Segment(vals, origin, true_len))
    return out


def stitch(segments: list[Segment], total_len: int) -> np.ndarray:
    """Reassemble non-overlapping segments back into a flat array."""
    out = np.zeros(total_len, dtype=np.float64)
    for seg in segments:
        stop = seg.origin_index + seg.true_len
        if stop > total_len:
            raise ContractError(
                f"segment [{seg.origin_index}, {stop}) exceeds series length {total_len}"
            )
        out[seg.origin_index : stop] = seg.true_values()
    return out


def normalize(seg: Segment, spec: ClipSpec) -> tuple[Segment, NormState]:
    """Scale a segment by the clip level so the rail maps to magnitude 1."""
    state = NormState(spec.level)
    return Segment(seg.values / spec.level, seg.origin_index, seg.true_len), state


def denormalize(seg: Segment, state: NormState) -> Segment:
    """Invert ``normalize``."""
    return Segment(seg.values * state.level, seg.origin_index, seg.true_len)


def dft(values: np.ndarray) -> np.ndarray:
    """Two-sided discrete Fourier transform (numpy convention)."""
    return np.fft.fft(np.asarray(values, dtype=np.float64))


def idft(coeffs: np.ndarray, n: int | None = None) -> np.ndarray:
    """Inverse of :func:`dft`, returning the real part."""
    return np.fft.ifft(coeffs, n=n).real


def psd(series: SampleSeries) -> SpectralDensity:
    """One-sided periodogram density of the mean-removed series.

    White noise of variance sigma^2 has an expected interior-bin level of
    2*sigma^2/fs. Length must be at least 2.
    """
    x = series.values
    n = x.size
    if n < 2:
        raise ContractError("psd needs at least 2 samples")
    fs = series.sample_rate
    spec = np.fft.rfft(x - x.mean())
    power = (spec.real**2 + spec.imag**2) / (fs * n)
    power[1:] *= 2.0
    if n % 2 == 0:
        power[-1] /= 2.0  # Nyquist bin is not doubled
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    return SpectralDensity(freqs, power)


# ---------------------------------------------------------------------------
# CSV interface: header "t,omega", UTF-8, LF line endings.


def save_csv(series: SampleSeries, path) -> None:
    """Write a series as ``t,omega`` rows.

    Floats are rendered with shortest round-trip precision, so save/load
    reproduces values exactly and identical series produce identical bytes.
    """
    times = series.times()
    lines = [CSV_HEADER]
    for t, v in zip(times, series.values):
        lines.append(f"{float(t)!r},{float(v)!r}")
    data = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(data)


def load_csv(path) -> SampleSeries:
    """Read a ``t,omega`` CSV back into a series.

    Raises
    ------
    CsvFormatError
        Wrong header, fewer than 2 rows, or a non-uniform/non-increasing
        time column (relative jitter above 1e-6).
    CsvParseError
        A row that does not parse as two floats; the message names the
        1-based line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    if not raw_lines or raw_lines[0].strip() != CSV_HEADER:
        got = raw_lines[0].strip() if raw_lines else "<empty file>"
        raise CsvFormatError(f"expected header '{CSV_HEADER}', got '{got}'")
    times = []
    values = []
    for lineno, line in enumerate(raw_lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise CsvParseError(f"line {lineno}: expected 2 fields, got {len(parts)}")
        try:
            t = float(parts[0])
            v = float(parts[1])
        except ValueError:
            raise CsvParseError(f"line {lineno}: could not parse '{line}'") from None
        if not (math.isfinite(t) and math.isfinite(v)):
            raise CsvParseError(f"line {lineno}: non-finite entry '{line}'")
        times.append(t)
        values.append(v)
    if len(times) < 2:
        raise CsvFormatError(f"need at least 2 data rows, got {len(times)}")
    t_arr = np.asarray(times)
    dt = np.diff(t_arr)
    if (dt <= 0).any():
        bad = int(np.nonzero(dt <= 0)[0][0]) + 3  # +2 header/first row, +1 diff offset
        raise CsvFormatError(f"time column not strictly increasing at line {bad}")
    med = float(np.median(dt))
    if np.abs(dt - med).max() > 1e-6 * med:
        raise CsvFormatError("time column is not uniformly spaced")
    return SampleSeries(np.asarray(values), 1.0 / med)


# ---------------------------------------------------------------------------
# Synthetic motion generator.


@dataclass
class SynthConfig:
    """Recipe for one synthetic rate stream.

    ``peak_events`` is a list of (center_time_s, amplitude_dps, width_s)
    triples. Each event is a Gaussian-windowed sinusoid whose center is
    snapped to the sample grid, so the apex attains the full amplitude.
    """

    duration_s: float
    sample_rate: float
    white_noise_sigma: float = 0.0
    drift_rate: float = 0.0
    peak_events: list[tuple[float, float, float]] = field(default_factory=list)
    rng_seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0.0:
            raise ContractError(f"duration_s must be positive, got {self.duration_s}")
        if self.sample_rate <= 0.0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.white_noise_sigma < 0.0:
            raise ContractError("white_noise_sigma must be >= 0")
        for ev in self.peak_events:
            if len(ev) != 3:
                raise ContractError(f"peak event must be a 3-tuple, got {ev!r}")
            if ev[2] <= 0.0:
                raise ContractError(f"peak width must be positive, got {ev[2]}")


class TruthPeaks:
    """Lazy over-range index lookup against the clean (unclipped) signal."""

    def __init__(self, clean: np.ndarray):
        self.clean = np.asarray(clean, dtype=np.float64)

    def over_range(self, spec: ClipSpec) -> np.ndarray:
        """Indices where the clean signal strictly exceeds the rail."""
        return np.nonzero(np.abs(self.clean) > spec.level)[0]


def _burst(n: int, fs: float, center_s: float, amp: float, width_s: float) -> np.ndarray:
    # center snapped to the grid so one sample sits exactly at the apex
    c = round(center_s * fs)
    rel = (np.arange(n) - c) / fs
    envelope = np.exp(-(rel**2) / (2.0 * width_s**2))
    carrier = np.cos(2.0 * math.pi * rel / (8.0 * width_s))
    return amp * envelope * carrier


def synth_motion(config: SynthConfig) -> tuple[SampleSeries, TruthPeaks]:
    """Generate drift + burst + white-noise motion.

    Returns the clean (unclipped) series and a :class:`TruthPeaks` handle
    for querying over-range sample indices at any clip level.
    """
    fs = config.sample_rate
    n = int(round(config.duration_s * fs))
    if n < 1:
        raise ContractError("configured duration yields an empty series")
    t = np.arange(n, dtype=np.float64) / fs
    v = config.drift_rate * t
    for center_s, amp, width_s in config.peak_events:
        v = v + _burst(n, fs, center_s, amp, width_s)
    if config.white_noise_sigma > 0.0:
        rng = np.random.default_rng(config.rng_seed)
        v = v + rng.normal(0.0, config.white_noise_sigma, n)
    return SampleSeries(v, fs), TruthPeaks(v)


# ---------------------------------------------------------------------------
# Desk-scale dataset builders reused by the CLI and the test benches.


def synth_peak_segments(
    rng: np.random.Generator,
    n_segments: int,
    seg_len: int,
    sample_rate: float,
    amp_range: tuple[float, float],
    width_range: tuple[float, float],
    noise_sigma: float,
) -> list[np.ndarray]:
    """Clean fixed-length windows, each holding one centered-ish burst.

    Amplitude sign is random; the burst apex lands on the grid. Used as the
    self-supervision corpus for peak reconstruction training.
    """
    if n_segments < 1:
        raise ContractError("need at least one segment")
    fs = sample_rate
    out = []
    for _ in range(n_segments):
        amp = rng.uniform(*amp_range) * (1.0 if rng.random() < 0.5 else -1.0)
        width = rng.uniform(*width_range)
        center = rng.uniform(0.35, 0.65) * seg_len / fs
        vals = _burst(seg_len, fs, center, amp, width)
        if noise_sigma > 0.0:
            vals = vals + rng.normal(0.0, noise_sigma, seg_len)
        out.append(vals)
    return out


def synth_noise_segments(
    rng: np.random.Generator,
    n_segments: int,
    seg_len: int,
    sigma: float,
) -> list[np.ndarray]:
    """Static white-noise windows with mild per-segment sigma jitter."""
    if n_segments < 1:
        raise ContractError("need at least one segment")
    out = []
    for _ in range(n_segments):
        s = sigma * rng.uniform(0.7, 1.3)
        out.append(rng.normal(0.0, s, seg_len))
    return out


def make_snippet_pool(
    rng: np.random.Generator,
    n_snippets: int,
    len_range: tuple[int, int],
    sample_rate: float,
) -> list[np.ndarray]:
    """Smooth low-frequency motion snippets, Hann tapered, peak-normalized."""
    if n_snippets < 1:
        raise ContractError("need at least one snippet")
    lo, hi = len_range
    if not 4 <= lo <= hi:
        raise ContractError(f"snippet length range [{lo}, {hi}] is invalid")
    pool = []
    for _ in range(n_snippets):
        length = int(rng.integers(lo, hi + 1))
        t = np.arange(length) / sample_rate
        s = np.zeros(length)
        for _ in range(int(rng.integers(2, 4))):
            f = rng.uniform(0.5, 3.0)
            a = rng.uniform(0.3, 1.0)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            s += a * np.sin(2.0 * math.pi * f * t + phase)
        s *= np.hanning(length)
        peak = np.abs(s).max()
        if peak <= 0.0:
            s[length // 2] = 1.0
            peak = 1.0
        pool.append(s / peak)
    return pool
