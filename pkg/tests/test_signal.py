import math

import numpy as np
import pytest

from gyromoe.errors import ContractError, CsvFormatError, CsvParseError
from gyromoe.signal import (
    ClipSpec,
    SampleSeries,
    Segment,
    SynthConfig,
    clip,
    denormalize,
    dft,
    idft,
    load_csv,
    make_snippet_pool,
    normalize,
    psd,
    saturated_mask,
    save_csv,
    segment,
    stitch,
    synth_motion,
    synth_noise_segments,
    synth_peak_segments,
)


class TestCarriers:
    def test_series_validation(self):
        with pytest.raises(ContractError):
            SampleSeries(np.array([1.0, np.nan]), 100.0)
        with pytest.raises(ContractError):
            SampleSeries(np.array([1.0, 2.0]), 0.0)
        with pytest.raises(ContractError):
            SampleSeries(np.empty(0), 100.0)

    def test_segment_true_len_bounds(self):
        with pytest.raises(ContractError):
            Segment(np.zeros(4), 0, 5)
        with pytest.raises(ContractError):
            Segment(np.zeros(4), -1, 4)

    def test_clip_spec_positive(self):
        with pytest.raises(ContractError):
            ClipSpec(0.0)
        with pytest.raises(ContractError):
            ClipSpec(-1.0)


class TestClip:
    def test_worked_example(self):
        out = clip(np.array([-500.0, 100.0, 470.0]), ClipSpec(450.0))
        assert out.tolist() == [-450.0, 100.0, 450.0]

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 600, 500)
        spec = ClipSpec(450.0)
        once = clip(x, spec)
        assert np.array_equal(clip(once, spec), once)

    def test_in_range_unchanged(self):
        x = np.array([-449.9, 0.0, 449.9])
        assert np.array_equal(clip(x, ClipSpec(450.0)), x)

    def test_saturated_mask_tolerance(self):
        spec = ClipSpec(450.0)
        x = np.array([450.0, 450.0 * (1 - 1e-7), 449.0, -450.0])
        assert saturated_mask(x, spec).tolist() == [True, True, False, True]


class TestSegment:
    def test_len10_window4_stride4(self):
        series = SampleSeries(np.arange(10.0), 100.0)
        segs = segment(series, 4, 4)
        assert [s.origin_index for s in segs] == [0, 4, 8]
        assert [s.true_len for s in segs] == [4, 4, 2]
        assert segs[2].values.tolist() == [8.0, 9.0, 0.0, 0.0]

    def test_len3_window2_stride1(self):
        series = SampleSeries(np.arange(3.0), 10.0)
        segs = segment(series, 2, 1)
        assert [s.origin_index for s in segs] == [0, 1, 2]
        assert segs[2].true_len == 1

    def test_window_longer_than_series(self):
        series = SampleSeries(np.arange(3.0), 10.0)
        segs = segment(series, 8, 8)
        assert len(segs) == 1
        assert segs[0].true_len == 3
        assert segs[0].values.tolist() == [0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]

    def test_stride_bounds(self):
        series = SampleSeries(np.arange(10.0), 10.0)
        with pytest.raises(ContractError):
            segment(series, 4, 5)
        with pytest.raises(ContractError):
            segment(series, 4, 0)

    def test_coverage(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(5, 200))
            series = SampleSeries(rng.normal(size=n), 10.0)
            L = int(rng.integers(2, 32))
            stride = int(rng.integers(1, L + 1))
            segs = segment(series, L, stride)
            seen = np.zeros(n, dtype=bool)
            for s in segs:
                assert s.true_len >= 1
                seen[s.origin_index : s.origin_index + s.true_len] = True
                np.testing.assert_array_equal(
                    s.true_values(), series.values[s.origin_index : s.origin_index + s.true_len]
                )
                assert not s.values[s.true_len :].any()
            assert seen.all()

    def test_stitch_round_trip(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=100)
        series = SampleSeries(x, 10.0)
        segs = segment(series, 16, 16)
        np.testing.assert_array_equal(stitch(segs, 100), x)


class TestNormalize:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(3)
        seg = Segment(rng.normal(0, 300, 64), 0, 64)
        spec = ClipSpec(450.0)
        normed, state = normalize(seg, spec)
        back = denormalize(normed, state)
        assert np.max(np.abs(back.values - seg.values)) < 1e-12

    def test_rail_maps_to_one(self):
        seg = Segment(np.array([450.0, -450.0, 225.0]), 0, 3)
        normed, _ = normalize(seg, ClipSpec(450.0))
        assert normed.values.tolist() == [1.0, -1.0, 0.5]


class TestSpectra:
    def test_parseval(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.normal(size=int(rng.integers(16, 256)))
            X = dft(x)
            time_energy = float((x * x).sum())
            freq_energy = float((np.abs(X) ** 2).sum()) / x.size
            assert abs(time_energy - freq_energy) <= 1e-9 * max(time_energy, 1.0)

    def test_dft_round_trip(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=128)
        assert np.max(np.abs(idft(dft(x)) - x)) < 1e-12

    def test_psd_sinusoid_bin(self):
        fs = 100.0
        n = 1000
        t = np.arange(n) / fs
        x = np.sin(2 * math.pi * 10.0 * t)
        density = psd(SampleSeries(x, fs))
        assert abs(density.frequencies[np.argmax(density.power)] - 10.0) < 1e-9

    def test_psd_white_noise_level(self):
        # mean interior-bin density of white noise sits at 2 sigma^2 / fs
        fs, sigma, n = 100.0, 0.5, 4096
        levels = []
        for seed in range(40):
            x = np.random.default_rng(seed).normal(0, sigma, n)
            density = psd(SampleSeries(x, fs))
            levels.append(np.mean(density.power[1:-1]))
        expected = 2 * sigma**2 / fs
        assert abs(np.mean(levels) - expected) < 0.1 * expected

    def test_psd_parseval_power(self):
        # one-sided density integrates back to the mean-removed variance
        rng = np.random.default_rng(12)
        x = rng.normal(0, 2.0, 1024)
        fs = 50.0
        density = psd(SampleSeries(x, fs))
        var = float(np.var(x))
        integrated = float(density.power.sum()) * fs / x.size
        assert abs(integrated - var) < 1e-9 * var

    def test_psd_needs_two_samples(self):
        with pytest.raises(ContractError):
            psd(SampleSeries(np.array([1.0]), 10.0))


class TestCsv:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        series = SampleSeries(rng.normal(0, 450, 257), 100.0)
        path = tmp_path / "s.csv"
        save_csv(series, path)
        back = load_csv(path)
        assert back.sample_rate == pytest.approx(100.0, rel=1e-9)
        np.testing.assert_array_equal(back.values, series.values)

    def test_byte_determinism(self, tmp_path):
        series = SampleSeries(np.random.default_rng(7).normal(size=100), 200.0)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_csv(series, p1)
        save_csv(series, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_sample_rate_from_times(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("t,omega\n0,1.0\n0.01,2.0\n0.02,3.0\n")
        assert load_csv(path).sample_rate == pytest.approx(100.0)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("time,rate\n0,1\n0.1,2\n")
        with pytest.raises(CsvFormatError):
            load_csv(path)

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("t,omega\n0,1.0\n0.01,huh\n0.02,3.0\n")
        with pytest.raises(CsvParseError, match="line 3"):
            load_csv(path)

    def test_nan_row_rejected(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("t,omega\n0,1.0\n0.01,nan\n0.02,3.0\n")
        with pytest.raises(CsvParseError, match="line 3"):
            load_csv(path)

    def test_non_uniform_times(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("t,omega\n0,1\n0.01,2\n0.05,3\n0.06,4\n")
        with pytest.raises(CsvFormatError):
            load_csv(path)

    def test_decreasing_times(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("t,omega\n0,1\n0.02,2\n0.01,3\n")
        with pytest.raises(CsvFormatError):
            load_csv(path)


class TestSynth:
    def test_silence(self):
        series, _ = synth_motion(SynthConfig(duration_s=1.0, sample_rate=100.0))
        assert not series.values.any()

    def test_apex_amplitude(self):
        cfg = SynthConfig(
            duration_s=10.0,
            sample_rate=100.0,
            white_noise_sigma=2.0,
            peak_events=[(5.0, 900.0, 0.4)],
            rng_seed=11,
        )
        series, _ = synth_motion(cfg)
        peak = np.abs(series.values).max()
        assert 850.0 <= peak <= 950.0
        assert peak >= 0.94 * 900.0

    def test_determinism(self):
        cfg = SynthConfig(2.0, 100.0, white_noise_sigma=1.0, rng_seed=3)
        a, _ = synth_motion(cfg)
        b, _ = synth_motion(cfg)
        np.testing.assert_array_equal(a.values, b.values)

    def test_truth_peaks_lazy(self):
        cfg = SynthConfig(10.0, 100.0, peak_events=[(5.0, 900.0, 0.4)])
        series, truth = synth_motion(cfg)
        for level in (450.0, 600.0):
            idx = truth.over_range(ClipSpec(level))
            expected = np.nonzero(np.abs(series.values) > level)[0]
            np.testing.assert_array_equal(idx, expected)
        assert truth.over_range(ClipSpec(1200.0)).size == 0

    def test_peak_segments_reach_rail(self):
        rng = np.random.default_rng(8)
        rail = 450.0
        segs = synth_peak_segments(
            rng, 50, 256, 100.0, (1.25 * rail, 2.0 * rail), (0.15, 0.45), 4.0
        )
        assert len(segs) == 50
        n_over = sum(bool((np.abs(s) > rail).any()) for s in segs)
        assert n_over >= 45

    def test_noise_segments_shape(self):
        segs = synth_noise_segments(np.random.default_rng(9), 10, 128, 2.0)
        assert len(segs) == 10
        assert all(s.shape == (128,) for s in segs)

    def test_snippet_pool(self):
        pool = make_snippet_pool(np.random.default_rng(10), 8, (64, 192), 100.0)
        assert len(pool) == 8
        for s in pool:
            assert 64 <= s.size <= 192
            assert abs(np.abs(s).max() - 1.0) < 1e-12
