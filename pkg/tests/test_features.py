import numpy as np
import pytest

from lctid import dsp, features, pitch
from lctid.corpus import Waveform
from lctid.features import (FeatureMatrix, apply_norm, energy, extract_matrix,
                            fit_norm, hnr, jitter, jitter_derivative,
                            mel_filterbank, mfcc, resolve_featureset,
                            sharpness, shimmer, spectral_centroid,
                            spectral_flux, write_feature_csv, zcr)
from lctid.pitch import PeriodSequence
from conftest import SR, harmonic_tone


def periods(values_s, amps=None):
    vals = np.asarray(values_s, dtype=np.float64)
    if amps is None:
        amps = np.ones_like(vals)
    return PeriodSequence(periods_s=vals, peak_amps=np.asarray(amps, float))


def random_spectrum(rng, fft_size=512):
    mags = rng.uniform(0.0, 1.0, fft_size // 2)
    return dsp.Spectrum(magnitudes=mags, bin_hz=SR / fft_size, fft_size=fft_size)


class TestEnergy:
    def test_zeros(self):
        assert energy(np.zeros(10)) == 0.0

    def test_quarter(self):
        assert energy(np.full(4, 0.5)) == 1.0

    def test_direct_sum_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = rng.standard_normal(320)
            direct = sum(float(v) * float(v) for v in x)
            assert energy(x) == pytest.approx(direct, rel=1e-12)

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(100)
        assert energy(3.0 * x) == pytest.approx(9.0 * energy(x), rel=1e-12)


def zcr_count_oracle(x):
    """Literal per-sample transcription of the crossing rule."""
    count = 0
    for n in range(1, len(x)):
        if x[n] != 0.0:
            if x[n - 1] * x[n] < 0.0:
                count += 1
        elif n + 1 < len(x):
            if x[n - 1] * x[n + 1] < 0.0:
                count += 1
    return count


class TestZcr:
    def test_constant_positive(self):
        assert zcr(np.ones(320), SR) == 0.0

    def test_alternating(self):
        x = np.tile([1.0, -1.0], 160)
        assert zcr(x, SR) == 319 / 0.02

    def test_100hz_sine(self):
        # phase offset puts all four ideal crossings (2 per cycle x 2 cycles)
        # strictly inside the 20 ms frame
        t = np.arange(320) / SR
        x = np.sin(2 * np.pi * 100.0 * t + np.pi / 4)
        assert zcr(x, SR) == 200.0

    def test_zero_sample_rule(self):
        assert zcr_count_oracle([1.0, 0.0, -1.0]) == 1
        assert zcr(np.array([1.0, 0.0, -1.0]), SR) == 1 / (3 / SR)
        assert zcr(np.array([1.0, 0.0, 1.0]), SR) == 0.0

    def test_matches_oracle_on_random_frames(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = rng.standard_normal(320)
            assert zcr(x, SR) == zcr_count_oracle(x) / 0.02


class TestJitterFamily:
    def test_jitter_constant(self):
        assert jitter(periods([0.01, 0.01, 0.01, 0.01])) == 0.0

    def test_jitter_hand_value(self):
        p = [0.010, 0.010, 0.012, 0.012]
        diffs = [abs(p[i + 1] - p[i]) for i in range(3)]
        expected = (sum(diffs) / 3) / (sum(p) / 4)
        assert jitter(periods(p)) == expected
        assert jitter(periods(p)) == pytest.approx(0.060606060, rel=1e-6)

    def test_jitter_scale_invariant(self):
        p = [0.010, 0.011, 0.0105, 0.012]
        assert jitter(periods([2 * v for v in p])) == jitter(periods(p))

    def test_jitter_too_few(self):
        with pytest.raises(pitch.TooFewPeriodsError):
            jitter(periods([0.01, 0.01]))

    def test_derivative_hand_value(self):
        p = [0.010, 0.010, 0.012, 0.012]
        first = [abs(p[i + 1] - p[i]) for i in range(3)]
        second = [abs(first[i + 1] - first[i]) for i in range(2)]
        expected = (sum(second) / 2) / (sum(p) / 4)
        assert jitter_derivative(periods(p)) == expected
        assert jitter_derivative(periods(p)) == pytest.approx(0.1818181818, rel=1e-6)

    def test_derivative_linear_drift_zero(self):
        assert jitter_derivative(periods([0.010, 0.011, 0.012, 0.013])) == \
            pytest.approx(0.0, abs=1e-12)

    def test_derivative_constant_zero(self):
        assert jitter_derivative(periods([0.01] * 5)) == 0.0

    def test_derivative_too_few(self):
        with pytest.raises(pitch.TooFewPeriodsError):
            jitter_derivative(periods([0.01, 0.01, 0.012]))

    def test_shimmer_constant(self):
        assert shimmer(periods([0.01] * 4, [1.0] * 4)) == 0.0

    def test_shimmer_hand_value(self):
        amps = [1.0, 1.0, 0.8, 0.8]
        diffs = [abs(amps[i + 1] - amps[i]) for i in range(3)]
        expected = (sum(diffs) / 3) / (sum(amps) / 4)
        got = shimmer(periods([0.01] * 4, amps))
        assert got == expected
        assert got == pytest.approx(0.0740740740, rel=1e-6)

    def test_shimmer_scale_invariant(self):
        amps = [1.0, 0.9, 1.1, 0.8]
        a = shimmer(periods([0.01] * 4, amps))
        b = shimmer(periods([0.01] * 4, [2 * v for v in amps]))
        assert a == b


class TestHnr:
    def test_pure_tone_clamps_high(self):
        t = np.arange(960) / SR
        x = np.sin(2 * np.pi * 200.0 * t)
        assert hnr(x, 200.0, SR) >= 3.0

    def test_equal_energy_mix_near_zero(self):
        vals = []
        for s in range(50):
            rng = np.random.default_rng(100 + s)
            t = np.arange(960) / SR
            tone = np.sin(2 * np.pi * 200.0 * t + rng.uniform(0, 2 * np.pi))
            noise = rng.standard_normal(960)
            noise *= np.sqrt(np.dot(tone, tone) / np.dot(noise, noise))
            vals.append(hnr(tone + noise, 200.0, SR))
        assert abs(np.mean(vals)) <= 0.15

    def test_unvoiced_errors(self):
        with pytest.raises(pitch.UnvoicedFrameError):
            hnr(np.ones(320), 0.0, SR)

    def test_noise_clamps_low(self):
        rng = np.random.default_rng(7)
        assert hnr(rng.standard_normal(960), 200.0, SR) <= 1.0


class TestSpectralFeatures:
    def test_centroid_single_bin(self):
        mags = np.zeros(256)
        mags[39] = 2.0  # bin 40
        spec = dsp.Spectrum(mags, SR / 512, 512)
        assert spectral_centroid(spec) == pytest.approx(40 * SR / 512)

    def test_centroid_two_equal_bins(self):
        mags = np.zeros(256)
        mags[9] = 1.0
        mags[49] = 1.0
        spec = dsp.Spectrum(mags, SR / 512, 512)
        f1, f2 = 10 * SR / 512, 50 * SR / 512
        assert spectral_centroid(spec) == pytest.approx((f1 + f2) / 2)

    def test_centroid_zero_spectrum(self):
        assert spectral_centroid(dsp.Spectrum(np.zeros(256), SR / 512, 512)) == 0.0

    def test_centroid_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            spec = random_spectrum(rng)
            num = sum(float((k + 1) * spec.bin_hz) * float(m)
                      for k, m in enumerate(spec.magnitudes))
            den = sum(float(m) for m in spec.magnitudes)
            assert spectral_centroid(spec) == pytest.approx(num / den, rel=1e-9)

    def test_sharpness_single_bin(self):
        mags = np.zeros(256)
        mags[99] = 1.0
        spec = dsp.Spectrum(mags, SR / 512, 512)
        assert sharpness(spec) == pytest.approx(dsp.hz_to_bark(100 * SR / 512))

    def test_sharpness_scale_invariant(self):
        rng = np.random.default_rng(4)
        spec = random_spectrum(rng)
        doubled = dsp.Spectrum(2.0 * spec.magnitudes, spec.bin_hz, spec.fft_size)
        assert sharpness(doubled) == pytest.approx(sharpness(spec), rel=1e-12)

    def test_sharpness_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            spec = random_spectrum(rng)
            num = sum(dsp.hz_to_bark(float((k + 1) * spec.bin_hz)) * float(m)
                      for k, m in enumerate(spec.magnitudes))
            den = sum(float(m) for m in spec.magnitudes)
            assert sharpness(spec) == pytest.approx(num / den, rel=1e-9)

    def test_flux_identical(self):
        rng = np.random.default_rng(6)
        spec = random_spectrum(rng)
        assert spectral_flux(spec, spec) == 0.0

    def test_flux_disjoint_unit(self):
        a = np.zeros(256)
        b = np.zeros(256)
        a[10] = 3.0
        b[200] = 0.5
        sa = dsp.Spectrum(a, SR / 512, 512)
        sb = dsp.Spectrum(b, SR / 512, 512)
        assert spectral_flux(sa, sb) == pytest.approx(2.0)

    def test_flux_scale_invariant(self):
        rng = np.random.default_rng(7)
        spec = random_spectrum(rng)
        doubled = dsp.Spectrum(2.0 * spec.magnitudes, spec.bin_hz, spec.fft_size)
        assert spectral_flux(spec, doubled) == 0.0

    def test_flux_zero_spectrum(self):
        rng = np.random.default_rng(8)
        spec = random_spectrum(rng)
        zero = dsp.Spectrum(np.zeros(256), SR / 512, 512)
        assert spectral_flux(spec, zero) == 0.0

    def test_flux_range_and_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            sa = random_spectrum(rng)
            sb = random_spectrum(rng)
            na = np.sqrt(sum(float(v) ** 2 for v in sa.magnitudes))
            nb = np.sqrt(sum(float(v) ** 2 for v in sb.magnitudes))
            direct = sum((float(x) / na - float(y) / nb) ** 2
                         for x, y in zip(sa.magnitudes, sb.magnitudes))
            got = spectral_flux(sa, sb)
            assert got == pytest.approx(direct, rel=1e-9)
            assert 0.0 <= got <= 4.0


class TestMfcc:
    def test_zero_frame_floor_vector(self):
        c = mfcc(np.zeros(320), SR)
        expected_c0 = 26 * np.log(1e-10) * np.sqrt(1.0 / 26)
        assert c.shape == (13,)
        assert c[0] == pytest.approx(expected_c0, rel=1e-12)
        assert np.abs(c[1:]).max() < 1e-10

    def test_noise_vs_tone_distance(self):
        rng = np.random.default_rng(3)
        t = np.arange(320) / SR
        noise_mean = np.mean([mfcc(0.1 * rng.standard_normal(320), SR)
                              for _ in range(40)], axis=0)
        tone_mean = np.mean([mfcc(0.5 * np.sin(2 * np.pi * 300 * t
                                               + rng.uniform(0, 2 * np.pi)), SR)
                             for _ in range(40)], axis=0)
        assert np.linalg.norm(noise_mean - tone_mean) > 1.0

    def test_filterbank_partition(self):
        bank = mel_filterbank(512, SR)
        colsum = bank.sum(axis=0)
        pts = np.linspace(features._hz_to_mel(0.0), features._hz_to_mel(SR / 2), 28)
        lo_c = 700 * (10 ** (pts[1] / 2595) - 1)
        hi_c = 700 * (10 ** (pts[26] / 2595) - 1)
        freqs = np.arange(1, 257) * (SR / 512)
        inner = (freqs >= lo_c) & (freqs <= hi_c)
        assert inner.sum() > 200
        assert np.abs(colsum[inner] - 1.0).max() < 1e-9


class TestResolveFeatureset:
    def test_named_sets(self):
        assert resolve_featureset("handcrafted") == features.HANDCRAFTED_IDS
        assert resolve_featureset("mfcc") == features.MFCC_IDS
        assert len(resolve_featureset("all")) == 23

    def test_explicit_order_is_canonical(self):
        assert resolve_featureset(["HNR", "F0", "ENERGY"]) == ("F0", "ENERGY", "HNR")
        assert resolve_featureset("energy,hnr,f0") == ("F0", "ENERGY", "HNR")

    def test_unknown_id(self):
        with pytest.raises(ValueError, match="unknown feature ids"):
            resolve_featureset(["FOO"])


class TestExtractMatrix:
    def test_one_second_handcrafted_geometry(self):
        rng = np.random.default_rng(0)
        w = Waveform(0.1 * rng.standard_normal(SR), SR)
        m = extract_matrix(w, "handcrafted")
        assert m.values.shape == (10, 95)
        assert m.channel_ids == features.HANDCRAFTED_IDS

    def test_all_is_23_channels(self):
        rng = np.random.default_rng(1)
        w = Waveform(0.1 * rng.standard_normal(SR // 2), SR)
        m = extract_matrix(w, "all")
        assert m.values.shape[0] == 23

    def test_silence_rows_zero(self):
        w = Waveform(np.zeros(SR), SR)
        m = extract_matrix(w, "handcrafted")
        for ch in ("F0", "VPROB", "JITTER", "DJITTER", "SHIMMER", "HNR", "ENERGY"):
            assert np.all(m.channels([ch]).values == 0.0), ch

    def test_voiced_tone_has_pitch_and_quality(self):
        x = np.tile(harmonic_tone(250.0, 5, n=960, seed=3), 20)
        m = extract_matrix(Waveform(0.2 * x / np.abs(x).max(), SR), "handcrafted")
        f0 = m.channels(["F0"]).values[0]
        assert (f0 > 0).mean() > 0.9
        assert np.median(f0[f0 > 0]) == pytest.approx(250.0, abs=5.0)
        assert m.channels(["HNR"]).values[0].max() > 1.0

    def test_too_short_errors(self):
        with pytest.raises(ValueError, match="too short"):
            extract_matrix(Waveform(np.zeros(800), SR), "handcrafted")

    def test_mfcc_only_skips_pitch(self):
        rng = np.random.default_rng(2)
        w = Waveform(0.1 * rng.standard_normal(SR // 4), SR)
        m = extract_matrix(w, "mfcc")
        assert m.values.shape == (13, 19)  # floor((4000-320)/160)+1

    def test_subset_channels(self):
        rng = np.random.default_rng(3)
        w = Waveform(0.1 * rng.standard_normal(SR // 2), SR)
        m = extract_matrix(w, ["ZCR", "ENERGY"])
        assert m.channel_ids == ("ENERGY", "ZCR")
        full = extract_matrix(w, "handcrafted")
        assert np.array_equal(m.channels(["ZCR"]).values,
                              full.channels(["ZCR"]).values)


class TestNorm:
    def _matrices(self, rng, n=4):
        return [FeatureMatrix(values=rng.normal(3.0, 2.5, (5, 50)),
                              channel_ids=("A", "B", "C", "D", "E"))
                for _ in range(n)]

    def test_train_set_is_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        mats = self._matrices(rng)
        stats = fit_norm(mats)
        normed = np.concatenate([apply_norm(m, stats).values for m in mats], axis=1)
        assert np.abs(normed.mean(axis=1)).max() <= 1e-6
        assert np.abs(normed.std(axis=1) - 1.0).max() <= 1e-3

    def test_constant_channel_floored(self):
        vals = np.vstack([np.full(40, 7.5), np.arange(40, dtype=float)])
        m = FeatureMatrix(values=vals, channel_ids=("K", "R"))
        stats = fit_norm([m])
        assert np.all(stats.std > 0)
        out = apply_norm(m, stats).values
        assert np.allclose(out[0], 0.0, atol=1e-6)

    def test_applies_to_unseen_data(self):
        rng = np.random.default_rng(1)
        stats = fit_norm(self._matrices(rng))
        test = self._matrices(rng, n=1)[0]
        assert np.all(np.isfinite(apply_norm(test, stats).values))

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="empty"):
            fit_norm([])

    def test_channel_mismatch(self):
        rng = np.random.default_rng(2)
        stats = fit_norm(self._matrices(rng))
        other = FeatureMatrix(values=np.zeros((2, 10)), channel_ids=("X", "Y"))
        with pytest.raises(ValueError, match="channel ids"):
            apply_norm(other, stats)


def test_feature_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = FeatureMatrix(values=rng.standard_normal((3, 7)),
                      channel_ids=("F0", "ENERGY", "ZCR"))
    path = tmp_path / "f.csv"
    write_feature_csv(m, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "F0,ENERGY,ZCR"
    assert len(lines) == 8
    back = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert np.array_equal(back.T, m.values)
