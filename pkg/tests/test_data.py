import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artinv import data as D
from artinv.errors import (ConstantChannel, EmptyAudio, ManifestError,
                           UnknownSpeaker, WindowTooLarge)


def _rec(values):
    return D.EmaRecording(np.asarray(values, dtype=np.float64))


def _rand_rec(rng, T=50, lo=-10.0, hi=10.0):
    return _rec(rng.uniform(lo, hi, (D.N_CHANNELS, T)))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

class TestNormalizer:
    def test_single_recording_min_max(self):
        values = np.ones((18, 3))
        values[0] = [1.0, 3.0, 2.0]
        values[1:] += np.arange(3)  # keep other channels non-constant
        stats = D.fit_normalizer([_rec(values)])
        assert stats.per_channel_min[0] == 1.0
        assert stats.per_channel_max[0] == 3.0

    def test_union_range_over_recordings(self):
        a = np.tile(np.linspace(0.0, 2.0, 4), (18, 1))
        b = np.tile(np.linspace(1.0, 5.0, 4), (18, 1))
        stats = D.fit_normalizer([_rec(a), _rec(b)])
        assert np.all(stats.per_channel_min == 0.0)
        assert np.all(stats.per_channel_max == 5.0)

    def test_constant_channel_rejected(self):
        values = np.tile(np.linspace(0.0, 1.0, 3), (18, 1))
        values[4] = 2.0
        with pytest.raises(ConstantChannel):
            D.fit_normalizer([_rec(values)])

    def test_endpoints_and_midpoint(self):
        rng = np.random.default_rng(0)
        rec = _rand_rec(rng)
        stats = D.fit_normalizer([rec])
        lo, hi = stats.per_channel_min, stats.per_channel_max
        norm_lo = D.normalize(_rec(np.tile(lo[:, None], (1, 2))), stats)
        norm_hi = D.normalize(_rec(np.tile(hi[:, None], (1, 2))), stats)
        norm_mid = D.normalize(_rec(np.tile(((lo + hi) / 2)[:, None], (1, 2))), stats)
        assert np.allclose(norm_lo.values, 0.0)
        assert np.allclose(norm_hi.values, 1.0)
        assert np.allclose(norm_mid.values, 0.5)

    def test_out_of_range_clipped(self):
        rng = np.random.default_rng(1)
        rec = _rand_rec(rng)
        stats = D.fit_normalizer([rec])
        over = _rec(np.tile((stats.per_channel_max + 1.0)[:, None], (1, 3)))
        assert np.all(D.normalize(over, stats).values == 1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        rec = _rand_rec(rng, T=200)
        stats = D.fit_normalizer([rec])
        back = D.denormalize(D.normalize(rec, stats), stats)
        assert np.max(np.abs(back.values - rec.values)) < 1e-6

    def test_denormalize_endpoints(self):
        rng = np.random.default_rng(3)
        stats = D.fit_normalizer([_rand_rec(rng)])
        zeros = _rec(np.zeros((18, 2)))
        ones = _rec(np.ones((18, 2)))
        halves = _rec(np.full((18, 2), 0.5))
        assert np.allclose(D.denormalize(zeros, stats).values,
                           stats.per_channel_min[:, None])
        assert np.allclose(D.denormalize(ones, stats).values,
                           stats.per_channel_max[:, None])
        mid = (stats.per_channel_min + stats.per_channel_max) / 2
        assert np.allclose(D.denormalize(halves, stats).values, mid[:, None])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        rec = _rand_rec(rng, T=20)
        stats = D.fit_normalizer([rec])
        fwd = D.normalize(rec, stats)
        back = D.denormalize(fwd, stats)
        assert np.max(np.abs(back.values - rec.values)) < 1e-6
        again = D.normalize(back, stats)
        assert np.max(np.abs(again.values - fwd.values)) < 1e-6


# ---------------------------------------------------------------------------
# Lowess
# ---------------------------------------------------------------------------

def _lowess_oracle(y, window):
    """Naive per-point tricube weighted linear fit (shifted window at edges)."""
    T = len(y)
    half = window // 2
    out = np.empty(T)
    for t in range(T):
        start = min(max(t - half, 0), T - window)
        idx = np.arange(start, start + window)
        d = np.abs(idx - t).astype(float)
        w = (1 - (d / d.max()) ** 3) ** 3
        A = np.stack([np.ones(window), idx - t], axis=1)
        W = np.diag(w)
        beta = np.linalg.solve(A.T @ W @ A, A.T @ W @ y[idx])
        out[t] = beta[0]
    return out


class TestLowess:
    def test_constant_unchanged(self):
        rec = _rec(np.full((18, 40), 3.25))
        out = D.lowess_smooth(rec, 7)
        assert np.allclose(out.values, 3.25, atol=1e-9)

    def test_linear_unchanged(self):
        t = np.arange(60, dtype=float)
        values = np.stack([0.5 * c * t + c for c in range(1, 19)])
        out = D.lowess_smooth(_rec(values), 11)
        assert np.max(np.abs(out.values - values)) < 1e-6

    def test_spike_reduced_and_matches_oracle(self):
        y = np.zeros(50)
        y[25] = 4.0
        values = np.tile(np.linspace(0, 1, 50), (18, 1))
        values[0] = y
        out = D.lowess_smooth(_rec(values), 9)
        assert abs(out.values[0, 25]) < 4.0
        oracle = _lowess_oracle(y, 9)
        assert np.max(np.abs(out.values[0] - oracle)) < 1e-9

    def test_random_channels_match_oracle(self):
        rng = np.random.default_rng(5)
        rec = _rand_rec(rng, T=70)
        out = D.lowess_smooth(rec, 13)
        for c in (0, 7, 17):
            oracle = _lowess_oracle(rec.values[c], 13)
            assert np.max(np.abs(out.values[c] - oracle)) < 1e-9

    def test_window_validation(self):
        rec = _rec(np.random.default_rng(0).uniform(0, 1, (18, 10)))
        with pytest.raises(WindowTooLarge):
            D.lowess_smooth(rec, 11)
        with pytest.raises(ValueError):
            D.lowess_smooth(rec, 4)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

class TestResample:
    def test_length_ratio(self):
        out = D.resample_audio(np.random.default_rng(0).standard_normal(44100), 44100, 16000)
        assert len(out) == 16000

    def test_rounded_length(self):
        out = D.resample_audio(np.zeros(44101, dtype=np.float32), 44100, 16000)
        assert len(out) == round(44101 * 16000 / 44100)

    def test_dc_preserved(self):
        out = D.resample_audio(np.full(44100, 0.3, dtype=np.float32), 44100, 16000)
        center = out[2000:-2000]
        assert np.max(np.abs(center - 0.3)) < 1e-3

    def test_sine_amplitude_via_fft(self):
        sr_in, sr_out, f0 = 44100, 16000, 1000.0
        t = np.arange(2 * sr_in) / sr_in
        x = 0.5 * np.sin(2 * np.pi * f0 * t)
        y = D.resample_audio(x.astype(np.float32), sr_in, sr_out)
        seg = y[4000:4000 + 16000].astype(np.float64)  # 1 s, bin width 1 Hz
        spectrum = np.abs(np.fft.rfft(seg)) / len(seg) * 2
        peak_bin = int(np.argmax(spectrum))
        assert peak_bin == 1000
        assert abs(spectrum[peak_bin] - 0.5) / 0.5 < 0.01

    def test_empty_rejected(self):
        with pytest.raises(EmptyAudio):
            D.resample_audio(np.array([]), 44100, 16000)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

class TestLosoSplit:
    def _manifest(self):
        return [
            D.UtteranceRef(f"S{s:02d}", f"u{u:03d}", None)
            for s in range(1, 9)
            for u in range(10)
        ]

    def test_counts(self):
        spec, train, test = D.loso_split(self._manifest(), "S01", seed=0)
        assert len(train) == 70 and len(test) == 10
        assert spec.held_out_speaker == "S01"

    def test_exclusion_and_partition(self):
        refs = self._manifest()
        _, train, test = D.loso_split(refs, "S03", seed=1)
        assert all(r.speaker_id != "S03" for r in train)
        assert all(r.speaker_id == "S03" for r in test)
        key = lambda r: (r.speaker_id, r.utterance_id)
        assert set(map(key, train)) | set(map(key, test)) == set(map(key, refs))
        assert set(map(key, train)) & set(map(key, test)) == set()

    def test_deterministic(self):
        refs = self._manifest()
        _, train_a, _ = D.loso_split(refs, "S02", seed=9)
        _, train_b, _ = D.loso_split(refs, "S02", seed=9)
        assert [r.utterance_id for r in train_a] == [r.utterance_id for r in train_b]
        assert [r.speaker_id for r in train_a] == [r.speaker_id for r in train_b]

    def test_unknown_speaker(self):
        with pytest.raises(UnknownSpeaker):
            D.loso_split(self._manifest(), "F99", seed=0)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

class TestSynthDataset:
    def test_shapes(self):
        utts = D.synth_dataset(2, 4, 2.0, seed=7)
        assert len(utts) == 8
        for u in utts:
            assert u.ema.values.shape == (18, 200)
            assert len(u.audio) == 32000
            assert u.duration_gap_s() <= D.DURATION_TOLERANCE_S

    def test_bit_identical_given_seed(self):
        a = D.synth_dataset(2, 2, 1.5, seed=3)
        b = D.synth_dataset(2, 2, 1.5, seed=3)
        for ua, ub in zip(a, b):
            assert np.array_equal(ua.audio, ub.audio)
            assert np.array_equal(ua.ema.values, ub.ema.values)

    def test_channels_track_their_latent(self):
        rng = np.random.default_rng([7, 101, 0])
        centers = rng.uniform(-30.0, 30.0, 18)
        audio, ema, latents = D._synth_utterance(0, 0, 2.0, 7, centers)
        for c in range(18):
            z = latents[c % 3]
            r = np.corrcoef(ema[c], z)[0, 1]
            assert r > 0.5, f"channel {c} correlates only {r:.2f} with its driver"

    def test_speakers_have_distinct_offsets(self):
        utts = D.synth_dataset(2, 1, 1.0, seed=4)
        m0 = utts[0].ema.values.mean(axis=1)
        m1 = utts[1].ema.values.mean(axis=1)
        assert np.max(np.abs(m0 - m1)) > 1.0


class TestDurationAlignment:
    def test_small_gap_padded_or_trimmed(self):
        rng = np.random.default_rng(8)
        ema = D.EmaRecording(rng.uniform(0, 1, (18, 100)))  # 1.0 s
        utt = D.Utterance("S01", "u1", rng.standard_normal(16400).astype(np.float32),
                          16000, ema)  # 1.025 s audio
        aligned = D.align_audio_to_ema(utt)
        assert len(aligned.audio) == 16000

    def test_large_gap_rejected(self):
        from artinv.errors import DurationMismatch
        rng = np.random.default_rng(9)
        ema = D.EmaRecording(rng.uniform(0, 1, (18, 100)))
        utt = D.Utterance("S01", "u1", rng.standard_normal(18000).astype(np.float32),
                          16000, ema)  # 0.125 s apart
        with pytest.raises(DurationMismatch):
            D.align_audio_to_ema(utt)


# ---------------------------------------------------------------------------
# Corpus round trip
# ---------------------------------------------------------------------------

class TestCorpusIO:
    def test_write_read_round_trip(self, tmp_path):
        utts = D.synth_dataset(2, 2, 1.0, seed=5)
        manifest = D.write_corpus(utts, tmp_path)
        refs = D.read_manifest(manifest)
        assert len(refs) == 4
        loaded = D.load_utterance(refs[0])
        original = utts[0]
        assert loaded.speaker_id == original.speaker_id
        assert np.array_equal(loaded.audio, original.audio)
        assert np.allclose(loaded.ema.values, original.ema.values, atol=1e-6)

    def test_missing_file_names_path(self, tmp_path):
        utts = D.synth_dataset(1, 1, 1.0, seed=5)
        manifest = D.write_corpus(utts, tmp_path)
        refs = D.read_manifest(manifest)
        victim = refs[0].directory / "ema.f32"
        victim.unlink()
        with pytest.raises(ManifestError) as exc:
            D.load_utterance(refs[0])
        assert "ema.f32" in str(exc.value)

    def test_preprocess_idempotent(self, tmp_path):
        utts = D.synth_dataset(2, 2, 1.0, seed=6)
        raw_manifest = D.write_corpus(utts, tmp_path / "raw")
        out = tmp_path / "prep"
        D.preprocess_corpus(raw_manifest, out, lowess_window=9)
        first = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        D.preprocess_corpus(raw_manifest, out, lowess_window=9)
        second = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        assert first == second

    def test_preprocess_outputs_normalized_with_stats(self, tmp_path):
        utts = D.synth_dataset(2, 2, 1.0, seed=6)
        raw_manifest = D.write_corpus(utts, tmp_path / "raw")
        out_manifest = D.preprocess_corpus(raw_manifest, tmp_path / "prep", lowess_window=9)
        refs = D.read_manifest(out_manifest)
        for ref in refs:
            utt = D.load_utterance(ref)
            assert utt.ema.values.min() >= 0.0 and utt.ema.values.max() <= 1.0
            assert utt.sample_rate_hz == D.AUDIO_RATE_HZ
        stats = D.load_speaker_stats(out_manifest.parent, {r.speaker_id for r in refs})
        assert set(stats) == {"S01", "S02"}
