import numpy as np
import pytest

from melssl.audio import WaveBuffer, read_wav, synth_corpus
from melssl.features import (FeatureMatrix, MelConfig, NormStats, apply_norm,
                             compute_logmel, concat_frames, estimate_norm_stats,
                             filterbank_centers_hz, load_features, mel_filterbank,
                             save_features)


@pytest.fixture(scope="module")
def cfg():
    return MelConfig()


class TestLogMel:
    def test_silence(self, cfg):
        wave = WaveBuffer(np.zeros(16000, dtype=np.float32))
        f = compute_logmel(wave, cfg)
        assert f.data.shape == (98, 40)
        assert f.frame_period_ms == 10.0
        np.testing.assert_allclose(f.data, np.log(1e-10), rtol=1e-6)

    def test_sine_lands_in_nearest_filter(self, cfg):
        # oracle: filterbank center frequencies computed from the scale directly
        t = np.arange(16000) / 16000.0
        wave = WaveBuffer(np.sin(2 * np.pi * 440.0 * t).astype(np.float32))
        f = compute_logmel(wave, cfg)
        peak_bin = int(f.data.mean(axis=0).argmax())
        centers = filterbank_centers_hz(cfg)
        assert peak_bin == int(np.abs(centers - 440.0).argmin())

    def test_default_dims(self, cfg):
        wave = WaveBuffer(np.random.default_rng(0).normal(size=8000)
                          .astype(np.float32) * 0.1)
        f = compute_logmel(wave, cfg)
        assert f.dim == 40
        assert f.frame_period_ms == 10.0

    def test_short_utterance_empty(self, cfg):
        f = compute_logmel(WaveBuffer(np.zeros(100, dtype=np.float32)), cfg)
        assert f.num_frames == 0

    def test_translation_consistency(self, cfg):
        rng = np.random.default_rng(1)
        x = rng.normal(size=8000).astype(np.float32) * 0.2
        f1 = compute_logmel(WaveBuffer(x), cfg)
        f2 = compute_logmel(WaveBuffer(x[cfg.hop_samples:]), cfg)
        np.testing.assert_allclose(f2.data, f1.data[1:1 + f2.num_frames], atol=1e-6)

    def test_filterbank_shape_and_coverage(self, cfg):
        fb = mel_filterbank(cfg)
        assert fb.shape == (40, 257)
        assert fb.max() <= 1.0 + 1e-12
        assert (fb.sum(axis=1) > 0).all()


class TestNormStats:
    def test_identical_frames(self):
        f = FeatureMatrix(np.full((5, 3), 2.5, dtype=np.float32), 10.0, "u")
        stats = estimate_norm_stats([f])
        np.testing.assert_allclose(stats.mean, 2.5, atol=1e-7)
        np.testing.assert_allclose(stats.std, 1e-8)

    def test_hand_computed(self):
        f = FeatureMatrix(np.array([[0.0], [2.0]], dtype=np.float32), 10.0, "u")
        stats = estimate_norm_stats([f])
        assert stats.mean[0] == pytest.approx(1.0)
        assert stats.std[0] == pytest.approx(1.0)

    def test_no_frames_errors(self):
        with pytest.raises(ValueError):
            estimate_norm_stats([FeatureMatrix(np.zeros((0, 4)), 10.0, "u")])

    def test_normalization_idempotent(self, tmp_path):
        manifest, _ = synth_corpus(10, 3, seed=1, out_dir=str(tmp_path / "c"))
        cfg = MelConfig()
        feats = [compute_logmel(read_wav(e.path), cfg, e.utt_id) for e in manifest]
        stats = estimate_norm_stats(iter(feats))
        normed = [apply_norm(f, stats) for f in feats]
        stats2 = estimate_norm_stats(iter(normed))
        assert np.abs(stats2.mean).max() < 1e-6
        np.testing.assert_allclose(stats2.std, 1.0, atol=1e-6)

    def test_order_independence(self):
        rng = np.random.default_rng(2)
        fs = [FeatureMatrix(rng.normal(size=(50, 4)).astype(np.float32), 10.0, str(i))
              for i in range(6)]
        s1 = estimate_norm_stats(iter(fs))
        s2 = estimate_norm_stats(iter(fs))
        np.testing.assert_array_equal(s1.mean, s2.mean)

    def test_std_positive_invariant(self):
        with pytest.raises(ValueError):
            NormStats(np.zeros(3), np.array([1.0, 0.0, 1.0]))


class TestConcatFrames:
    def test_shapes_and_period(self):
        f = FeatureMatrix(np.arange(160, dtype=np.float32).reshape(4, 40), 10.0, "u")
        out = concat_frames(f, 2)
        assert out.data.shape == (2, 80)
        assert out.frame_period_ms == 20.0

    def test_odd_tail_dropped(self):
        f = FeatureMatrix(np.arange(10, dtype=np.float32).reshape(5, 2), 10.0, "u")
        out = concat_frames(f, 2)
        assert out.num_frames == 2
        np.testing.assert_array_equal(out.data[0], [0, 1, 2, 3])
        np.testing.assert_array_equal(out.data[1], [4, 5, 6, 7])

    def test_factor_one_identity(self):
        f = FeatureMatrix(np.ones((3, 4), dtype=np.float32), 10.0, "u")
        assert concat_frames(f, 1) is f

    def test_split_recovers_rows(self):
        rng = np.random.default_rng(0)
        f = FeatureMatrix(rng.normal(size=(7, 6)).astype(np.float32), 10.0, "u")
        out = concat_frames(f, 2)
        recovered = out.data.reshape(-1, 6)
        np.testing.assert_array_equal(recovered, f.data[:6])


class TestFeatureFile:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        f = FeatureMatrix(rng.normal(size=(13, 40)).astype(np.float32), 10.0, "u")
        path = str(tmp_path / "f.mhf")
        save_features(path, f)
        back = load_features(path, "u")
        np.testing.assert_array_equal(back.data, f.data)
        assert back.frame_period_ms == 10.0
        save_features(str(tmp_path / "g.mhf"), back)
        with open(path, "rb") as a, open(str(tmp_path / "g.mhf"), "rb") as b:
            assert a.read() == b.read()

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.mhf")
        with open(path, "wb") as fh:
            fh.write(b"XXXX" + b"\0" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_features(path)
