import struct

import numpy as np
import pytest

from melssl.audio import (AlignmentFile, Manifest, ManifestEntry,
                          UnsupportedWavError, WavFormatError, WaveBuffer,
                          load_alignments, load_manifest, read_wav,
                          save_alignments, save_manifest, synth_corpus,
                          write_wav)


class TestWav:
    def test_pcm16_scaling(self, tmp_path):
        path = str(tmp_path / "t.wav")
        payload = struct.pack("<3h", 0, 16384, -32768)
        header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 16000, 32000, 2, 16)
        header += b"data" + struct.pack("<I", len(payload))
        with open(path, "wb") as fh:
            fh.write(header + payload)
        wave = read_wav(path)
        np.testing.assert_allclose(wave.samples, [0.0, 0.5, -1.0])
        assert wave.sample_rate_hz == 16000

    def test_empty_data_chunk(self, tmp_path):
        path = str(tmp_path / "empty.wav")
        write_wav(path, WaveBuffer(np.zeros(0, dtype=np.float32)))
        wave = read_wav(path)
        assert len(wave.samples) == 0

    def test_roundtrip_pcm16(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, 1000).astype(np.float32)
        path = str(tmp_path / "rt.wav")
        write_wav(path, WaveBuffer(x))
        back = read_wav(path)
        assert np.abs(back.samples - x).max() <= 1.0 / 32768

    def test_roundtrip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, 500).astype(np.float32)
        path = str(tmp_path / "f32.wav")
        write_wav(path, WaveBuffer(x), encoding="float32")
        np.testing.assert_array_equal(read_wav(path).samples, x)

    def test_malformed_header(self, tmp_path):
        path = str(tmp_path / "bad.wav")
        with open(path, "wb") as fh:
            fh.write(b"NOTARIFFFILE")
        with pytest.raises(WavFormatError):
            read_wav(path)

    def test_stereo_rejected(self, tmp_path):
        path = str(tmp_path / "st.wav")
        payload = struct.pack("<4h", 0, 0, 0, 0)
        header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 16000, 64000, 4, 16)
        header += b"data" + struct.pack("<I", len(payload))
        with open(path, "wb") as fh:
            fh.write(header + payload)
        with pytest.raises(UnsupportedWavError):
            read_wav(path)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        m = Manifest([ManifestEntry("a", "x.wav", 10), ManifestEntry("b", "y.wav", 5)])
        path = str(tmp_path / "m.tsv")
        save_manifest(path, m)
        back = load_manifest(path)
        assert back.utt_ids() == ["a", "b"]
        assert back.entries[1].num_samples == 5

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Manifest([ManifestEntry("a", "x", 1), ManifestEntry("a", "y", 2)])

    def test_bad_num_samples(self):
        with pytest.raises(ValueError):
            Manifest([ManifestEntry("a", "x", 0)])


class TestAlignments:
    def test_roundtrip(self, tmp_path):
        ali = AlignmentFile(10.0, {"u": [(0, 5, 1), (5, 9, 0)]})
        path = str(tmp_path / "ali.txt")
        save_alignments(path, ali)
        back = load_alignments(path)
        assert back.frame_period_ms == 10.0
        assert back.segments["u"] == [(0, 5, 1), (5, 9, 0)]

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            AlignmentFile(10.0, {"u": [(0, 5, 1), (3, 9, 0)]})

    def test_empty_segment_rejected(self):
        with pytest.raises(ValueError):
            AlignmentFile(10.0, {"u": [(4, 4, 1)]})

    def test_frame_labels_and_decimate(self):
        ali = AlignmentFile(10.0, {"u": [(0, 4, 2), (4, 7, 1)]})
        labels = ali.frame_labels("u", 9)
        np.testing.assert_array_equal(labels, [2, 2, 2, 2, 1, 1, 1, -1, -1])
        half = ali.decimate(2)
        assert half.frame_period_ms == 20.0
        assert half.segments["u"] == [(0, 2, 2), (2, 3, 1)]


class TestSynthCorpus:
    def test_deterministic(self, tmp_path):
        m1, a1 = synth_corpus(1, 2, seed=7, out_dir=str(tmp_path / "a"))
        m2, a2 = synth_corpus(1, 2, seed=7, out_dir=str(tmp_path / "b"))
        assert a1.segments == a2.segments
        with open(m1.entries[0].path, "rb") as f1, open(m2.entries[0].path, "rb") as f2:
            assert f1.read() == f2.read()

    def test_segment_lengths_in_range(self, tmp_path):
        _, ali = synth_corpus(20, 3, seed=3, out_dir=str(tmp_path / "c"))
        for segs in ali.segments.values():
            for start, end, _ in segs:
                assert 10 <= end - start <= 40

    def test_utterance_lengths(self, tmp_path):
        manifest, _ = synth_corpus(20, 3, seed=5, out_dir=str(tmp_path / "d"))
        for e in manifest:
            assert 16000 <= e.num_samples <= 48000

    def test_alignments_cover_all_frames(self, tmp_path):
        manifest, ali = synth_corpus(5, 2, seed=9, out_dir=str(tmp_path / "e"))
        for e in manifest:
            total = sum(end - start for start, end, _ in ali.segments[e.utt_id])
            assert total * 160 == e.num_samples
