"""Log-Mel feature extraction, corpus normalization, frame concatenation.

Conventions frozen here: 25/10 ms Hann window (periodic), center=false
framing, n_fft=512, power spectrum, triangular filters on the HTK Mel scale,
natural log with floor 1e-10.

Feature file format (one utterance per file, little-endian):
  magic "MHF1", u32 version=1, u32 T, u32 D, f32 frame_period_ms,
  then T*D float32 row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .audio import WaveBuffer

_MAGIC = b"MHF1"


@dataclass
class MelConfig:
    sample_rate_hz: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.hop_ms > self.win_ms:
            raise ValueError("hop_ms must be <= win_ms")
        if self.fmax_hz > self.sample_rate_hz / 2:
            raise ValueError("fmax_hz above Nyquist")
        if self.win_samples > self.n_fft:
            raise ValueError("window longer than n_fft")

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.win_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))


@dataclass
class FeatureMatrix:
    data: np.ndarray        # T x D, float32
    frame_period_ms: float
    utt_id: str = ""

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float32))
        if self.data.size and not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.utt_id}: non-finite features")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("std entries must be > 0")


def hz_to_mel(f):
    """HTK Mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters, n_mels x (n_fft//2+1), peak 1 (no area norm)."""
    n_freqs = cfg.n_fft // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate_hz / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_freqs))
    for m in range(cfg.n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(mid - lo, 1e-8)
        down = (hi - freqs) / max(hi - mid, 1e-8)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def filterbank_centers_hz(cfg: MelConfig) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def compute_logmel(wave: WaveBuffer, cfg: MelConfig, utt_id: str = "") -> FeatureMatrix:
    """T x n_mels log-Mel features; T = 1 + floor((N - win)/hop), center=false."""
    if wave.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"sample rate {wave.sample_rate_hz} != config {cfg.sample_rate_hz}")
    win, hop = cfg.win_samples, cfg.hop_samples
    x = np.asarray(wave.samples, dtype=np.float64)
    if len(x) < win:
        return FeatureMatrix(np.zeros((0, cfg.n_mels), dtype=np.float32),
                             cfg.hop_ms, utt_id)
    n_frames = 1 + (len(x) - win) // hop
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    frames = x[idx]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return FeatureMatrix(logmel.astype(np.float32), cfg.hop_ms, utt_id)


def estimate_norm_stats(features) -> NormStats:
    """Per-dimension mean and population std over all frames of all utterances.

    Per-utterance sums are accumulated in float64 and reduced in iteration
    order, so the result does not depend on how the per-utterance work was
    scheduled.
    """
    total = 0
    s1 = None
    s2 = None
    for f in features:
        if f.num_frames == 0:
            continue
        x = f.data.astype(np.float64)
        if s1 is None:
            s1 = np.zeros(x.shape[1])
            s2 = np.zeros(x.shape[1])
        s1 += x.sum(axis=0)
        s2 += (x * x).sum(axis=0)
        total += x.shape[0]
    if total == 0:
        raise ValueError("no frames to estimate normalization stats from")
    mean = s1 / total
    var = np.maximum(s2 / total - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-8)
    return NormStats(mean, std)


def apply_norm(f: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    data = (f.data.astype(np.float64) - stats.mean) / stats.std
    return FeatureMatrix(data.astype(np.float32), f.frame_period_ms, f.utt_id)


def concat_frames(f: FeatureMatrix, factor: int = 2) -> FeatureMatrix:
    """Concatenate every `factor` contiguous frames; trailing remainder dropped."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return f
    t_out = f.num_frames // factor
    data = f.data[:t_out * factor].reshape(t_out, factor * f.dim)
    return FeatureMatrix(data, f.frame_period_ms * factor, f.utt_id)


def save_features(path: str, f: FeatureMatrix) -> None:
    t, d = f.data.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III f", 1, t, d, f.frame_period_ms))
        fh.write(np.ascontiguousarray(f.data, dtype="<f4").tobytes())


def load_features(path: str, utt_id: str = "") -> FeatureMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, t, d, period = struct.unpack("<III f", fh.read(16))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(4 * t * d), dtype="<f4").reshape(t, d)
    return FeatureMatrix(data.copy(), period, utt_id)
