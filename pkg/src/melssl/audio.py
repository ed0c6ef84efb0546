"""Corpus ingestion: WAV files, manifests, phone alignments, synthetic speech.

File formats:
  * WAV        -- RIFF, mono, PCM16 or IEEE float32. No resampling, no downmix.
  * manifest   -- TSV, one line per utterance: utt_id<TAB>path<TAB>num_samples
  * alignments -- text, header line `#frame_period_ms=<float>`, then lines
                  utt_id<TAB>start_frame<TAB>end_frame<TAB>phone_id
  * utt2spk    -- TSV, utt_id<TAB>speaker_id (emitted by the synthetic corpus)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import stream_rng


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedWavError(ValueError):
    """Well-formed WAV that this reader does not handle (channels/encoding)."""


@dataclass
class WaveBuffer:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def read_wav(path: str) -> WaveBuffer:
    """Read a mono PCM16 or float32 WAV file. PCM16 value v maps to v/32768."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise WavFormatError(f"{path}: truncated data chunk")
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels != 1:
        raise UnsupportedWavError(f"{path}: {channels} channels, expected mono")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float32)
    else:
        raise UnsupportedWavError(
            f"{path}: format={audio_format} bits={bits}, expected PCM16 or float32")
    return WaveBuffer(samples=samples, sample_rate_hz=sample_rate)


def write_wav(path: str, wave: WaveBuffer, encoding: str = "pcm16") -> None:
    """Write mono WAV. Samples are clamped to [-1, 1] before encoding."""
    x = np.clip(wave.samples, -1.0, 1.0)
    if encoding == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block_align = bits // 8
    byte_rate = wave.sample_rate_hz * block_align
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, audio_format, 1,
                                    wave.sample_rate_hz, byte_rate, block_align, bits)
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(header + payload)


@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    num_samples: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utt_id in seen:
                raise ValueError(f"duplicate utt_id {e.utt_id!r}")
            seen.add(e.utt_id)
            if e.num_samples <= 0:
                raise ValueError(f"{e.utt_id}: num_samples must be > 0")
            if not e.path:
                raise ValueError(f"{e.utt_id}: empty path")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def utt_ids(self) -> list[str]:
        return [e.utt_id for e in self.entries]

    def subset(self, utt_ids) -> "Manifest":
        keep = set(utt_ids)
        return Manifest([e for e in self.entries if e.utt_id in keep])


def save_manifest(path: str, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(f"{e.utt_id}\t{e.path}\t{e.num_samples}\n")


def load_manifest(path: str) -> Manifest:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated fields")
            entries.append(ManifestEntry(parts[0], parts[1], int(parts[2])))
    return Manifest(entries)


@dataclass
class AlignmentFile:
    """Per-utterance phone segments (start_frame, end_frame, phone_id)."""

    frame_period_ms: float
    segments: dict[str, list[tuple[int, int, int]]] = field(default_factory=dict)

    def __post_init__(self):
        for utt_id, segs in self.segments.items():
            prev_end = -1
            for start, end, _ in segs:
                if end <= start:
                    raise ValueError(f"{utt_id}: segment end {end} <= start {start}")
                if start < prev_end:
                    raise ValueError(f"{utt_id}: overlapping or unsorted segments")
                prev_end = end

    def num_phones(self) -> int:
        return 1 + max(p for segs in self.segments.values() for _, _, p in segs)

    def frame_labels(self, utt_id: str, num_frames: int) -> np.ndarray:
        """Per-frame phone ids, -1 where no segment covers the frame."""
        labels = np.full(num_frames, -1, dtype=np.int64)
        for start, end, phone in self.segments.get(utt_id, []):
            labels[start:min(end, num_frames)] = phone
        return labels

    def decimate(self, factor: int) -> "AlignmentFile":
        """Alignments at a coarser frame period; boundaries floor-divided.

        Segments that collapse below one frame are dropped.
        """
        out: dict[str, list[tuple[int, int, int]]] = {}
        for utt_id, segs in self.segments.items():
            kept = []
            for start, end, phone in segs:
                s, e = start // factor, end // factor
                if e > s:
                    kept.append((s, e, phone))
            out[utt_id] = kept
        return AlignmentFile(self.frame_period_ms * factor, out)


def save_alignments(path: str, ali: AlignmentFile) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#frame_period_ms={ali.frame_period_ms:g}\n")
        for utt_id in ali.segments:
            for start, end, phone in ali.segments[utt_id]:
                fh.write(f"{utt_id}\t{start}\t{end}\t{phone}\n")


def load_alignments(path: str) -> AlignmentFile:
    frame_period_ms = None
    segments: dict[str, list[tuple[int, int, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key.strip() == "frame_period_ms":
                    frame_period_ms = float(value)
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields")
            utt_id, start, end, phone = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
            segments.setdefault(utt_id, []).append((start, end, phone))
    if frame_period_ms is None:
        raise ValueError(f"{path}: missing #frame_period_ms header")
    return AlignmentFile(frame_period_ms, segments)


def save_utt2spk(path: str, utt2spk: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, spk in utt2spk.items():
            fh.write(f"{utt_id}\t{spk}\n")


def load_utt2spk(path: str) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                utt_id, spk = line.split("\t")
                out[utt_id] = int(spk)
    return out


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

_SAMPLE_RATE = 16000
_FRAME_MS = 10
_SEG_FRAMES = (10, 40)          # segment length range, in 10 ms frames
_UTT_MS = (1000, 2600)          # target utterance length before final segment

# Difficulty knobs: classes share formant anchors and differ by evenly
# spread offsets on the Mel scale. Tuned so a frame-level nearest-template
# classifier on log-Mel clears 0.9 with margin while k-means clusters of
# the features still track the phone classes (in-segment stability ~0.85).
_NOISE_LEVEL = 0.35
_TEMPLATE_JITTER_MEL = 160.0
_SPEAKER_F0 = (110.0, 280.0)
# Phone sequences follow a sticky cycle (phonotactics stand-in): masked
# prediction of a fully hidden segment stays solvable from its neighbours.
_CYCLE_PROB = 0.8


def _sphere_directions(n: int) -> np.ndarray:
    """Deterministic, evenly spread unit vectors (Fibonacci sphere)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


_ANCHORS_HZ = np.array([650.0, 1400.0, 2600.0])


def _phone_templates(classes: int, seed: int) -> list[dict]:
    """Per-class spectral envelopes: evenly spread Mel-scale offsets of fixed
    formant anchors. Class geometry is seed-independent so corpus difficulty
    stays constant; the seed drives speakers, segment content and noise.
    """
    rng = stream_rng(seed, "phone-templates")
    anchors_mel = 2595.0 * np.log10(1.0 + _ANCHORS_HZ / 700.0)
    dirs = _sphere_directions(classes)
    base_widths = rng.uniform(200.0, 300.0, size=len(_ANCHORS_HZ))
    base_gains = rng.uniform(0.65, 0.85, size=len(_ANCHORS_HZ))
    base_tilt = rng.uniform(-0.25, -0.15)
    templates = []
    for c in range(classes):
        # classes differ only by the controlled Mel-scale formant offsets
        centers_mel = anchors_mel + _TEMPLATE_JITTER_MEL * dirs[c]
        centers = 700.0 * (10.0 ** (centers_mel / 2595.0) - 1.0)
        templates.append({"centers": centers, "widths": base_widths.copy(),
                          "gains": base_gains.copy(), "tilt": base_tilt})
    return templates


def _envelope(template: dict, freqs: np.ndarray) -> np.ndarray:
    env = np.full_like(freqs, 0.02)
    for c, w, g in zip(template["centers"], template["widths"], template["gains"]):
        env = env + g * np.exp(-0.5 * ((freqs - c) / w) ** 2)
    env = env * (np.maximum(freqs, 100.0) / 1000.0) ** template["tilt"]
    return env


def _render_segment(template: dict, f0: float, n: int, gain: float,
                    rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / _SAMPLE_RATE
    # mild vibrato so consecutive frames are not bit-identical
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(vib) / _SAMPLE_RATE
    n_harm = int(7600.0 // f0)
    harmonics = np.arange(1, n_harm + 1)
    amps = _envelope(template, harmonics * f0)
    sig = np.zeros(n)
    phases0 = rng.uniform(0, 2 * np.pi, size=n_harm)
    for h, a, p0 in zip(harmonics, amps, phases0):
        sig += a * np.sin(h * phase + p0)
    sig /= max(np.abs(sig).max(), 1e-9)
    sig += _NOISE_LEVEL * rng.standard_normal(n)
    return gain * sig


def synth_corpus(num_utts: int, classes: int, seed: int, out_dir: str,
                 num_speakers: int = 4) -> tuple[Manifest, AlignmentFile]:
    """Generate a deterministic synthetic corpus of 1-3 s utterances at 16 kHz.

    Each utterance concatenates 100-400 ms segments, each segment drawn from
    one of `classes` harmonic phone templates, voiced at a per-speaker pitch.
    Writes WAVs, manifest.tsv, alignments.txt (10 ms frames) and utt2spk.tsv
    under out_dir; returns the manifest and alignments.
    """
    if num_utts <= 0:
        raise ValueError("num_utts must be > 0")
    if classes < 2:
        raise ValueError("classes must be >= 2")
    os.makedirs(out_dir, exist_ok=True)
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)

    templates = _phone_templates(classes, seed)
    spk_rng = stream_rng(seed, "speakers")
    log_lo, log_hi = np.log(_SPEAKER_F0[0]), np.log(_SPEAKER_F0[1])
    speaker_f0 = np.exp(spk_rng.uniform(log_lo, log_hi, size=num_speakers))

    entries = []
    segments: dict[str, list[tuple[int, int, int]]] = {}
    utt2spk: dict[str, int] = {}
    frame_samples = _SAMPLE_RATE * _FRAME_MS // 1000

    for i in range(num_utts):
        rng = stream_rng(seed, "utterance", i)
        utt_id = f"utt{i:05d}"
        speaker = int(rng.integers(num_speakers))
        target_ms = rng.uniform(*_UTT_MS)

        segs, total_frames = [], 0
        phone = int(rng.integers(classes))
        while total_frames * _FRAME_MS < target_ms:
            length = int(rng.integers(_SEG_FRAMES[0], _SEG_FRAMES[1] + 1))
            segs.append((total_frames, total_frames + length, phone))
            total_frames += length
            if rng.random() < _CYCLE_PROB:
                phone = (phone + 1) % classes
            else:
                phone = int(rng.integers(classes))

        pieces = []
        for start, end, phone in segs:
            n = (end - start) * frame_samples
            f0 = speaker_f0[speaker] * rng.uniform(0.95, 1.05)
            gain = rng.uniform(0.7, 1.0)
            pieces.append(_render_segment(templates[phone], f0, n, gain, rng))
        samples = np.concatenate(pieces)
        samples = 0.9 * samples / max(np.abs(samples).max(), 1e-9)

        wav_path = os.path.join(wav_dir, f"{utt_id}.wav")
        write_wav(wav_path, WaveBuffer(samples.astype(np.float32)))
        entries.append(ManifestEntry(utt_id, wav_path, len(samples)))
        segments[utt_id] = segs
        utt2spk[utt_id] = speaker

    manifest = Manifest(entries)
    ali = AlignmentFile(float(_FRAME_MS), segments)
    save_manifest(os.path.join(out_dir, "manifest.tsv"), manifest)
    save_alignments(os.path.join(out_dir, "alignments.txt"), ali)
    save_utt2spk(os.path.join(out_dir, "utt2spk.tsv"), utt2spk)
    return manifest, ali
