"""K-means pseudo-labeling: codebook fitting, frame assignment, purity.

Codebook file format (little-endian): magic "MHKC", u32 k, u32 D,
u32 source tag (0 = logmel, n >= 1 = hidden layer n), then k*D float32.
Label files are text: optional `#frame_period_ms=` header, then one line per
utterance `utt_id<TAB>l_1 l_2 ... l_T`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .audio import AlignmentFile
from .features import FeatureMatrix
from .rng import stream_rng

_MAGIC = b"MHKC"


@dataclass
class Codebook:
    centroids: np.ndarray   # k x D, float32
    source: str = "logmel"  # "logmel" or "hidden"
    layer: int = 0          # meaningful when source == "hidden"

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("centroids must be a k x D matrix with k >= 1")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroids")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class LabelSeq:
    utt_id: str
    labels: np.ndarray
    frame_period_ms: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)


@dataclass
class PurityReport:
    phone_purity: float
    cluster_purity: float
    joint_counts: np.ndarray    # k x P frame counts

    @property
    def num_frames(self) -> int:
        return int(self.joint_counts.sum())


def _pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, N x k, computed per-coordinate."""
    out = np.empty((x.shape[0], c.shape[0]))
    for j in range(c.shape[0]):
        diff = x - c[j]
        out[:, j] = np.einsum("nd,nd->n", diff, diff)
    return out


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(features, k: int, seed: int, max_iters: int = 100,
               tol: float = 1e-6, source: str = "logmel", layer: int = 0) -> Codebook:
    """Lloyd's algorithm with k-means++ init over all frames of all utterances.

    Deterministic given seed and iteration order. Empty clusters are reseeded
    to the point currently farthest from its assigned centroid.
    """
    mats = [f.data for f in features if f.num_frames > 0]
    if not mats:
        raise ValueError("no frames to cluster")
    x = np.concatenate(mats).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("NaN or inf in features")
    n = x.shape[0]
    if n < k:
        raise ValueError(f"{n} frames < k={k}")

    rng = stream_rng(seed, "kmeans")
    centroids = _kmeanspp_init(x, k, rng)
    x_sq = (x * x).sum(axis=1)
    prev_distortion = np.inf
    for _ in range(max_iters):
        # |x - c|^2 via the expansion; clamp tiny negatives from cancellation
        d2 = np.maximum(x_sq[:, None] - 2.0 * (x @ centroids.T)
                        + (centroids * centroids).sum(axis=1)[None, :], 0.0)
        assign_idx = d2.argmin(axis=1)
        distortion = d2[np.arange(n), assign_idx].sum()
        if distortion > prev_distortion * (1 + 1e-12):
            raise AssertionError("Lloyd distortion increased")
        counts = np.bincount(assign_idx, minlength=k)
        new_centroids = np.zeros_like(centroids)
        np.add.at(new_centroids, assign_idx, x)
        nonempty = counts > 0
        new_centroids[nonempty] /= counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = d2[np.arange(n), assign_idx].argmax()
            new_centroids[j] = x[far]
            d2[far, :] = 0.0  # don't reseed two empty clusters to the same point
        centroids = new_centroids
        if prev_distortion < np.inf and prev_distortion > 0:
            if (prev_distortion - distortion) / prev_distortion < tol:
                break
        elif distortion == 0.0:
            break
        prev_distortion = distortion
    return Codebook(centroids.astype(np.float32), source=source, layer=layer)


def assign(cb: Codebook, f: FeatureMatrix) -> LabelSeq:
    """Nearest centroid per frame (Euclidean); ties go to the lowest index."""
    if f.dim != cb.feature_dim:
        raise ValueError(f"feature dim {f.dim} != codebook dim {cb.feature_dim}")
    if f.num_frames == 0:
        return LabelSeq(f.utt_id, np.zeros(0, dtype=np.int64), f.frame_period_ms)
    d2 = _pairwise_sq_dists(f.data.astype(np.float64),
                            cb.centroids.astype(np.float64))
    return LabelSeq(f.utt_id, d2.argmin(axis=1), f.frame_period_ms)


def distortion(cb: Codebook, features) -> float:
    """Total squared distance of every frame to its nearest centroid."""
    total = 0.0
    for f in features:
        if f.num_frames == 0:
            continue
        d2 = _pairwise_sq_dists(f.data.astype(np.float64),
                                cb.centroids.astype(np.float64))
        total += d2.min(axis=1).sum()
    return total


def purity(label_seqs, alignments: AlignmentFile, k: int | None = None) -> PurityReport:
    """Phone and cluster purity from the cluster x phone joint frame counts.

    Frames outside any alignment segment are ignored. Label and alignment
    frame periods must agree.
    """
    joint = None
    num_phones = alignments.num_phones()
    for seq in label_seqs:
        if abs(seq.frame_period_ms - alignments.frame_period_ms) > 1e-6:
            raise ValueError(
                f"{seq.utt_id}: label frame period {seq.frame_period_ms} != "
                f"alignment frame period {alignments.frame_period_ms}")
        phones = alignments.frame_labels(seq.utt_id, len(seq.labels))
        valid = phones >= 0
        if joint is None:
            kk = k if k is not None else int(seq.labels.max()) + 1 if len(seq) else 1
            joint = np.zeros((kk, num_phones), dtype=np.int64)
        labels = seq.labels[valid]
        if len(labels) and labels.max() >= joint.shape[0]:
            grown = np.zeros((int(labels.max()) + 1, num_phones), dtype=np.int64)
            grown[:joint.shape[0]] = joint
            joint = grown
        np.add.at(joint, (labels, phones[valid]), 1)
    if joint is None or joint.sum() == 0:
        raise ValueError("no frames overlap the alignments")
    n = joint.sum()
    phone_purity = joint.max(axis=1).sum() / n
    cluster_purity = joint.max(axis=0).sum() / n
    return PurityReport(float(phone_purity), float(cluster_purity), joint)


def save_codebook(path: str, cb: Codebook) -> None:
    tag = 0 if cb.source == "logmel" else cb.layer
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", cb.k, cb.feature_dim, tag))
        fh.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        k, d, tag = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(4 * k * d), dtype="<f4").reshape(k, d)
    source = "logmel" if tag == 0 else "hidden"
    return Codebook(data.copy(), source=source, layer=tag)


def save_labels(path: str, seqs: list[LabelSeq]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if seqs:
            fh.write(f"#frame_period_ms={seqs[0].frame_period_ms:g}\n")
        for seq in seqs:
            fh.write(seq.utt_id + "\t" + " ".join(str(l) for l in seq.labels) + "\n")


def load_labels(path: str, frame_period_ms: float | None = None) -> dict[str, LabelSeq]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key.strip() == "frame_period_ms":
                    frame_period_ms = float(value)
                continue
            utt_id, _, rest = line.partition("\t")
            labels = np.array([int(v) for v in rest.split()] if rest.strip() else [],
                              dtype=np.int64)
            if frame_period_ms is None:
                raise ValueError(f"{path}: no frame period header or argument")
            out[utt_id] = LabelSeq(utt_id, labels, frame_period_ms)
    return out
