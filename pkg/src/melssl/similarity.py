"""Layer-wise representation similarity via regularized linear CCA.

Directions come from ridge-whitened covariances (whiten + SVD); the score is
the mean absolute Pearson correlation of the paired canonical variates,
clipped to [0, 1]. Scoring the variates directly (rather than reading the
singular values) keeps self-similarity at exactly 1 under regularization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AlignmentFile
from .features import FeatureMatrix


@dataclass
class CcaConfig:
    reg: float = 1e-4
    max_dims: int = 0   # 0 -> min(Dx, Dy)

    def __post_init__(self):
        if self.reg <= 0:
            raise ValueError("reg must be > 0")


@dataclass
class LayerActivations:
    utt_id: str
    frame_period_ms: float
    layers: list[np.ndarray]    # n_layers + 1 matrices, T x d; layers[0] is "feat"


def layer_names(n_layers: int) -> list[str]:
    return ["feat"] + [f"layer{i}" for i in range(1, n_layers + 1)]


def collect_activations(encoder, feature_list) -> list[LayerActivations]:
    """All layer outputs per utterance (no masking, no dropout)."""
    out = []
    for f in feature_list:
        res = encoder.forward(f, None, train=False)
        out.append(LayerActivations(f.utt_id, f.frame_period_ms,
                                    [h.data.copy() for h in res.hidden]))
    return out


def _inv_sqrt(cov: np.ndarray, reg: float) -> tuple[np.ndarray, int]:
    lam, vec = np.linalg.eigh(cov)
    rank = int((lam > 1e-9 * max(lam.max(), 1e-30)).sum())
    lam = np.maximum(lam + reg, 1e-12)
    return (vec / np.sqrt(lam)) @ vec.T, rank


def cca_score(x: np.ndarray, y: np.ndarray, cfg: CcaConfig | None = None) -> float:
    """Mean canonical correlation between row-paired samples X and Y."""
    cfg = cfg or CcaConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("X and Y must be 2-d with matching row counts")
    n, dx = x.shape
    dy = y.shape[1]
    if n <= max(dx, dy) + 10:
        raise ValueError(f"need more than max(Dx, Dy)+10 = {max(dx, dy) + 10} "
                         f"samples, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")

    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cxx = xc.T @ xc / (n - 1)
    cyy = yc.T @ yc / (n - 1)
    cxy = xc.T @ yc / (n - 1)
    wx, rank_x = _inv_sqrt(cxx, cfg.reg)
    wy, rank_y = _inv_sqrt(cyy, cfg.reg)
    u, s, vt = np.linalg.svd(wx @ cxy @ wy)
    if not np.all(np.isfinite(s)):
        raise ValueError("CCA decomposition failed")
    # mean over the retained canonical dims; rank truncation keeps degenerate
    # (zero-variance) directions from diluting the score
    dims = min(rank_x, rank_y)
    if cfg.max_dims:
        dims = min(dims, cfg.max_dims)
    ux = xc @ (wx @ u[:, :dims])
    vy = yc @ (wy @ vt[:dims].T)

    corrs = np.zeros(dims)
    for i in range(dims):
        su, sv = ux[:, i].std(), vy[:, i].std()
        if su > 1e-12 and sv > 1e-12:
            corrs[i] = abs(np.mean((ux[:, i] - ux[:, i].mean())
                                   * (vy[:, i] - vy[:, i].mean())) / (su * sv))
    return float(np.clip(corrs, 0.0, 1.0).mean())


def _segment_pools(activs: list[LayerActivations], alignments: AlignmentFile):
    """Segment-mean activations per layer, with one-hot phone targets."""
    n_layers = len(activs[0].layers)
    num_phones = alignments.num_phones()
    pooled: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    phones = []
    for act in activs:
        factor = act.frame_period_ms / alignments.frame_period_ms
        if abs(factor - round(factor)) > 1e-6:
            raise ValueError("activation frame period must be an integer "
                             "multiple of the alignment frame period")
        ali = alignments if round(factor) == 1 else alignments.decimate(int(round(factor)))
        t = act.layers[0].shape[0]
        for start, end, phone in ali.segments.get(act.utt_id, []):
            end = min(end, t)
            if end <= start:
                continue
            for li in range(n_layers):
                pooled[li].append(act.layers[li][start:end].mean(axis=0))
            phones.append(phone)
    if not phones:
        raise ValueError("no alignment segments overlap the activations")
    onehot = np.eye(num_phones)[np.array(phones)]
    return [np.stack(p) for p in pooled], onehot


def phone_cca(activs: list[LayerActivations], alignments: AlignmentFile,
              cfg: CcaConfig | None = None) -> list[tuple[str, float]]:
    """Per-layer CCA similarity between pooled activations and phone one-hots."""
    pooled, onehot = _segment_pools(activs, alignments)
    names = layer_names(len(pooled) - 1)
    return [(name, cca_score(x, onehot, cfg)) for name, x in zip(names, pooled)]


def mel_cca(activs: list[LayerActivations], mel_by_utt: dict[str, FeatureMatrix],
            cfg: CcaConfig | None = None, cap: int = 50000,
            seed: int = 0) -> list[tuple[str, float]]:
    """Per-layer CCA similarity between frame activations and input features.

    Each activation frame pairs with the model-rate input feature row it was
    computed from; frames are subsampled to at most `cap` with a seeded draw.
    """
    n_layers = len(activs[0].layers)
    xs: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    ys = []
    for act in activs:
        mel = mel_by_utt[act.utt_id]
        t = min(act.layers[0].shape[0], mel.num_frames)
        if t == 0:
            continue
        for li in range(n_layers):
            xs[li].append(act.layers[li][:t])
        ys.append(mel.data[:t])
    y = np.concatenate(ys)
    xs = [np.concatenate(x) for x in xs]
    if y.shape[0] > cap:
        keep = np.random.default_rng(seed).choice(y.shape[0], cap, replace=False)
        y = y[keep]
        xs = [x[keep] for x in xs]
    names = layer_names(n_layers - 1)
    return [(name, cca_score(x, y, cfg)) for name, x in zip(names, xs)]
