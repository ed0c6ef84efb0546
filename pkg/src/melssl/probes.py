"""Frozen-upstream probing: softmax-weighted layer combination feeding small
task heads (frame phone classification, utterance speaker id, log-F0
regression), plus the autocorrelation pitch reference.

The upstream never trains here: probes consume precomputed activation
matrices as constants, so gradients stop at the layer weights and head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value, backward
from .audio import AlignmentFile, WaveBuffer
from .rng import stream_rng


@dataclass
class ProbeConfig:
    task: str = "phone_frame"       # phone_frame | speaker | f0
    lr: float = 1e-3
    epochs: int = 20
    seed: int = 0
    train_frac: float = 0.8

    def __post_init__(self):
        if self.task not in ("phone_frame", "speaker", "f0"):
            raise ValueError(f"unknown probe task {self.task!r}")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must be in (0, 1)")


@dataclass
class ProbeResult:
    metrics: dict
    layer_weights: np.ndarray       # softmax of learned logits
    head: dict[str, np.ndarray]


def weighted_sum(hidden, logits) -> Value:
    """Softmax(logits)-weighted combination of equally shaped layer matrices."""
    hidden = [ad.as_value(h) for h in hidden]
    shape = hidden[0].shape
    for h in hidden:
        if h.shape != shape:
            raise ValueError("layer shapes differ")
    logits = ad.as_value(logits)
    if logits.size != len(hidden):
        raise ValueError(f"{logits.size} weights for {len(hidden)} layers")
    w = ad.reshape(ad.softmax(logits, axis=-1), (len(hidden), 1, 1))
    return ad.vsum(ad.mul(ad.stack(hidden, axis=0), w), axis=0)


@dataclass
class ProbeExample:
    utt_id: str
    layers: list[np.ndarray]        # L matrices, T x d (constants)
    target: np.ndarray              # per-frame ids, per-frame values, or scalar id
    frame_mask: np.ndarray | None = None  # frames that carry a target


def _split(examples, train_frac, seed):
    order = stream_rng(seed, "probe-split").permutation(len(examples))
    n_train = max(1, int(round(train_frac * len(examples))))
    if n_train == len(examples):
        n_train -= 1
    return ([examples[i] for i in order[:n_train]],
            [examples[i] for i in order[n_train:]])


class _ProbeHead:
    def __init__(self, n_layers, d, out_dim, rng):
        self.logits = ad.param(np.zeros(n_layers))
        self.w = ad.param(rng.normal(0.0, 0.02, size=(d, out_dim)))
        self.b = ad.param(np.zeros(out_dim))

    def params(self):
        return {"logits": self.logits, "w": self.w, "b": self.b}

    def forward(self, layers) -> Value:
        rep = weighted_sum([ad.const(x) for x in layers], self.logits)
        return ad.matmul(rep, self.w) + self.b


def _adam_step(params, m, v, t, lr, b1=0.9, b2=0.98, eps=1e-8):
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        p.data = p.data - lr * (m[name] / (1 - b1 ** t)) / (
            np.sqrt(v[name] / (1 - b2 ** t)) + eps)
        p.grad = None


def probe_train(examples: list[ProbeExample], cfg: ProbeConfig) -> ProbeResult:
    """Train layer weights + linear head on the task; report held-out error.

    phone_frame: per-frame cross-entropy, metric is frame error rate.
    speaker:     mean-pooled cross-entropy per utterance, metric is error rate.
    f0:          per-frame squared error on voiced frames, metric is MSE.
    """
    if not examples:
        raise ValueError("no probe examples")
    train, heldout = _split(examples, cfg.train_frac, cfg.seed)
    n_layers = len(examples[0].layers)
    d = examples[0].layers[0].shape[1]
    if cfg.task == "f0":
        out_dim = 1
    else:
        out_dim = 1 + max(int(np.max(e.target)) for e in examples)
    head = _ProbeHead(n_layers, d, out_dim, stream_rng(cfg.seed, "probe-init"))
    params = head.params()
    m = {n: np.zeros_like(p.data) for n, p in params.items()}
    v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def utt_loss(ex: ProbeExample) -> Value | None:
        pred = head.forward(ex.layers)
        if cfg.task == "speaker":
            pooled = ad.vmean(pred, axis=0, keepdims=True)
            return ad.vmean(ad.cross_entropy(pooled, [int(ex.target)]))
        keep = ex.frame_mask if ex.frame_mask is not None \
            else np.ones(pred.shape[0], dtype=bool)
        if not keep.any():
            return None
        rows = ad.gather_rows(pred, np.flatnonzero(keep))
        if cfg.task == "phone_frame":
            return ad.vmean(ad.cross_entropy(rows, ex.target[keep]))
        diff = ad.sub(ad.reshape(rows, (-1,)), ad.const(ex.target[keep]))
        return ad.vmean(ad.mul(diff, diff))

    t = 0
    for epoch in range(cfg.epochs):
        order = stream_rng(cfg.seed, "probe-shuffle", epoch).permutation(len(train))
        for i in order:
            loss = utt_loss(train[i])
            if loss is None:
                continue
            backward(loss)
            t += 1
            _adam_step(params, m, v, t, cfg.lr)

    def evaluate(split):
        if cfg.task == "speaker":
            correct = total = 0
            for ex in split:
                logits = head.forward(ex.layers).data.mean(axis=0)
                correct += int(logits.argmax() == int(ex.target))
                total += 1
            return {"error_rate": 1.0 - correct / total}
        if cfg.task == "phone_frame":
            correct = total = 0
            for ex in split:
                keep = ex.frame_mask if ex.frame_mask is not None \
                    else np.ones(len(ex.target), dtype=bool)
                pred = head.forward(ex.layers).data.argmax(axis=1)
                correct += int((pred[keep] == ex.target[keep]).sum())
                total += int(keep.sum())
            return {"error_rate": 1.0 - correct / total}
        se = n = 0.0
        for ex in split:
            keep = ex.frame_mask if ex.frame_mask is not None \
                else np.ones(len(ex.target), dtype=bool)
            pred = head.forward(ex.layers).data[:, 0]
            se += float(((pred[keep] - ex.target[keep]) ** 2).sum())
            n += int(keep.sum())
        return {"mse": se / n}

    metrics = {f"train_{k}": v for k, v in evaluate(train).items()}
    metrics.update({f"heldout_{k}": v for k, v in evaluate(heldout).items()})
    weights = np.exp(head.logits.data - head.logits.data.max())
    weights /= weights.sum()
    return ProbeResult(metrics, weights,
                       {n: p.data.copy() for n, p in params.items()})


def phone_probe_examples(acts, alignments: AlignmentFile) -> list[ProbeExample]:
    """Frame-level phone targets from alignments at the activation frame rate."""
    examples = []
    for act in acts:
        factor = act.frame_period_ms / alignments.frame_period_ms
        ali = alignments if round(factor) == 1 \
            else alignments.decimate(int(round(factor)))
        t = act.layers[0].shape[0]
        phones = ali.frame_labels(act.utt_id, t)
        examples.append(ProbeExample(act.utt_id, act.layers,
                                     np.maximum(phones, 0), phones >= 0))
    return examples


def speaker_probe_examples(acts, utt2spk: dict[str, int]) -> list[ProbeExample]:
    return [ProbeExample(a.utt_id, a.layers, np.int64(utt2spk[a.utt_id]))
            for a in acts]


def f0_probe_examples(acts, f0_by_utt: dict[str, tuple[np.ndarray, np.ndarray]],
                      hop_factor: int = 1) -> list[ProbeExample]:
    """Pair activations with (log_f0, voiced) tracks computed at 10 ms."""
    examples = []
    for a in acts:
        log_f0, voiced = f0_by_utt[a.utt_id]
        log_f0, voiced = log_f0[::hop_factor], voiced[::hop_factor]
        t = min(a.layers[0].shape[0], len(log_f0))
        examples.append(ProbeExample(
            a.utt_id, [x[:t] for x in a.layers], log_f0[:t], voiced[:t]))
    return examples


# --------------------------------------------------------------------------
# pitch reference
# --------------------------------------------------------------------------

_F0_WIN_MS = 40.0
_F0_HOP_MS = 10.0
_F0_RANGE_HZ = (60.0, 400.0)
_VOICED_THRESHOLD = 0.5


def estimate_f0(wave: WaveBuffer) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (log_f0, voiced) via normalized autocorrelation.

    40 ms windows at a 10 ms hop; F0 searched in [60, 400] Hz with parabolic
    peak refinement; frames whose peak correlation is below 0.5 (or that are
    near-silent) are unvoiced, with log_f0 set to 0.
    """
    sr = wave.sample_rate_hz
    win = int(round(sr * _F0_WIN_MS / 1000.0))
    hop = int(round(sr * _F0_HOP_MS / 1000.0))
    lag_min = int(np.floor(sr / _F0_RANGE_HZ[1]))
    lag_max = int(np.ceil(sr / _F0_RANGE_HZ[0]))
    x = np.asarray(wave.samples, dtype=np.float64)
    if len(x) < win:
        return np.zeros(0), np.zeros(0, dtype=bool)
    n_frames = 1 + (len(x) - win) // hop
    log_f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        w = x[t * hop:t * hop + win]
        energy = np.dot(w, w)
        if energy < 1e-8:
            continue
        # full autocorrelation via FFT, then per-lag normalization
        nfft = 1 << int(np.ceil(np.log2(2 * win)))
        spec = np.fft.rfft(w, nfft)
        ac = np.fft.irfft(spec * np.conj(spec), nfft)[:win]
        e = np.concatenate([[0.0], np.cumsum(w * w)])
        lags = np.arange(lag_min, min(lag_max + 1, win))
        head = e[win - lags] - e[0]           # energy of w[:win-lag]
        tail = e[win] - e[lags]               # energy of w[lag:]
        r = ac[lags] / np.sqrt(np.maximum(head * tail, 1e-12))
        best = int(np.argmax(r))
        if r[best] < _VOICED_THRESHOLD:
            continue
        lag = float(lags[best])
        if 0 < best < len(r) - 1:             # parabolic refinement
            y0, y1, y2 = r[best - 1], r[best], r[best + 1]
            denom = y0 - 2 * y1 + y2
            if abs(denom) > 1e-12:
                lag += 0.5 * (y0 - y2) / denom
        voiced[t] = True
        log_f0[t] = np.log(sr / lag)
    return log_f0, voiced
