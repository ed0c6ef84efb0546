"""Masked-prediction Transformer encoder and its two loss heads.

Architecture: input linear projection to d_model, learned mask embedding
substituted at masked positions (post-projection), learned absolute
positional embeddings, pre-norm Transformer blocks with GELU feed-forward.
Dropout sits after the query/key/value projections and after both
feed-forward linears.

Loss heads: a cosine-similarity head (projection W, learnable codeword
embeddings m, temperature tau) and a plain linear cross-entropy head; the
cross-entropy head supports dual targets via two independent instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .features import FeatureMatrix


@dataclass
class EncoderConfig:
    input_dim: int = 80
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 0            # 0 -> 4 * d_model
    dropout: float = 0.1
    max_positions: int = 1024

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class MaskPolicy:
    mask_start_prob: float = 0.08
    span_len: int = 10
    min_masked_frames: int = 1

    def __post_init__(self):
        if not 0.0 <= self.mask_start_prob <= 1.0:
            raise ValueError("mask_start_prob must be in [0, 1]")
        if self.span_len < 1:
            raise ValueError("span_len must be >= 1")


@dataclass
class EncoderOutput:
    hidden: list    # n_layers + 1 Values, each T x d_model; hidden[0] is "feat"
    masked_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def sample_mask_spans(num_frames: int, policy: MaskPolicy,
                      rng: np.random.Generator) -> np.ndarray:
    """Sorted frame indices covered by the sampled mask spans.

    Every frame starts a span of span_len with prob mask_start_prob; spans
    clip at the sequence end. An empty union forces one random span.
    """
    if num_frames < 1:
        return np.zeros(0, dtype=np.int64)
    starts = np.flatnonzero(rng.random(num_frames) < policy.mask_start_prob)
    if len(starts) == 0 and policy.min_masked_frames > 0:
        starts = np.array([rng.integers(num_frames)])
    masked = np.zeros(num_frames, dtype=bool)
    for s in starts:
        masked[s:s + policy.span_len] = True
    return np.flatnonzero(masked).astype(np.int64)


def apply_mask(f: FeatureMatrix, policy: MaskPolicy,
               rng: np.random.Generator) -> tuple[FeatureMatrix, np.ndarray]:
    """Sample mask spans for an utterance.

    The features themselves are untouched: the substitution by the learned
    mask embedding happens after the input projection, inside forward().
    """
    return f, sample_mask_spans(f.num_frames, policy, rng)


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params: dict[str, Value] = {}
        rng = rng or np.random.default_rng(0)
        d, ffn = cfg.d_model, cfg.ffn_dim

        def w(name, shape):
            # xavier-uniform for projection matrices
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            self.params[name] = ad.param(rng.uniform(-limit, limit, size=shape))

        def emb(name, shape):
            self.params[name] = ad.param(rng.normal(0.0, 0.02, size=shape))

        def zeros(name, shape):
            self.params[name] = ad.param(np.zeros(shape))

        def ones(name, shape):
            self.params[name] = ad.param(np.ones(shape))

        w("in_proj.W", (cfg.input_dim, d))
        zeros("in_proj.b", (d,))
        emb("mask_emb", (d,))
        emb("pos_emb", (cfg.max_positions, d))
        for i in range(cfg.n_layers):
            ones(f"layers.{i}.ln1.g", (d,))
            zeros(f"layers.{i}.ln1.b", (d,))
            for proj in ("q", "k", "v", "o"):
                w(f"layers.{i}.{proj}.W", (d, d))
                zeros(f"layers.{i}.{proj}.b", (d,))
            ones(f"layers.{i}.ln2.g", (d,))
            zeros(f"layers.{i}.ln2.b", (d,))
            w(f"layers.{i}.fc1.W", (d, ffn))
            zeros(f"layers.{i}.fc1.b", (ffn,))
            w(f"layers.{i}.fc2.W", (ffn, d))
            zeros(f"layers.{i}.fc2.b", (d,))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @staticmethod
    def param_count_formula(cfg: EncoderConfig) -> int:
        """Closed form: in_proj + mask + pos + per-block (2 LN, QKVO, 2 FC)."""
        d, ffn = cfg.d_model, cfg.ffn_dim
        block = 2 * (2 * d) + 4 * (d * d + d) + (d * ffn + ffn) + (ffn * d + d)
        return (cfg.input_dim * d + d) + d + cfg.max_positions * d \
            + cfg.n_layers * block

    def forward(self, f: FeatureMatrix, masked_indices: np.ndarray | None = None,
                train: bool = False,
                dropout_rng: np.random.Generator | None = None) -> EncoderOutput:
        """Run the encoder; returns all layer outputs plus the projected input."""
        cfg, p = self.cfg, self.params
        if f.dim != cfg.input_dim:
            raise ValueError(f"input dim {f.dim} != configured {cfg.input_dim}")
        t = f.num_frames
        if t > cfg.max_positions:
            raise ValueError(f"{t} frames > max_positions {cfg.max_positions}")
        if masked_indices is None:
            masked_indices = np.zeros(0, dtype=np.int64)
        if t == 0:
            empty = ad.const(np.zeros((0, cfg.d_model)))
            return EncoderOutput([empty] * (cfg.n_layers + 1), masked_indices)

        drop = lambda v: ad.dropout(v, cfg.dropout, dropout_rng, train)
        n_heads = cfg.n_heads
        dh = cfg.d_model // n_heads

        h = ad.matmul(ad.const(f.data), p["in_proj.W"]) + p["in_proj.b"]
        if len(masked_indices):
            h = ad.mask_rows(h, masked_indices, p["mask_emb"])
        h = h + ad.gather_rows(p["pos_emb"], np.arange(t))
        hidden = [h]

        for i in range(cfg.n_layers):
            a = ad.layer_norm(h, p[f"layers.{i}.ln1.g"], p[f"layers.{i}.ln1.b"])
            q = drop(ad.matmul(a, p[f"layers.{i}.q.W"]) + p[f"layers.{i}.q.b"])
            k = drop(ad.matmul(a, p[f"layers.{i}.k.W"]) + p[f"layers.{i}.k.b"])
            v = drop(ad.matmul(a, p[f"layers.{i}.v.W"]) + p[f"layers.{i}.v.b"])
            qh = ad.transpose(ad.reshape(q, (t, n_heads, dh)), (1, 0, 2))
            kh = ad.transpose(ad.reshape(k, (t, n_heads, dh)), (1, 0, 2))
            vh = ad.transpose(ad.reshape(v, (t, n_heads, dh)), (1, 0, 2))
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))),
                              1.0 / math.sqrt(dh))
            ctx = ad.matmul(ad.softmax(scores, axis=-1), vh)
            ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t, cfg.d_model))
            h = h + (ad.matmul(ctx, p[f"layers.{i}.o.W"]) + p[f"layers.{i}.o.b"])

            b = ad.layer_norm(h, p[f"layers.{i}.ln2.g"], p[f"layers.{i}.ln2.b"])
            z = drop(ad.gelu(ad.matmul(b, p[f"layers.{i}.fc1.W"]) + p[f"layers.{i}.fc1.b"]))
            z = drop(ad.matmul(z, p[f"layers.{i}.fc2.W"]) + p[f"layers.{i}.fc2.b"])
            h = h + z
            hidden.append(h)

        return EncoderOutput(hidden, np.asarray(masked_indices, dtype=np.int64))


class HubertHead:
    """Cosine-similarity classification head with temperature."""

    def __init__(self, d_model: int, k: int, embed_dim: int = 256,
                 tau: float = 0.1, rng: np.random.Generator | None = None):
        if tau <= 0:
            raise ValueError("tau must be > 0")
        rng = rng or np.random.default_rng(0)
        self.k = k
        self.tau = tau
        self.params = {
            "W": ad.param(rng.normal(0.0, 0.02, size=(d_model, embed_dim))),
            "m": ad.param(rng.normal(0.0, 0.02, size=(k, embed_dim))),
        }

    def logits(self, o: Value) -> Value:
        cos = ad.cosine_pairs(ad.matmul(o, self.params["W"]), self.params["m"])
        return ad.scale(cos, 1.0 / self.tau)


class CeHead:
    """Plain linear logit head."""

    def __init__(self, d_model: int, k: int, rng: np.random.Generator | None = None):
        if k < 2:
            raise ValueError("k must be >= 2")
        rng = rng or np.random.default_rng(0)
        self.k = k
        self.params = {"w": ad.param(rng.normal(0.0, 0.02, size=(d_model, k)))}

    def logits(self, o: Value) -> Value:
        return ad.matmul(o, self.params["w"])


def masked_nll(out: EncoderOutput, targets: np.ndarray, head) -> tuple[Value, int, int]:
    """Summed NLL over masked frames, plus (count, correct) for accuracy."""
    idx = out.masked_indices
    t = out.hidden[-1].shape[0]
    targets = np.asarray(targets)
    if len(targets) != t:
        raise ValueError(f"{len(targets)} labels for {t} output frames")
    if len(targets) and (targets.min() < 0 or targets.max() >= head.k):
        raise ValueError(f"label outside [0, {head.k})")
    if len(idx) == 0:
        return ad.const(0.0), 0, 0
    o = ad.gather_rows(out.hidden[-1], idx)
    logits = head.logits(o)
    nll = ad.cross_entropy(logits, targets[idx])
    correct = int((logits.data.argmax(axis=1) == targets[idx]).sum())
    return ad.vsum(nll), len(idx), correct


def loss_hubert(out: EncoderOutput, targets: np.ndarray, head: HubertHead) -> Value:
    """Mean over masked frames of the cosine/temperature softmax NLL."""
    total, count, _ = masked_nll(out, targets, head)
    return ad.scale(total, 1.0 / max(count, 1))


def loss_ce(out: EncoderOutput, targets, heads, dual: bool = False) -> Value:
    """Mean over masked frames of linear-head NLL; dual averages two heads."""
    if not dual:
        total, count, _ = masked_nll(out, targets, heads)
        return ad.scale(total, 1.0 / max(count, 1))
    (t1, t2), (h1, h2) = targets, heads
    s1, c1, _ = masked_nll(out, t1, h1)
    s2, c2, _ = masked_nll(out, t2, h2)
    return ad.scale(s1 + s2, 0.5 / max(c1, 1))
