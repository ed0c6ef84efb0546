"""Two-stage pre-training orchestration.

Targets for the 20 ms variant come from the 10 ms label stream: frame t' of
the concatenated sequence predicts label 2t' (single target) or both 2t' and
2t'+1 (dual targets, two heads).

The per-step loss is sum-over-masked-frames / count across the effective
batch, so gradient accumulation is exactly equivalent to one large batch:
per-utterance graphs backpropagate unnormalized sums, and the accumulated
gradient is divided by the total masked count at update time.

Checkpoint file (little-endian): magic "MHCK", u32 version=1, u32 header
length, JSON header (configs, stats, codebook refs, step/epoch/seed, tensor
index), then the named float32 tensors in index order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value, backward
from .cluster import Codebook, LabelSeq, kmeans_fit, assign, save_codebook, save_labels
from .encoder import (CeHead, Encoder, EncoderConfig, HubertHead, MaskPolicy,
                      masked_nll, sample_mask_spans)
from .features import FeatureMatrix, MelConfig, NormStats, apply_norm, concat_frames
from .rng import stream_rng

_MAGIC = b"MHCK"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_utts: int = 8
    accum_steps: int = 4
    epochs: int = 10
    seed: int = 0
    loss: str = "ce"                # "ce" or "eq3"
    dual_targets: bool = False
    frame_variant: str = "20ms"     # "10ms" or "20ms"
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    max_steps: int = 0              # 0 = no cap
    hubert_embed_dim: int = 256
    hubert_tau: float = 0.1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if self.loss not in ("ce", "eq3"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.frame_variant not in ("10ms", "20ms"):
            raise ValueError(f"unknown frame_variant {self.frame_variant!r}")
        if self.dual_targets and self.frame_variant != "20ms":
            raise ValueError("dual targets only exist for the 20ms variant")


@dataclass
class StagePlan:
    stage: int = 1
    stage2_mode: str = "scratch"    # "scratch" or "continued"
    target_layer: int = 6
    stage2_k: int = 512

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.stage2_mode not in ("scratch", "continued"):
            raise ValueError(f"unknown stage2_mode {self.stage2_mode!r}")


def make_targets(labels: np.ndarray, variant: str, dual: bool = False,
                 expected_len: int | None = None):
    """Map a 10 ms label stream to model-frame targets.

    20ms single: target t' is the label of frame 2t' (the first frame of the
    concatenated pair). 20ms dual: (label(2t'), label(2t'+1)). Output length
    floor(T/2), matching concat_frames.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if variant == "10ms":
        out = labels
    elif variant == "20ms":
        t2 = len(labels) // 2
        if dual:
            out = (labels[0:2 * t2:2], labels[1:2 * t2:2])
        else:
            out = labels[0:2 * t2:2]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if expected_len is not None:
        got = len(out[0]) if isinstance(out, tuple) else len(out)
        if got != expected_len:
            raise ValueError(f"targets length {got} != features length {expected_len}")
    return out


class Adam:
    def __init__(self, params: dict[str, Value], cfg: TrainConfig):
        self.order = sorted(params)
        self.params = params
        self.lr, self.b1, self.b2, self.eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps
        self.m = {n: np.zeros_like(params[n].data) for n in self.order}
        self.v = {n: np.zeros_like(params[n].data) for n in self.order}
        self.t = 0

    def step(self, grad_scale: float = 1.0):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name in self.order:
            p = self.params[name]
            g = (p.grad * grad_scale if p.grad is not None
                 else np.zeros_like(p.data))
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[name] / bc1) / (
                np.sqrt(self.v[name] / bc2) + self.eps)

    def zero_grad(self):
        for name in self.order:
            self.params[name].grad = None


@dataclass
class TrainItem:
    utt_id: str
    features: FeatureMatrix                  # at the model frame rate, normalized
    targets: tuple[np.ndarray, ...]          # one or two label streams


def build_training_set(manifest, features_by_utt: dict, stats: NormStats,
                       labels_by_utt: dict[str, LabelSeq], cfg: TrainConfig,
                       labels_at_model_rate: bool = False) -> list[TrainItem]:
    """Normalize, concatenate (20 ms variant) and align targets per utterance."""
    items = []
    factor = 2 if cfg.frame_variant == "20ms" else 1
    for entry in manifest:
        f = apply_norm(features_by_utt[entry.utt_id], stats)
        model_f = concat_frames(f, factor)
        labels = labels_by_utt[entry.utt_id].labels
        if labels_at_model_rate:
            if len(labels) != model_f.num_frames:
                raise ValueError(f"{entry.utt_id}: {len(labels)} labels for "
                                 f"{model_f.num_frames} model frames")
            targets = (labels,)
        else:
            if len(labels) != f.num_frames:
                raise ValueError(f"{entry.utt_id}: {len(labels)} labels for "
                                 f"{f.num_frames} frames")
            made = make_targets(labels, cfg.frame_variant, cfg.dual_targets,
                                expected_len=model_f.num_frames)
            targets = made if isinstance(made, tuple) else (made,)
        items.append(TrainItem(entry.utt_id, model_f, targets))
    return items


def _build_heads(cfg: TrainConfig, enc_cfg: EncoderConfig, k: int, n_heads: int,
                 rng: np.random.Generator):
    heads = []
    for _ in range(n_heads):
        if cfg.loss == "eq3":
            heads.append(HubertHead(enc_cfg.d_model, k, cfg.hubert_embed_dim,
                                    cfg.hubert_tau, rng))
        else:
            heads.append(CeHead(enc_cfg.d_model, k, rng))
    return heads


def _all_params(encoder: Encoder, heads) -> dict[str, Value]:
    params = dict(encoder.params)
    for i, head in enumerate(heads):
        for name, p in head.params.items():
            params[f"heads.{i}.{name}"] = p
    return params


def _utterance_loss(encoder: Encoder, heads, item: TrainItem,
                    masked: np.ndarray, train: bool,
                    dropout_rng) -> tuple[Value, int, float]:
    out = encoder.forward(item.features, masked, train=train,
                          dropout_rng=dropout_rng)
    if len(heads) == 2:
        s1, c1, r1 = masked_nll(out, item.targets[0], heads[0])
        s2, _, r2 = masked_nll(out, item.targets[1], heads[1])
        return ad.scale(s1 + s2, 0.5), c1, 0.5 * (r1 + r2)
    total, count, correct = masked_nll(out, item.targets[0], heads[0])
    return total, count, float(correct)


def pretrain(plan: StagePlan, cfg: TrainConfig, enc_cfg: EncoderConfig,
             items: list[TrainItem], k: int, mel_cfg: MelConfig,
             stats: NormStats, policy: MaskPolicy, out_dir: str,
             codebook_refs: list[dict] | None = None,
             init_from: "Checkpoint | None" = None,
             metrics_path: str | None = None) -> "Checkpoint":
    """Run masked-prediction pre-training; returns the final checkpoint.

    Stage 2 "continued" passes the stage-1 checkpoint as init_from; heads are
    always freshly initialized (the target vocabulary changes).
    """
    os.makedirs(out_dir, exist_ok=True)
    if plan.stage == 2 and plan.stage2_mode == "continued" and init_from is None:
        raise ValueError("continued stage-2 pre-training needs a stage-1 checkpoint")
    n_heads = 2 if (cfg.dual_targets and plan.stage == 1) else 1

    encoder = Encoder(enc_cfg, stream_rng(cfg.seed, "init"))
    if init_from is not None:
        load_encoder_params(encoder, init_from)
    heads = _build_heads(cfg, enc_cfg, k, n_heads, stream_rng(cfg.seed, "init-head"))
    params = _all_params(encoder, heads)
    opt = Adam(params, cfg)

    metrics_path = metrics_path or os.path.join(out_dir, "metrics.csv")
    metrics = open(metrics_path, "w", encoding="utf-8")
    metrics.write("step,epoch,loss,masked_acc,lr\n")

    step = 0
    ckpt = None
    try:
        for epoch in range(cfg.epochs):
            order = stream_rng(cfg.seed, "shuffle", epoch).permutation(len(items))
            pos = 0
            while pos < len(order):
                span = cfg.batch_utts * cfg.accum_steps
                batch_pos = order[pos:pos + span]
                opt.zero_grad()
                loss_sum, count, correct = 0.0, 0, 0.0
                batch_utts = []
                for j, item_idx in enumerate(batch_pos):
                    item = items[item_idx]
                    batch_utts.append(item.utt_id)
                    mask_rng = stream_rng(cfg.seed, "masking", epoch, pos + j)
                    drop_rng = stream_rng(cfg.seed, "dropout", epoch, pos + j)
                    masked = sample_mask_spans(item.features.num_frames, policy,
                                               mask_rng)
                    total, n, ok = _utterance_loss(encoder, heads, item, masked,
                                                   True, drop_rng)
                    if n:
                        backward(total)
                    loss_sum += float(total.data)
                    count += n
                    correct += ok
                pos += span
                if count == 0:
                    continue
                loss = loss_sum / count
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (utts: {batch_utts})")
                opt.step(grad_scale=1.0 / count)
                step += 1
                metrics.write(f"{step},{epoch},{loss:.6f},{correct / count:.6f},"
                              f"{cfg.lr:g}\n")
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            ckpt = Checkpoint.from_model(encoder, heads, cfg, enc_cfg, mel_cfg,
                                         stats, policy, plan, step, epoch + 1,
                                         codebook_refs or [])
            save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), ckpt)
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        metrics.close()
    if ckpt is None:
        ckpt = Checkpoint.from_model(encoder, heads, cfg, enc_cfg, mel_cfg,
                                     stats, policy, plan, step, 0,
                                     codebook_refs or [])
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), ckpt)
    return ckpt


def evaluate_masked(encoder: Encoder, heads, items: list[TrainItem],
                    policy: MaskPolicy, seed: int = 0):
    """Held-out masked prediction without dropout; fixed per-utterance masks.

    Returns (loss, accuracy, masked_targets) where masked_targets collects the
    target labels at masked positions (first stream), for baseline accounting.
    """
    loss_sum, count, correct = 0.0, 0, 0.0
    masked_targets = []
    for idx, item in enumerate(items):
        rng = stream_rng(seed, "eval-mask", idx)
        masked = sample_mask_spans(item.features.num_frames, policy, rng)
        total, n, ok = _utterance_loss(encoder, heads, item, masked, False, None)
        loss_sum += float(total.data)
        count += n
        correct += ok
        if n:
            masked_targets.append(item.targets[0][masked])
    if count == 0:
        raise ValueError("no masked frames in evaluation set")
    targets = np.concatenate(masked_targets) if masked_targets else np.zeros(0, np.int64)
    return loss_sum / count, correct / count, targets


def unigram_baseline(train_items: list[TrainItem], eval_targets: np.ndarray) -> float:
    """Accuracy of always predicting the most frequent training target."""
    counts = np.bincount(np.concatenate([i.targets[0] for i in train_items]))
    best = int(counts.argmax())
    return float((eval_targets == best).mean()) if len(eval_targets) else 0.0


def extract_hidden(encoder: Encoder, items: list[TrainItem] | list[FeatureMatrix],
                   layer: int) -> list[FeatureMatrix]:
    """Layer activations (1-based), no masking, no dropout."""
    if not 1 <= layer <= encoder.cfg.n_layers:
        raise ValueError(f"layer {layer} out of range 1..{encoder.cfg.n_layers}")
    outs = []
    for item in items:
        f = item.features if isinstance(item, TrainItem) else item
        out = encoder.forward(f, None, train=False)
        outs.append(FeatureMatrix(out.hidden[layer].data.copy(),
                                  f.frame_period_ms, f.utt_id))
    return outs


def relabel(encoder: Encoder, items, layer: int, k: int, seed: int,
            codebook_path: str | None = None, labels_path: str | None = None):
    """Quantize hidden activations: extract, fit k-means, assign, write files."""
    hidden = extract_hidden(encoder, items, layer)
    cb = kmeans_fit(hidden, k, seed, source="hidden", layer=layer)
    seqs = [assign(cb, h) for h in hidden]
    if codebook_path:
        save_codebook(codebook_path, cb)
    if labels_path:
        save_labels(labels_path, seqs)
    return cb, {s.utt_id: s for s in seqs}


# --------------------------------------------------------------------------
# checkpointing
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, encoder: Encoder, heads, cfg: TrainConfig,
                   enc_cfg: EncoderConfig, mel_cfg: MelConfig, stats: NormStats,
                   policy: MaskPolicy, plan: StagePlan, step: int, epoch: int,
                   codebook_refs: list[dict]) -> "Checkpoint":
        tensors = {n: p.data.astype(np.float32)
                   for n, p in _all_params(encoder, heads).items()}
        head_info = {"count": len(heads), "loss": cfg.loss,
                     "k": heads[0].k if heads else 0,
                     "embed_dim": cfg.hubert_embed_dim, "tau": cfg.hubert_tau}
        header = {
            "encoder_config": asdict(enc_cfg),
            "mel_config": asdict(mel_cfg),
            "norm_stats": {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
            "train_config": asdict(cfg),
            "mask_policy": asdict(policy),
            "stage_plan": asdict(plan),
            "heads": head_info,
            "codebooks": codebook_refs,
            "step": step,
            "rng": {"seed": cfg.seed, "epoch": epoch},
        }
        return cls(header, tensors)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.header["encoder_config"])

    def mel_config(self) -> MelConfig:
        return MelConfig(**self.header["mel_config"])

    def norm_stats(self) -> NormStats:
        ns = self.header["norm_stats"]
        return NormStats(np.array(ns["mean"]), np.array(ns["std"]))

    def mask_policy(self) -> MaskPolicy:
        return MaskPolicy(**self.header["mask_policy"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.header["train_config"])

    def build_model(self):
        """Reconstruct encoder and heads with the stored parameters."""
        enc_cfg = self.encoder_config()
        encoder = Encoder(enc_cfg)
        load_encoder_params(encoder, self)
        info = self.header["heads"]
        cfg = self.train_config()
        heads = _build_heads(cfg, enc_cfg, info["k"], info["count"],
                             np.random.default_rng(0))
        for i, head in enumerate(heads):
            for name in head.params:
                head.params[name].data = self.tensors[f"heads.{i}.{name}"].copy()
        return encoder, heads


def load_encoder_params(encoder: Encoder, ckpt: Checkpoint) -> None:
    for name, p in encoder.params.items():
        src = ckpt.tensors[name]
        if src.shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {src.shape} != {p.data.shape}")
        p.data = src.copy()


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.tensors)
    header = dict(ckpt.header)
    header["tensor_index"] = [{"name": n, "shape": list(ckpt.tensors[n].shape)}
                              for n in names]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", 1, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[n], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        index = header.pop("tensor_index")
        tensors = {}
        for entry in index:
            shape = tuple(entry["shape"])
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n_items), dtype="<f4").reshape(shape)
            tensors[entry["name"]] = data.copy()
    return Checkpoint(header, tensors)
