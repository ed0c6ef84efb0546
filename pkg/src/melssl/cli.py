"""Command-line pipeline driver.

Subcommands: synth, mel, kmeans, pretrain, relabel, probe, cca, macs,
purity. Every command resolves the INI config (defaults -> --preset ->
--config -> --set overrides), validates its inputs, writes artifacts under
the work directory, and records a run manifest (inputs/outputs + config
snapshot) under <work_dir>/runs/.

Exit codes: 0 ok, 2 configuration/validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import macs as macs_mod
from . import plots
from .audio import (load_alignments, load_manifest, load_utt2spk, read_wav,
                    synth_corpus)
from .cluster import assign, kmeans_fit, load_codebook, load_labels, purity, \
    save_codebook, save_labels
from .encoder import Encoder
from .features import (FeatureMatrix, NormStats, apply_norm, compute_logmel,
                       concat_frames, estimate_norm_stats, load_features,
                       save_features)
from .pipeline import ConfigError, PipelineConfig, dump_config, load_config, paths
from .probes import (ProbeConfig, estimate_f0, f0_probe_examples,
                     phone_probe_examples, probe_train, speaker_probe_examples)
from .rng import stream_rng
from .similarity import (LayerActivations, collect_activations, layer_names,
                         mel_cca, phone_cca)
from .training import (Checkpoint, TrainingDivergedError, build_training_set,
                       load_checkpoint, pretrain, relabel)


class MissingInputError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def _require(p: dict, *keys: str) -> None:
    missing = [f"{k}: {p[k]} (not found)" for k in keys if not os.path.exists(p[k])]
    if missing:
        raise MissingInputError(missing)


def _record_run(work_dir: str, command: str, cfg: PipelineConfig,
                inputs: list[str], outputs: list[str]) -> None:
    runs_dir = os.path.join(work_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    snapshot = os.path.join(runs_dir, f"{command}.config.ini")
    with open(snapshot, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    record = {"command": command, "argv": sys.argv[1:], "seed": cfg.run.seed,
              "config_snapshot": snapshot, "inputs": inputs, "outputs": outputs}
    with open(os.path.join(runs_dir, f"{command}.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def _save_stats(path: str, stats: NormStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"mean": stats.mean.tolist(), "std": stats.std.tolist()}, fh)


def _load_stats(path: str) -> NormStats:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return NormStats(np.array(d["mean"]), np.array(d["std"]))


def _feature_path(features_dir: str, utt_id: str) -> str:
    return os.path.join(features_dir, f"{utt_id}.mhf")


def _load_all_features(p: dict, manifest) -> dict[str, FeatureMatrix]:
    return {e.utt_id: load_features(_feature_path(p["features_dir"], e.utt_id),
                                    e.utt_id)
            for e in manifest}


def _model_rate_features(cfg: PipelineConfig, p: dict, manifest):
    """Normalized features at the model frame rate, per utterance."""
    stats = _load_stats(p["norm_stats"])
    factor = 2 if cfg.train.frame_variant == "20ms" else 1
    feats = []
    for e in manifest:
        f = load_features(_feature_path(p["features_dir"], e.utt_id), e.utt_id)
        feats.append(concat_frames(apply_norm(f, stats), factor))
    return feats


def _load_upstream(cfg: PipelineConfig, p: dict, args) -> tuple[Encoder, str]:
    """Encoder for probing/analysis: a checkpoint or random weights."""
    if getattr(args, "upstream", "checkpoint") == "random":
        enc = Encoder(cfg.encoder_config(), stream_rng(cfg.run.seed, "random-upstream"))
        return enc, "random"
    ckpt_path = getattr(args, "checkpoint", None) or p["stage1_ckpt"]
    if not os.path.exists(ckpt_path):
        raise MissingInputError([f"checkpoint: {ckpt_path} (not found)"])
    ckpt = load_checkpoint(ckpt_path)
    encoder, _ = ckpt.build_model()
    return encoder, ckpt_path


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, p: dict, args) -> int:
    manifest, _ = synth_corpus(cfg.corpus.num_utts, cfg.corpus.classes,
                               cfg.run.seed, p["corpus_dir"],
                               num_speakers=cfg.corpus.num_speakers)
    print(f"synth: {len(manifest)} utterances -> {p['corpus_dir']}")
    _record_run(cfg.run.work_dir, "synth", cfg, [],
                [p["manifest"], p["alignments"], p["utt2spk"]])
    return 0


def _mel_one(task) -> str:
    wav_path, out_path, mel_cfg, utt_id = task
    f = compute_logmel(read_wav(wav_path), mel_cfg, utt_id)
    save_features(out_path, f)
    return out_path


def cmd_mel(cfg: PipelineConfig, p: dict, args) -> int:
    _require(p, "manifest")
    manifest = load_manifest(p["manifest"])
    os.makedirs(p["features_dir"], exist_ok=True)
    tasks = [(e.path, _feature_path(p["features_dir"], e.utt_id), cfg.mel, e.utt_id)
             for e in manifest]
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
            list(pool.map(_mel_one, tasks))
    else:
        for task in tasks:
            _mel_one(task)
    # stats reduced in manifest order, independent of worker scheduling
    stats = estimate_norm_stats(
        load_features(_feature_path(p["features_dir"], e.utt_id), e.utt_id)
        for e in manifest)
    _save_stats(p["norm_stats"], stats)
    print(f"mel: {len(manifest)} utterances, D={cfg.mel.n_mels} -> {p['features_dir']}")
    _record_run(cfg.run.work_dir, "mel", cfg, [p["manifest"]],
                [p["features_dir"], p["norm_stats"]])
    return 0


def cmd_kmeans(cfg: PipelineConfig, p: dict, args) -> int:
    _require(p, "manifest", "norm_stats")
    manifest = load_manifest(p["manifest"])
    stats = _load_stats(p["norm_stats"])
    feats = [apply_norm(f, stats)
             for f in _load_all_features(p, manifest).values()]
    cb = kmeans_fit(feats, cfg.kmeans.k, cfg.run.seed,
                    max_iters=cfg.kmeans.max_iters, tol=cfg.kmeans.tol)
    seqs = [assign(cb, f) for f in feats]
    os.makedirs(os.path.dirname(p["codebook"]), exist_ok=True)
    save_codebook(p["codebook"], cb)
    save_labels(p["labels"], seqs)
    print(f"kmeans: k={cb.k} on {sum(len(s) for s in seqs)} frames -> {p['codebook']}")
    _record_run(cfg.run.work_dir, "kmeans", cfg,
                [p["features_dir"], p["norm_stats"]], [p["codebook"], p["labels"]])
    return 0


def cmd_pretrain(cfg: PipelineConfig, p: dict, args) -> int:
    stage = args.stage
    mode = args.stage2_mode or cfg.stage2.mode
    plan = cfg.stage_plan(stage, mode)
    if stage == 1:
        _require(p, "manifest", "norm_stats", "codebook", "labels")
        codebook_path, labels_path = p["codebook"], p["labels"]
        out_dir = p["stage1_dir"]
        init_from = None
        labels_at_model_rate = False
    else:
        _require(p, "manifest", "norm_stats", "stage2_codebook", "stage2_labels",
                 "stage1_ckpt")
        codebook_path, labels_path = p["stage2_codebook"], p["stage2_labels"]
        out_dir = os.path.join(cfg.run.work_dir, f"stage2_{plan.stage2_mode}")
        init_from = load_checkpoint(p["stage1_ckpt"]) \
            if plan.stage2_mode == "continued" else None
        labels_at_model_rate = True

    manifest = load_manifest(p["manifest"])
    stats = _load_stats(p["norm_stats"])
    cb = load_codebook(codebook_path)
    labels = load_labels(labels_path)
    train_cfg = cfg.train
    if stage == 2 and train_cfg.dual_targets:
        # hidden-state targets exist only at the model frame rate
        train_cfg = type(train_cfg)(**{**train_cfg.__dict__, "dual_targets": False})
    items = build_training_set(manifest, _load_all_features(p, manifest), stats,
                               labels, train_cfg,
                               labels_at_model_rate=labels_at_model_rate)
    ckpt = pretrain(plan, train_cfg, cfg.encoder_config(), items, cb.k, cfg.mel,
                    stats, cfg.mask, out_dir,
                    codebook_refs=[{"path": codebook_path, "k": cb.k,
                                    "source": cb.source, "layer": cb.layer}],
                    init_from=init_from)
    curves = plots.save_training_curves(os.path.join(out_dir, "metrics.csv"),
                                        os.path.join(out_dir, "metrics.png"))
    print(f"pretrain stage {stage}{' (' + mode + ')' if stage == 2 else ''}: "
          f"{ckpt.header['step']} steps -> {out_dir}")
    _record_run(cfg.run.work_dir, f"pretrain_stage{stage}", cfg,
                [labels_path, codebook_path],
                [os.path.join(out_dir, "checkpoint.bin"),
                 os.path.join(out_dir, "metrics.csv"), curves])
    return 0


def cmd_relabel(cfg: PipelineConfig, p: dict, args) -> int:
    _require(p, "manifest", "norm_stats", "stage1_ckpt")
    manifest = load_manifest(p["manifest"])
    ckpt = load_checkpoint(p["stage1_ckpt"])
    encoder, _ = ckpt.build_model()
    feats = _model_rate_features(cfg, p, manifest)
    plan = cfg.stage_plan(2)
    os.makedirs(os.path.dirname(p["stage2_codebook"]), exist_ok=True)
    cb, _seqs = relabel(encoder, feats, plan.target_layer, plan.stage2_k,
                        cfg.run.seed, p["stage2_codebook"], p["stage2_labels"])
    print(f"relabel: layer {plan.target_layer}, k={cb.k} -> {p['stage2_labels']}")
    _record_run(cfg.run.work_dir, "relabel", cfg, [p["stage1_ckpt"]],
                [p["stage2_codebook"], p["stage2_labels"]])
    return 0


def cmd_probe(cfg: PipelineConfig, p: dict, args) -> int:
    _require(p, "manifest", "norm_stats")
    task = args.task or cfg.probe.task
    probe_cfg = ProbeConfig(task=task, lr=cfg.probe.lr, epochs=cfg.probe.epochs,
                            seed=cfg.run.seed, train_frac=cfg.probe.train_frac)
    manifest = load_manifest(p["manifest"])
    feats = _model_rate_features(cfg, p, manifest)

    if args.upstream == "mel":
        acts = [LayerActivations(f.utt_id, f.frame_period_ms, [f.data]) for f in feats]
        upstream_name = "mel"
        labels = ["mel"]
    else:
        encoder, upstream_name = _load_upstream(cfg, p, args)
        acts = collect_activations(encoder, feats)
        labels = layer_names(encoder.cfg.n_layers)

    if task == "phone_frame":
        _require(p, "alignments")
        examples = phone_probe_examples(acts, load_alignments(p["alignments"]))
    elif task == "speaker":
        _require(p, "utt2spk")
        examples = speaker_probe_examples(acts, load_utt2spk(p["utt2spk"]))
    else:
        f0_by_utt = {e.utt_id: estimate_f0(read_wav(e.path)) for e in manifest}
        hop = 2 if cfg.train.frame_variant == "20ms" else 1
        examples = f0_probe_examples(acts, f0_by_utt, hop_factor=hop)

    result = probe_train(examples, probe_cfg)
    out_dir = os.path.join(cfg.run.work_dir, f"probe_{task}")
    os.makedirs(out_dir, exist_ok=True)
    metrics_csv = os.path.join(out_dir, "metrics.csv")
    with open(metrics_csv, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        fh.write(f"upstream,{upstream_name}\n")
        for k, val in result.metrics.items():
            fh.write(f"{k},{val:.6f}\n")
    weights_csv = os.path.join(out_dir, "layer_weights.csv")
    with open(weights_csv, "w", encoding="utf-8") as fh:
        fh.write("layer,weight\n")
        for name, w in zip(labels, result.layer_weights):
            fh.write(f"{name},{w:.6f}\n")
    fig = plots.save_layer_weights(result.layer_weights,
                                   os.path.join(out_dir, "layer_weights.png"),
                                   labels)
    print(f"probe {task} on {upstream_name}: " +
          ", ".join(f"{k}={val:.4f}" for k, val in result.metrics.items()))
    _record_run(cfg.run.work_dir, f"probe_{task}", cfg, [upstream_name],
                [metrics_csv, weights_csv, fig])
    return 0


def cmd_cca(cfg: PipelineConfig, p: dict, args) -> int:
    _require(p, "manifest", "norm_stats")
    manifest = load_manifest(p["manifest"])
    feats = _model_rate_features(cfg, p, manifest)
    encoder, upstream_name = _load_upstream(cfg, p, args)
    acts = collect_activations(encoder, feats)
    if args.kind == "phone":
        _require(p, "alignments")
        scores = phone_cca(acts, load_alignments(p["alignments"]), cfg.cca_config())
    else:
        scores = mel_cca(acts, {f.utt_id: f for f in feats}, cfg.cca_config(),
                         cap=cfg.analysis.mel_cca_cap, seed=cfg.run.seed)
    out_dir = os.path.join(cfg.run.work_dir, "analysis")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"cca_{args.kind}.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("layer,score\n")
        for name, score in scores:
            fh.write(f"{name},{score:.6f}\n")
    fig = plots.save_layer_scores(os.path.join(out_dir, f"cca_{args.kind}.{args.fig_format}"),
                                  {upstream_name: scores},
                                  f"CCA similarity to {args.kind}")
    for name, score in scores:
        print(f"{name}\t{score:.4f}")
    _record_run(cfg.run.work_dir, f"cca_{args.kind}", cfg, [upstream_name],
                [csv_path, fig])
    return 0


def cmd_macs(cfg: PipelineConfig, p: dict, args) -> int:
    if args.arch:
        spec = macs_mod.load_arch(args.arch)
    else:
        spec = macs_mod.arch_preset(args.preset_arch)
    report = macs_mod.macs_count(spec)
    print(report.table())
    out_dir = os.path.join(cfg.run.work_dir, "macs")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{spec.name}.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("layer,group,repeat,macs\n")
        for name, group, repeat, m in report.rows:
            fh.write(f"{name},{group},{repeat},{m:.0f}\n")
        fh.write(f"TOTAL,,,{report.total:.0f}\n")
    fig = plots.save_macs_bars(report, os.path.join(out_dir, f"{spec.name}.png"))
    _record_run(cfg.run.work_dir, "macs", cfg, [args.arch or args.preset_arch],
                [csv_path, fig])
    return 0


def cmd_purity(cfg: PipelineConfig, p: dict, args) -> int:
    _require(p, "alignments")
    labels_path = args.labels or p["labels"]
    if not os.path.exists(labels_path):
        raise MissingInputError([f"labels: {labels_path} (not found)"])
    seqs = load_labels(labels_path)
    ali = load_alignments(p["alignments"])
    some = next(iter(seqs.values()))
    factor = some.frame_period_ms / ali.frame_period_ms
    if round(factor) != 1:
        ali = ali.decimate(int(round(factor)))
    report = purity(seqs.values(), ali)
    out_dir = os.path.join(cfg.run.work_dir, "purity")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "purity.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        fh.write(f"phone_purity,{report.phone_purity:.6f}\n")
        fh.write(f"cluster_purity,{report.cluster_purity:.6f}\n")
        fh.write(f"frames,{report.num_frames}\n")
    print(f"phone_purity={report.phone_purity:.4f} "
          f"cluster_purity={report.cluster_purity:.4f} "
          f"frames={report.num_frames}")
    _record_run(cfg.run.work_dir, "purity", cfg, [labels_path], [csv_path])
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melssl",
        description="Mel-spectrogram masked-prediction pre-training pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, pipeline_preset=True):
        sp.add_argument("-c", "--config", help="INI config file")
        if pipeline_preset:
            sp.add_argument("--preset", help="named pipeline preset (melhubert-10ms,"
                                             " melhubert-20ms, melhubert-20ms-best)")
        sp.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="override a config value")
        sp.add_argument("--work-dir", help="override [run] work_dir")
        sp.add_argument("--dry-run", action="store_true",
                        help="validate and print the resolved config, then exit")

    for name in ("synth", "mel", "kmeans", "relabel"):
        common(sub.add_parser(name))

    sp = sub.add_parser("pretrain")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2), default=1)
    sp.add_argument("--stage2-mode", choices=("scratch", "continued"))

    sp = sub.add_parser("probe")
    common(sp)
    sp.add_argument("--task", choices=("phone_frame", "speaker", "f0"))
    sp.add_argument("--checkpoint", help="upstream checkpoint path")
    sp.add_argument("--upstream", choices=("checkpoint", "random", "mel"),
                    default="checkpoint")

    sp = sub.add_parser("cca")
    common(sp)
    sp.add_argument("--kind", choices=("phone", "mel"), required=True)
    sp.add_argument("--checkpoint", help="upstream checkpoint path")
    sp.add_argument("--upstream", choices=("checkpoint", "random"),
                    default="checkpoint")
    sp.add_argument("--fig-format", choices=("png", "svg"), default="svg")

    sp = sub.add_parser("macs")
    common(sp, pipeline_preset=False)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", dest="preset_arch",
                       choices=macs_mod.preset_names())
    group.add_argument("--arch", help="ArchSpec INI file")

    sp = sub.add_parser("purity")
    common(sp)
    sp.add_argument("--labels", help="label file (default: stage-1 kmeans labels)")
    return parser


_COMMANDS = {
    "synth": cmd_synth, "mel": cmd_mel, "kmeans": cmd_kmeans,
    "pretrain": cmd_pretrain, "relabel": cmd_relabel, "probe": cmd_probe,
    "cca": cmd_cca, "macs": cmd_macs, "purity": cmd_purity,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, getattr(args, "preset", None))
        if args.work_dir:
            cfg.run.work_dir = args.work_dir
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(dump_config(cfg), end="")
        return 0
    p = paths(cfg.run.work_dir)
    os.makedirs(cfg.run.work_dir, exist_ok=True)
    try:
        return _COMMANDS[args.command](cfg, p, args)
    except (MissingInputError, ConfigError) as exc:
        print("validation errors:", file=sys.stderr)
        for problem in getattr(exc, "problems", [str(exc)]):
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # deliberate catch-all: map to exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
