"""Structured pipeline configuration: INI sections mirroring module configs.

Every key has a dataclass default; unknown sections or keys are rejected
with an error that lists all offenders. CLI overrides use
`--set section.key=value`.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, fields

from .encoder import EncoderConfig, MaskPolicy
from .features import MelConfig
from .probes import ProbeConfig
from .similarity import CcaConfig
from .training import StagePlan, TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class RunSection:
    seed: int = 0
    work_dir: str = "runs/desk"
    workers: int = 1


@dataclass
class CorpusSection:
    num_utts: int = 50
    classes: int = 3
    num_speakers: int = 4


@dataclass
class KmeansSection:
    k: int = 100
    max_iters: int = 100
    tol: float = 1e-6


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 0
    dropout: float = 0.1
    max_positions: int = 1024


@dataclass
class Stage2Section:
    mode: str = "scratch"
    target_layer: int = 0       # 0 -> min(6, n_layers)
    k: int = 512


@dataclass
class AnalysisSection:
    cca_reg: float = 1e-4
    cca_max_dims: int = 0
    mel_cca_cap: int = 50000


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    mel: MelConfig = field(default_factory=MelConfig)
    kmeans: KmeansSection = field(default_factory=KmeansSection)
    model: ModelSection = field(default_factory=ModelSection)
    mask: MaskPolicy = field(default_factory=MaskPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def encoder_config(self) -> EncoderConfig:
        factor = 2 if self.train.frame_variant == "20ms" else 1
        m = self.model
        return EncoderConfig(input_dim=self.mel.n_mels * factor,
                             d_model=m.d_model, n_layers=m.n_layers,
                             n_heads=m.n_heads, ffn_dim=m.ffn_dim,
                             dropout=m.dropout, max_positions=m.max_positions)

    def stage_plan(self, stage: int, mode: str | None = None) -> StagePlan:
        layer = self.stage2.target_layer or min(6, self.model.n_layers)
        return StagePlan(stage=stage, stage2_mode=mode or self.stage2.mode,
                         target_layer=layer, stage2_k=self.stage2.k)

    def cca_config(self) -> CcaConfig:
        return CcaConfig(reg=self.analysis.cca_reg,
                         max_dims=self.analysis.cca_max_dims)


_SECTIONS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(section: str, key: str, text: str, target_type: type, problems: list[str]):
    text = text.strip()
    try:
        if target_type is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        return text
    except ValueError as exc:
        problems.append(f"[{section}] {key}: {exc}")
        return None


def _apply(cfg: PipelineConfig, section: str, key: str, raw: str,
           problems: list[str]) -> None:
    if section not in _SECTIONS:
        problems.append(f"unknown section [{section}]")
        return
    target = getattr(cfg, section)
    by_name = {f.name: f for f in fields(target)}
    if key not in by_name:
        problems.append(f"[{section}] unknown key {key!r}")
        return
    ftype = by_name[key].type
    if isinstance(ftype, str):
        ftype = {"int": int, "float": float, "str": str, "bool": bool}.get(ftype, str)
    value = _coerce(section, key, raw, ftype, problems)
    if value is not None:
        setattr(target, key, value)


def load_config(path: str | None = None, overrides: list[str] | None = None,
                preset: str | None = None) -> PipelineConfig:
    """Resolve defaults -> preset file -> config file -> --set overrides."""
    cfg = PipelineConfig()
    problems: list[str] = []

    def read_ini(ini_path: str):
        cp = configparser.ConfigParser()
        try:
            with open(ini_path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            problems.append(f"cannot read config {ini_path}: {exc}")
            return
        except configparser.Error as exc:
            problems.append(f"{ini_path}: {exc}")
            return
        for section in cp.sections():
            for key in cp.options(section):
                _apply(cfg, section, key, cp.get(section, key), problems)

    if preset:
        preset_path = os.path.join(os.path.dirname(__file__), "presets",
                                   preset + ".ini")
        if not os.path.exists(preset_path):
            problems.append(f"unknown preset {preset!r}")
        else:
            read_ini(preset_path)
    if path:
        read_ini(path)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"--set expects section.key=value, got {item!r}")
            continue
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw, problems)

    if not problems:
        try:  # dataclass validators may still object to combinations
            for name in _SECTIONS:
                section = getattr(cfg, name)
                type(section)(**asdict(section))
            cfg.encoder_config()
        except ValueError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    cp = configparser.ConfigParser()
    for name in _SECTIONS:
        cp[name] = {k: str(v) for k, v in asdict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# canonical artifact locations under work_dir
def paths(work_dir: str) -> dict[str, str]:
    j = os.path.join
    return {
        "corpus_dir": j(work_dir, "corpus"),
        "manifest": j(work_dir, "corpus", "manifest.tsv"),
        "alignments": j(work_dir, "corpus", "alignments.txt"),
        "utt2spk": j(work_dir, "corpus", "utt2spk.tsv"),
        "features_dir": j(work_dir, "features"),
        "norm_stats": j(work_dir, "features", "norm_stats.json"),
        "codebook": j(work_dir, "kmeans", "codebook.bin"),
        "labels": j(work_dir, "kmeans", "labels.txt"),
        "stage1_dir": j(work_dir, "stage1"),
        "stage1_ckpt": j(work_dir, "stage1", "checkpoint.bin"),
        "stage2_codebook": j(work_dir, "relabel", "codebook.bin"),
        "stage2_labels": j(work_dir, "relabel", "labels.txt"),
        "runs_dir": j(work_dir, "runs"),
    }
