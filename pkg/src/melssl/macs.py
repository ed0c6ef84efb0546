"""Multiply-accumulate accounting per one second of input speech.

Counting conventions (weights only, no biases/norms/activations):
  conv1d    : out_rate * out_ch * (in_ch / groups) * kernel
  linear    : rate * in_dim * out_dim
  attention : rate * 4 * d^2  (Q, K, V, O)  +  2 * rate * context * d
  ffn       : rate * 2 * d * hidden
Rates are per-second (a conv of stride s divides the rate by s); the
attention context defaults to the frame rate, i.e. the frames of a 1 s
utterance.

ArchSpec text format: INI with an [input] section (rate, dim) followed by
one section per layer entry carrying type=conv1d|linear|attention|ffn, its
dimension keys, and optional repeat/group.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field


@dataclass
class LayerEntry:
    kind: str
    name: str
    group: str = ""
    repeat: int = 1
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repeat < 1:
            raise ValueError(f"{self.name}: repeat must be >= 1")
        for v in self.args.values():
            if isinstance(v, (int, float)) and v <= 0:
                raise ValueError(f"{self.name}: non-positive dimension")


@dataclass
class ArchSpec:
    name: str
    input_rate: float       # per-second units entering the first layer
    input_dim: int          # channels (conv front ends) or feature dim
    layers: list[LayerEntry] = field(default_factory=list)


@dataclass
class MacsReport:
    name: str
    rows: list[tuple[str, str, int, float]]   # (layer, group, repeat, macs)
    total: float

    def group_totals(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for _, group, _, macs in self.rows:
            out[group] = out.get(group, 0.0) + macs
        return out

    def group_share(self, group: str) -> float:
        return self.group_totals().get(group, 0.0) / self.total

    def table(self) -> str:
        lines = [f"MACs per 1 s of speech: {self.name}",
                 f"{'layer':<22}{'group':<16}{'repeat':>7}{'MACs':>16}"]
        for name, group, repeat, macs in self.rows:
            lines.append(f"{name:<22}{group:<16}{repeat:>7}{macs:>16,.0f}")
        for group, macs in self.group_totals().items():
            lines.append(f"{'[' + group + ']':<45}{macs:>16,.0f}"
                         f"  ({macs / self.total:6.1%})")
        lines.append(f"{'TOTAL':<45}{self.total:>16,.0f}"
                     f"  ({self.total / 1e9:.3f} G/s)")
        return "\n".join(lines)


def macs_count(spec: ArchSpec) -> MacsReport:
    """Walk the layer list tracking rate and width; error on dim mismatches."""
    rate = float(spec.input_rate)
    dim = spec.input_dim
    rows = []
    for entry in spec.layers:
        a = entry.args
        subtotal = 0.0
        for _ in range(entry.repeat):
            if entry.kind == "conv1d":
                in_ch = a.get("in_ch", dim)
                if in_ch != dim:
                    raise ValueError(f"{entry.name}: in_ch {in_ch} != current {dim}")
                groups = a.get("groups", 1)
                if in_ch % groups or a["out_ch"] % groups:
                    raise ValueError(f"{entry.name}: channels not divisible by groups")
                rate = rate / a["stride"]
                subtotal += rate * a["out_ch"] * (in_ch // groups) * a["kernel"]
                dim = a["out_ch"]
            elif entry.kind == "linear":
                if a.get("in_dim", dim) != dim:
                    raise ValueError(f"{entry.name}: in_dim != current {dim}")
                subtotal += rate * dim * a["out_dim"]
                dim = a["out_dim"]
            elif entry.kind == "attention":
                d = a["d_model"]
                if d != dim:
                    raise ValueError(f"{entry.name}: d_model {d} != current {dim}")
                if d % a.get("heads", 1):
                    raise ValueError(f"{entry.name}: d_model not divisible by heads")
                context = a.get("context", rate)
                subtotal += rate * 4 * d * d + 2 * rate * context * d
            elif entry.kind == "ffn":
                d = a["d_model"]
                if d != dim:
                    raise ValueError(f"{entry.name}: d_model {d} != current {dim}")
                subtotal += rate * 2 * d * a["hidden"]
            else:
                raise ValueError(f"{entry.name}: unknown layer kind {entry.kind!r}")
        rows.append((entry.name, entry.group or entry.name, entry.repeat, subtotal))
    total = sum(m for _, _, _, m in rows)
    return MacsReport(spec.name, rows, total)


# --------------------------------------------------------------------------
# shipped presets
# --------------------------------------------------------------------------

_D, _FFN, _LAYERS = 768, 3072, 12
# wav2vec-2.0-lineage waveform front end: 512 channels throughout
_CONV_KERNELS = (10, 3, 3, 3, 3, 2, 2)
_CONV_STRIDES = (5, 2, 2, 2, 2, 2, 2)


def _transformer_entries(rate: float) -> list[LayerEntry]:
    return [
        LayerEntry("conv1d", "pos_conv", "transformer", 1,
                   {"out_ch": _D, "kernel": 128, "stride": 1, "groups": 16}),
        LayerEntry("attention", "attention", "transformer", _LAYERS,
                   {"d_model": _D, "heads": 12, "context": rate}),
        LayerEntry("ffn", "ffn", "transformer", _LAYERS,
                   {"d_model": _D, "hidden": _FFN}),
    ]


def _mel_spec(name: str, frame_rate: int, n_mels: int, concat: int) -> ArchSpec:
    layers = [LayerEntry("linear", "input_proj", "transformer", 1,
                         {"out_dim": _D})]
    layers += _transformer_entries(frame_rate)
    return ArchSpec(name, frame_rate, n_mels * concat, layers)


def _hubert_spec() -> ArchSpec:
    layers = []
    for i, (k, s) in enumerate(zip(_CONV_KERNELS, _CONV_STRIDES), 1):
        layers.append(LayerEntry("conv1d", f"conv{i}", "conv_frontend", 1,
                                 {"out_ch": 512, "kernel": k, "stride": s}))
    layers.append(LayerEntry("linear", "post_conv_proj", "transformer", 1,
                             {"out_dim": _D}))
    layers += _transformer_entries(50)
    return ArchSpec("hubert-base", 16000, 1, layers)


_PRESETS = {
    "melhubert-10ms": lambda: _mel_spec("melhubert-10ms", 100, 40, 1),
    "melhubert-20ms": lambda: _mel_spec("melhubert-20ms", 50, 40, 2),
    "melhubert-20ms-best": lambda: _mel_spec("melhubert-20ms-best", 50, 40, 2),
    "hubert-base-macs": _hubert_spec,
    "hubert-base": _hubert_spec,
}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def arch_preset(name: str) -> ArchSpec:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {preset_names()}")


_LAYER_KEYS = {
    "conv1d": ("out_ch", "kernel", "stride", "groups", "in_ch"),
    "linear": ("out_dim", "in_dim"),
    "attention": ("d_model", "heads", "context"),
    "ffn": ("d_model", "hidden"),
}


def load_arch(path: str) -> ArchSpec:
    """Parse the INI ArchSpec format documented in the module docstring."""
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    if "input" not in cp:
        raise ValueError(f"{path}: missing [input] section")
    rate = cp.getfloat("input", "rate")
    dim = cp.getint("input", "dim")
    layers = []
    for section in cp.sections():
        if section == "input":
            continue
        kind = cp.get(section, "type")
        if kind not in _LAYER_KEYS:
            raise ValueError(f"{path}: [{section}] unknown type {kind!r}")
        args = {}
        for key in _LAYER_KEYS[kind]:
            if cp.has_option(section, key):
                args[key] = cp.getfloat(section, key) if key == "context" \
                    else cp.getint(section, key)
        known = set(_LAYER_KEYS[kind]) | {"type", "repeat", "group"}
        unknown = [k for k in cp.options(section) if k not in known]
        if unknown:
            raise ValueError(f"{path}: [{section}] unknown keys {unknown}")
        layers.append(LayerEntry(kind, section, cp.get(section, "group", fallback=""),
                                 cp.getint(section, "repeat", fallback=1), args))
    return ArchSpec(os.path.splitext(os.path.basename(path))[0], rate, dim, layers)
