"""Run configuration: flat ``key = value`` text with sections, plus overrides.

Every key maps to a field of one of the section dataclasses below.  The
resolved configuration (all defaults materialized) is serialized in a fixed
order, so identical configurations produce identical text and hashes.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

from .controller import IndicatorConfig
from .data import TaskSpec, input_len, input_vocab
from .model import MGRITConfig, ModelConfig
from .tensor import LN_EPS

MODES = ("serial", "layer_parallel", "switching")
OPTIMIZERS = ("sgd", "adam", "adamw")
TASK_ARCH = {"token_classification": "encoder", "copy_sequence": "decoder", "tiny_translation": "encdec"}


class ConfigError(ValueError):
    pass


@dataclass
class ModelSettings:
    """User-facing model shape; vocabulary and lengths come from the task."""

    d: int = 32
    heads: int = 2
    ff: int = 64
    layers: int = 8
    enc_layers: int = 4
    dec_layers: int = 4
    buffer_open: int = 0
    buffer_close: int = 0
    h: float | None = None
    dropout: float = 0.0
    init_std: float = 0.02
    depth_scaled_init: bool = False
    eps: float = LN_EPS


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    momentum: float = 0.0

    def __post_init__(self):
        if self.name not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class StressConfig:
    """Scale the weights of the last ``layers`` blocks by ``scale`` at batch ``at``."""

    at: int = -1
    layers: int = 0
    scale: float = 1.0


@dataclass
class RunSettings:
    mode: str = "serial"
    seed: int = 0
    epochs: int = 1
    batch_size: int = 8
    workers: int = 1
    switch_at: int = -1  # force the switch to serial at this batch

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("epochs, batch_size and workers must be >= 1")


@dataclass
class TrainConfig:
    run: RunSettings = field(default_factory=RunSettings)
    task: TaskSpec = field(default_factory=lambda: TaskSpec("token_classification"))
    model: ModelSettings = field(default_factory=ModelSettings)
    mgrit: MGRITConfig = field(default_factory=MGRITConfig)
    indicator: IndicatorConfig = field(default_factory=IndicatorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stress: StressConfig = field(default_factory=StressConfig)

    def model_config(self) -> ModelConfig:
        t = self.task
        m = self.model
        arch = TASK_ARCH[t.kind]
        encdec = arch == "encdec"
        return ModelConfig(
            arch=arch,
            vocab=input_vocab(t),
            n_out=t.classes if t.kind == "token_classification" else t.vocab,
            seq_len=input_len(t),
            tgt_vocab=t.vocab + 1 if encdec else 0,
            tgt_len=t.seq_len if encdec else 0,
            d=m.d,
            heads=m.heads,
            ff=m.ff,
            layers=m.layers,
            enc_layers=m.enc_layers if encdec else 0,
            dec_layers=m.dec_layers if encdec else 0,
            buffer_open=m.buffer_open,
            buffer_close=m.buffer_close,
            h=m.h,
            dropout=m.dropout,
            init_std=m.init_std,
            depth_scaled_init=m.depth_scaled_init,
            eps=m.eps,
        )


SECTIONS = [f.name for f in dataclasses.fields(TrainConfig)]


def _section_types(name):
    cls = typing.get_type_hints(TrainConfig)[name]
    return cls, typing.get_type_hints(cls)


def _parse_value(key, text, tp):
    text = text.strip()
    try:
        if tp in (float | None, typing.Optional[float]):
            return None if text.lower() in ("", "none", "auto") else float(text)
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None


def _format_value(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _candidates(key: str) -> list:
    return [s for s in SECTIONS if key in _section_types(s)[1]]


def _qualify(key: str) -> str:
    """``mode`` -> ``run.mode``; unique bare keys resolve to their section."""
    if "." in key:
        return key
    hits = _candidates(key)
    if len(hits) == 1:
        return f"{hits[0]}.{key}"
    if "run" in hits:
        return f"run.{key}"
    return key


def build(values: dict) -> TrainConfig:
    """Construct from ``{"section.key": "text"}``; unknown keys are reported together."""
    unknown, ambiguous = [], []
    grouped = {s: {} for s in SECTIONS}
    for raw_key, text in values.items():
        key = _qualify(raw_key)
        sec, _, name = key.partition(".")
        if not name and len(_candidates(key)) > 1:
            ambiguous.append(f"{key} ({', '.join(f'{s}.{key}' for s in _candidates(key))})")
            continue
        if sec not in grouped or name not in _section_types(sec)[1]:
            unknown.append(raw_key)
            continue
        grouped[sec][name] = _parse_value(key, text, _section_types(sec)[1][name])
    problems = []
    if unknown:
        problems.append("unknown config keys: " + ", ".join(sorted(unknown)))
    if ambiguous:
        problems.append("ambiguous config keys: " + ", ".join(sorted(ambiguous)))
    if problems:
        raise ConfigError("; ".join(problems))
    parts = {}
    for sec, kw in grouped.items():
        cls, _ = _section_types(sec)
        if sec == "task" and "kind" not in kw:
            kw["kind"] = "token_classification"
        try:
            parts[sec] = cls(**kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    cfg = TrainConfig(**parts)
    try:
        cfg.model_config()
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None
    return cfg


def parse_text(text: str, overrides=()) -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            values[f"{sec}.{k}"] = v
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value: {item!r}")
        values[key.strip()] = val
    return build(values)


def load(path, overrides=()) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, overrides)


def dump(cfg: TrainConfig) -> str:
    lines = []
    for sec in SECTIONS:
        part = getattr(cfg, sec)
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(part):
            lines.append(f"{f.name} = {_format_value(getattr(part, f.name))}")
        lines.append("")
    return "\n".join(lines)


def content_hash(text: str) -> str:
    """Git blob hash of ``text``."""
    raw = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


@dataclass
class RunManifest:
    config_text: str
    config_hash: str
    out_dir: str

    @classmethod
    def create(cls, cfg: TrainConfig, out_dir) -> "RunManifest":
        text = dump(cfg)
        return cls(text, content_hash(text), str(out_dir))

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# config_hash = {self.config_hash}\n# out_dir = {self.out_dir}\n")
            f.write(self.config_text)
