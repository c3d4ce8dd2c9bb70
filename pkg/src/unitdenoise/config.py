"""Flat, typed key-value pipeline configuration with section prefixes.

The format is line-oriented `section.key = value` (comments with '#'), so
configs stay diffable and hashable; parse -> serialise -> parse is a fixed
point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(Exception):
    """Invalid configuration; the message carries the offending field path."""


@dataclass
class CorpusSection:
    num_utterances: int = 200
    num_unit_types: int = 8
    units_per_utterance: int = 10
    num_valid: int = 16
    num_test: int = 24

    def validate(self):
        if self.num_unit_types < 2:
            raise ConfigError("corpus.num_unit_types: need at least 2")
        if self.num_valid + self.num_test >= self.num_utterances:
            raise ConfigError("corpus.num_valid+num_test: no training utterances left")


@dataclass
class PathsSection:
    """Optional external inputs; '-' means use the synthetic generators."""

    clean_manifest: str = "-"
    features_dir: str = "-"  # pre-dumped SSLF features (e.g. from a bridge tool)


@dataclass
class EncoderSection:
    num_layers: int = 6
    dim: int = 64
    n_mels: int = 40
    window_ms: float = 25.0
    hop_ms: float = 20.0

    def validate(self):
        if self.num_layers < 2:
            raise ConfigError("encoder.num_layers: need at least 2")
        if self.dim < 8:
            raise ConfigError("encoder.dim: need at least 8")


@dataclass
class QuantizerSection:
    k: int = 16
    layer_index: int = 4
    subset_fraction: float = 0.3
    max_iters: int = 100

    def validate(self):
        if self.k < 2:
            raise ConfigError("quantizer.k: need at least 2 clusters")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError("quantizer.subset_fraction: must be in (0, 1]")


@dataclass
class DenoiserSection:
    variant: str = "external"
    encoder_kind: str = "transformer"
    encoder_layers: int = 2
    decoder_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    ctc_train_weight: float = 0.3
    dropout: float = 0.1
    adapter_bottleneck: int = 16

    def validate(self):
        if self.variant not in ("external", "adapter"):
            raise ConfigError("denoiser.variant: must be external or adapter")
        if self.encoder_kind not in ("transformer", "none"):
            raise ConfigError("denoiser.encoder_kind: must be transformer or none")


@dataclass
class TrainSection:
    epochs: int = 18
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    lr_decay: float = 0.999
    valid_beam: int = 1

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs/batch_size: must be positive")


@dataclass
class DecodeSection:
    beam_size: int = 5
    ctc_weight: float = 0.3

    def validate(self):
        if self.beam_size < 1:
            raise ConfigError("decode.beam_size: must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError("decode.ctc_weight: must be in [0, 1]")


@dataclass
class AdaptSection:
    environment: str = "steady"
    n_recordings: int = 5
    recording_len_s: float = 30.0
    utterances_per_recording: int = 100
    snr_low_db: float = 0.0
    snr_high_db: float = 20.0
    eval_snr_db: float = 5.0
    steps: int = 60
    lr: float = 2e-4

    def validate(self):
        if not 1 <= self.n_recordings <= 5:
            raise ConfigError("adapt.n_recordings: must be in 1..5")
        if self.environment not in ("steady", "babble", "impulse"):
            raise ConfigError("adapt.environment: must be steady, babble, or impulse")
        if not self.snr_low_db < self.snr_high_db:
            raise ConfigError("adapt.snr_low_db/snr_high_db: need low < high")


_SECTIONS = {
    "corpus": CorpusSection,
    "paths": PathsSection,
    "encoder": EncoderSection,
    "quantizer": QuantizerSection,
    "denoiser": DenoiserSection,
    "train": TrainSection,
    "decode": DecodeSection,
    "adapt": AdaptSection,
}


@dataclass
class PipelineConfig:
    seed: int = None
    corpus: CorpusSection = field(default_factory=CorpusSection)
    paths: PathsSection = field(default_factory=PathsSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)

    def validate(self):
        if self.seed is None:
            raise ConfigError("seed: a seed is mandatory")
        for name, section in _SECTIONS.items():
            sec = getattr(self, name)
            if hasattr(sec, "validate"):
                sec.validate()
        if self.quantizer.layer_index > self.encoder.num_layers:
            raise ConfigError("quantizer.layer_index: beyond the encoder's top layer")


def _convert(raw: str, ftype, path: str):
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is bool:
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {ftype.__name__}") from e


def parse_config(text: str) -> PipelineConfig:
    cfg = PipelineConfig()
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key == "seed":
            cfg.seed = _convert(raw, int, "seed")
            continue
        if "." not in key:
            raise ConfigError(f"{key}: unknown top-level key")
        section_name, _, field_name = key.partition(".")
        section_cls = _SECTIONS.get(section_name)
        if section_cls is None:
            raise ConfigError(f"{key}: unknown section {section_name!r}")
        section = getattr(cfg, section_name)
        for f in fields(section_cls):
            if f.name == field_name:
                setattr(section, field_name, _convert(raw, type(f.default), key))
                break
        else:
            raise ConfigError(f"{key}: unknown field in section {section_name!r}")
    cfg.validate()
    return cfg


def serialize_config(cfg: PipelineConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for name, section_cls in _SECTIONS.items():
        section = getattr(cfg, name)
        for f in fields(section_cls):
            value = getattr(section, f.name)
            if isinstance(value, float):
                rendered = repr(value)
            else:
                rendered = str(value)
            lines.append(f"{name}.{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
