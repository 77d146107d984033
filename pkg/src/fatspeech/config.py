"""Configuration dataclasses, the key=value config file, and seed derivation.

Config files are plain text, one "section.key = value" per line, # comments.
The same dotted keys work as CLI --set overrides. mask.lambda and mask.span_len
are accepted as aliases for the model's masking fields since they are the knobs
people actually reach for.
"""

import dataclasses
import os
import zlib
from dataclasses import dataclass, fields

import numpy as np

from .errors import DataError

SEED_ENV_VAR = "FATSPEECH_SEED"


@dataclass
class ModelConfig:
    kind: str = "fat_st"            # "fat_mlm" (no decoder/CTC) or "fat_st"
    d_model: int = 256
    heads: int = 4
    acoustic_layers: int = 6
    shared_layers: int = 6
    dec_layers: int = 6
    ffn_dim: int = 2048
    conv_channels: int = 256
    d_s: int = 80
    vocab_size: int = 0
    dropout: float = 0.1
    mask_ratio: float = 0.3
    span_len: int = 5
    lang_embeddings: bool = True
    tie_embeddings: bool = True
    activation: str = "relu"
    label_smoothing: float = 0.0
    precision: str = "float32"

    @property
    def dtype(self):
        if self.precision == "float32":
            return np.float32
        if self.precision == "float64":
            return np.float64
        raise DataError(f"unsupported precision {self.precision!r}")

    @property
    def head_dim(self):
        if self.d_model % self.heads:
            raise DataError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        return self.d_model // self.heads


@dataclass
class TrainConfig:
    steps: int = 1000
    warmup: int = 4000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    seed: int = 0
    ckpt_interval: int = 200
    average_last: int = 5
    weight_st: float = 1.0
    weight_mt: float = 1.0
    weight_mlm: float = 1.0
    weight_ctc: float = 0.3
    proportional: bool = False


@dataclass
class DataConfig:
    max_frames: int = 3000
    batch_frames: int = 6000
    batch_tokens: int = 1024


@dataclass
class InferConfig:
    beam: int = 5
    alpha: float = 0.0
    max_len_cap: int = 512
    smooth_bleu: bool = False


@dataclass
class Config:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    infer: InferConfig = dataclasses.field(default_factory=InferConfig)


_ALIASES = {
    "mask.lambda": "model.mask_ratio",
    "mask.span_len": "model.span_len",
}


def _coerce(raw, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw)


_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(annotation):
    # dataclass field annotations arrive as classes or as strings depending
    # on whether the defining module defers annotation evaluation
    if isinstance(annotation, str):
        return _TYPE_NAMES[annotation]
    return annotation


def set_key(config, dotted, raw):
    """Assign one dotted key (e.g. model.d_model) from its string value."""
    dotted = _ALIASES.get(dotted, dotted)
    parts = dotted.split(".")
    if len(parts) != 2:
        raise DataError(f"config key {dotted!r} is not of the form section.key")
    section_name, key = parts
    section = getattr(config, section_name, None)
    if section is None or not dataclasses.is_dataclass(section):
        raise DataError(f"unknown config section {section_name!r}")
    field_types = {f.name: f.type for f in fields(section)}
    if key not in field_types:
        raise DataError(f"unknown config key {dotted!r}")
    typ = _field_type(field_types[key])
    try:
        setattr(section, key, _coerce(raw, typ))
    except ValueError as e:
        raise DataError(f"bad value for {dotted}: {e}") from e


def parse_config_file(path, config=None):
    """Apply a key=value file onto a Config (a fresh one by default)."""
    config = config or Config()
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"{path}: cannot read config file ({e})") from e
    for n, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{n}: expected key = value, got {line.rstrip()!r}")
        key, raw = stripped.split("=", 1)
        set_key(config, key.strip(), raw)
    return config


def model_config_text(model_config, extras=None):
    """Canonical sorted key=value block describing a model (for checkpoints)."""
    pairs = {f"model.{f.name}": getattr(model_config, f.name)
             for f in fields(model_config)}
    if extras:
        pairs.update(extras)
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))


def model_config_from_text(text):
    """Parse the checkpoint config block back into (ModelConfig, extras dict)."""
    mc = ModelConfig()
    field_types = {f.name: f.type for f in fields(mc)}
    extras = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"checkpoint config line {n}: missing '=' in {line!r}")
        key, raw = line.split("=", 1)
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in field_types:
                raise DataError(f"checkpoint config: unknown field {key!r}")
            typ = _field_type(field_types[name])
            setattr(mc, name, _coerce(raw, typ))
        else:
            extras[key] = raw
    return mc, extras


def resolve_seed(cli_value):
    """CLI --seed wins; otherwise the FATSPEECH_SEED env var; otherwise 0."""
    if cli_value is not None:
        return int(cli_value)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"{SEED_ENV_VAR}={env!r} is not an integer") from None
    return 0


def derive_seed(*parts):
    """Stable 63-bit seed from a tuple of integers and/or strings.

    String parts are folded in by CRC so identifiers like utterance ids can
    key a draw without any run-to-run variation.
    """
    words = []
    for p in parts:
        if isinstance(p, str):
            p = zlib.crc32(p.encode("utf-8"))
        words.append(int(p) & 0x7FFFFFFF)
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
