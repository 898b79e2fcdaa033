"""Experiment configuration: sectioned key = value files, canonical form.

A config file is INI-style with five sections (model, world, train,
evaluation, output).  Parsing is strict: unknown sections or keys and
malformed values are reported with the line they came from.  Serializing
always emits the same section order, key order and value formatting, so
serialize(parse(text)) is a canonical form and parsing it again is the
identity.
"""

import configparser
import io
from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    """A config file problem, carrying the offending line when known."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    dim: int = 32
    heads: int = 4
    hidden_dim: int = 32
    hidden_tokens: int = 4
    latent_dim: int = 16
    time_steps: int = 100
    # world
    table_size: int = 64
    name_concentration: float = 12.0
    identity_dim: int = 16
    face_rows: int = 4
    text_tokens: int = 8
    noise_scale: float = 0.25
    mix_strength: float = 0.35
    id_weight: float = 1.0
    prompt_weight: float = 1.0
    target_scale: float = 1.0
    # train
    learning_rate: float = 0.0015
    steps: int = 300
    batch_size: int = 8
    beta_adapter: float = 1.0
    seed: int = 1
    ablation_mode: str = "full"
    optimizer: str = "adam"
    pretrain_steps: int = 800
    pretrain_lr: float = 0.01
    pretrain_batch: int = 4
    aux_weight: float = 0.1
    v_init_noise: float = 0.01
    double_attention: bool = False
    # evaluation
    eval_seeds: tuple = (1, 2, 3, 4, 5)
    eval_samples: int = 16
    # output
    output_dir: str = "runs"


MODES = ("full", "naive_concat", "no_ide", "no_ida")
OPTIMIZERS = ("adam", "sgd")

SECTIONS = {
    "model": ("dim", "heads", "hidden_dim", "hidden_tokens", "latent_dim", "time_steps"),
    "world": ("table_size", "name_concentration", "identity_dim", "face_rows",
              "text_tokens", "noise_scale", "mix_strength", "id_weight",
              "prompt_weight", "target_scale"),
    "train": ("learning_rate", "steps", "batch_size", "beta_adapter", "seed",
              "ablation_mode", "optimizer", "pretrain_steps", "pretrain_lr",
              "pretrain_batch", "aux_weight", "v_init_noise", "double_attention"),
    "evaluation": ("eval_seeds", "eval_samples"),
    "output": ("output_dir",),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _find_line(text, key):
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#")[0].split(";")[0]
        if "=" in stripped and stripped.split("=")[0].strip() == key:
            return i
    return None


def _parse_value(key, raw, text):
    kind = _FIELD_TYPES[key]
    line = _find_line(text, key)
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is tuple:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}", line) from None


def _validate(cfg, text=""):
    def fail(key, message):
        raise ConfigError(f"{key}: {message}", _find_line(text, key))

    if cfg.steps < 1:
        fail("steps", "must be at least 1")
    if cfg.batch_size < 1:
        fail("batch_size", "must be at least 1")
    if cfg.learning_rate < 0:
        fail("learning_rate", "must be non-negative")
    if cfg.seed < 0:
        fail("seed", "must be non-negative")
    if cfg.ablation_mode not in MODES:
        fail("ablation_mode", f"must be one of {', '.join(MODES)}")
    if cfg.optimizer not in OPTIMIZERS:
        fail("optimizer", f"must be one of {', '.join(OPTIMIZERS)}")
    if cfg.dim % cfg.heads != 0:
        fail("heads", f"must divide dim {cfg.dim}")
    if cfg.latent_dim < cfg.identity_dim:
        fail("latent_dim", "must be at least identity_dim")
    if cfg.dim < cfg.latent_dim:
        fail("dim", "must be at least latent_dim")
    if cfg.text_tokens < 3:
        fail("text_tokens", "needs two identity slots plus at least one scene token")
    if cfg.time_steps < 1:
        fail("time_steps", "must be at least 1")
    if not cfg.eval_seeds:
        fail("eval_seeds", "must list at least one seed")
    return cfg


def parse_config(text):
    """Parse sectioned key = value text into an ExperimentConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line) from None

    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]",
                              _find_section_line(text, section))
        for key in parser[section]:
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key} in [{section}]",
                                  _find_line(text, key))
            values[key] = _parse_value(key, parser[section][key], text)
    return _validate(ExperimentConfig(**values), text)


def _find_section_line(text, section):
    needle = f"[{section}]"
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip() == needle:
            return i
    return None


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(cfg):
    """Canonical text form: fixed section and key order, repr floats."""
    out = io.StringIO()
    for s_index, (section, keys) in enumerate(SECTIONS.items()):
        if s_index:
            out.write("\n")
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
    return out.getvalue()


def apply_overrides(cfg, **overrides):
    """Replace fields, dropping None values, then re-validate."""
    real = {k: v for k, v in overrides.items() if v is not None}
    return _validate(replace(cfg, **real))
