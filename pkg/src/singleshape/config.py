"""Run configuration: a flat ``key = value`` file merging pyramid and training settings.

Recognized keys (defaults in parentheses)::

    scale_factor (0.75)   min_dim (15)     blur_sigma (0.5)
    num_scales (auto)     finest_size (128)
    alpha (10)            gp_weight (0.1)  iters_per_scale (2000)
    d_steps (3)           g_steps (3)      lr (1e-4)
    adam_beta1 (0.5)      adam_beta2 (0.999)
    sigma_hat (0.1)       seed (0)         channels (32)
    log_every (100)
    deterministic (true)  enable deterministic torch kernels
    log_file (train_log.jsonl)  training log, relative to the output directory

Lines starting with ``#`` or ``;`` are comments.  Unknown keys are rejected.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .train import TrainConfig
from .voxgrid import PyramidConfig

SECTION = "run"


class ConfigError(ValueError):
    """Invalid run configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    deterministic: bool = True
    log_file: str = "train_log.jsonl"

    def as_flat(self) -> dict:
        return {**asdict(self.pyramid), **asdict(self.train),
                "deterministic": self.deterministic, "log_file": self.log_file}


_PYRAMID = {f.name: f for f in fields(PyramidConfig)}
_TRAIN = {f.name: f for f in fields(TrainConfig)}
_OTHER = {"deterministic", "log_file"}
KNOWN_KEYS = sorted(set(_PYRAMID) | set(_TRAIN) | _OTHER)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "num_scales":
            return raw if raw == "auto" else int(raw)
        if key == "deterministic":
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        if key == "log_file":
            if not raw:
                raise ValueError("empty path")
            return raw
        if isinstance(default, bool):
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except (ValueError, KeyError):
        raise ConfigError(key, f"invalid value {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{SECTION}]\n{text}")
    except configparser.Error as exc:
        key = getattr(exc, "option", None) or "?"
        raise ConfigError(key, f"unparsable line ({exc.message.splitlines()[0]})") from None
    if parser.sections() != [SECTION]:
        raise ConfigError(parser.sections()[1], "sections are not supported")
    pyr, trn, other = {}, {}, {}
    defaults = RunConfig()
    for key, raw in parser.items(SECTION):
        if key in _PYRAMID:
            pyr[key] = _coerce(key, raw, getattr(defaults.pyramid, key))
        elif key in _TRAIN:
            trn[key] = _coerce(key, raw, getattr(defaults.train, key))
        elif key in _OTHER:
            other[key] = _coerce(key, raw, getattr(defaults, key))
        else:
            raise ConfigError(key, "unknown key")
    cfg = RunConfig(PyramidConfig(**pyr), TrainConfig(**trn), **other)
    validate(cfg, set(pyr) | set(trn))
    return cfg


def validate(cfg: RunConfig, keys=None) -> None:
    """Domain checks; each key is checked on its own so a failure names its key."""
    for part, default in ((cfg.pyramid, PyramidConfig()), (cfg.train, TrainConfig())):
        for f in fields(part):
            if keys is not None and f.name not in keys:
                continue
            probe = replace(default, **{f.name: getattr(part, f.name)})
            try:
                probe.validate()
            except ValueError as exc:
                raise ConfigError(f.name, str(exc)) from None
        part.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
