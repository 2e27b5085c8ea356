"""Run configuration: one flat ``key = value`` namespace over nested dataclasses.

Keys without a dot are training fields (``method``, ``shots``, ``epochs``
...).  Dotted keys address a sub-config: ``prompt.M``, ``vision.n_layers``,
``text.model_dim``, ``data.noise_std``, ``pretrain.steps``,
``shift.angles``.  Tuples are written comma-separated, booleans as
``true``/``false``.  Example file::

    # quick run
    method = dcp
    shots = 4
    prompt.N = 3
    seeds = 0,1
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..encoders import EncoderConfig, text_config, vision_config
from ..prompts import METHODS, ConfigError, PromptConfig
from ..synthdata import DatasetSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch: int = 32
    lr: float = 1e-3
    clip: float = 1.0
    warmup: float = 0.05
    slot_len: int = 16
    seed: int = 0


@dataclass(frozen=True)
class ShiftConfig:
    # ladder of (rotation angle, noise multiplier) pairs; the first entry should be the identity
    angles: tuple = (0.0, 10.0, 20.0, 30.0, 45.0)
    noise_mults: tuple = (1.0, 1.0, 1.25, 1.5, 2.0)
    epochs: int = 5
    M: int = 8


@dataclass(frozen=True)
class RunConfig:
    method: str = "dcp"
    shots: int = 16
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 0.0035
    momentum: float = 0.9
    tau: float = 0.07
    seeds: tuple = (0, 1, 2)
    shot_list: tuple = (1, 2, 4, 8, 16)
    data_seed: int = 0
    encoder_seed: int = 0
    workers: int = 1
    prompt: PromptConfig = field(default_factory=PromptConfig)
    vision: EncoderConfig = field(default_factory=vision_config)
    text: EncoderConfig = field(default_factory=text_config)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("epochs", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.shots < 1 or any(s < 1 for s in self.shot_list):
            raise ConfigError("shots must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1 or not self.tau > 0:
            raise ConfigError("need learning_rate > 0, 0 <= momentum < 1, tau > 0")
        if len(self.shift.angles) != len(self.shift.noise_mults) or not self.shift.angles:
            raise ConfigError("shift.angles and shift.noise_mults must be non-empty and of equal length")

    @property
    def max_depth(self) -> int:
        return min(self.vision.n_layers, self.text.n_layers)


SECTIONS = {"prompt": PromptConfig, "vision": EncoderConfig, "text": EncoderConfig, "data": DatasetSpec,
            "pretrain": PretrainConfig, "shift": ShiftConfig}


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(cfg: RunConfig) -> dict[str, str]:
    """Every setting as ``key -> canonical string``, sorted by key."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for g in dataclasses.fields(value):
                out[f"{f.name}.{g.name}"] = _format(getattr(value, g.name))
        else:
            out[f.name] = _format(value)
    return dict(sorted(out.items()))


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    top, nested = {}, {s: {} for s in SECTIONS}
    for key, raw in pairs.items():
        head, _, tail = key.partition(".")
        if tail:
            if head not in SECTIONS:
                raise ConfigError(f"unknown config section {head!r} in {key!r}")
            sub = getattr(cfg, head)
            names = {f.name for f in dataclasses.fields(sub)}
            if tail not in names:
                raise ConfigError(f"unknown config key {key!r}")
            nested[head][tail] = _parse(raw, getattr(sub, tail), key)
        else:
            names = {f.name for f in dataclasses.fields(cfg)} - set(SECTIONS)
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _parse(raw, getattr(cfg, key), key)
    try:
        for sec, kw in nested.items():
            if kw:
                top[sec] = replace(getattr(cfg, sec), **kw)
        return replace(cfg, **top)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def parse_pairs(lines, origin: str = "<overrides>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    pairs = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        pairs.update(parse_pairs(text.splitlines(), str(path)))
    pairs.update(parse_pairs(overrides))
    return apply_overrides(RunConfig(), pairs)


def resolve(cfg: RunConfig) -> RunConfig:
    """Cap prompt depth at the encoder depth and check that prompts fit the sequences."""
    if cfg.prompt.N > cfg.max_depth:
        log.info("prompt depth N=%d capped at encoder depth %d", cfg.prompt.N, cfg.max_depth)
        cfg = replace(cfg, prompt=replace(cfg.prompt, N=cfg.max_depth))
    m = cfg.prompt.M
    if 1 + m + cfg.data.n_patches > cfg.vision.max_seq:
        raise ConfigError(f"M={m} visual prompts and {cfg.data.n_patches} patches overflow vision max_seq")
    if 2 + m + cfg.data.name_len > cfg.text.max_seq:
        raise ConfigError(f"M={m} text prompts and {cfg.data.name_len}-token names overflow text max_seq")
    if cfg.data.patch_dim != cfg.vision.patch_dim or cfg.data.vocab_size != cfg.text.vocab_size:
        raise ConfigError("data.patch_dim / data.vocab_size must match the encoder configs")
    cfg.prompt.check_dims(cfg.text.model_dim, cfg.vision.model_dim, cfg.max_depth)
    return cfg


def encoder_key(cfg: RunConfig) -> str:
    """Hash of everything the pretrained encoders depend on."""
    d = cfg.data
    world = {k: getattr(d, k) for k in ("world_seed", "vocab_size", "latent_dim", "n_patches", "patch_dim",
                                         "noise_std", "name_len")}
    blob = {"vision": dataclasses.asdict(cfg.vision), "text": dataclasses.asdict(cfg.text),
            "pretrain": dataclasses.asdict(cfg.pretrain), "world": world, "encoder_seed": cfg.encoder_seed}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]
