"""Training configuration and its TOML-style file format.

A minimal file is three lines::

    corpus = "data/corpus.txt"
    total_tokens = 409600
    mode = "muon_decoupled"

Optional ``[model]``, ``[optim]`` and ``[schedule]`` sections override the
corresponding defaults.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .model import ModelConfig, ModelError
from .optim import MODES, Hyper, OptimError, ScheduleConfig

DTYPES = ("float32", "float64")
DEFAULT_WARMUP_FRACTION = 0.05


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class TrainConfig:
    corpus: str
    total_tokens: int
    mode: str = "muon_decoupled"
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: Hyper = field(default_factory=Hyper)
    warmup_steps: Optional[int] = None  # None: 5% of total steps
    decay_fraction: float = 0.2
    batch_size: int = 16
    seq_len: int = 256
    seed: int = 0
    eval_interval: int = 100
    diagnostics_interval: int = 100
    checkpoint_interval: int = 0  # 0: final checkpoint only
    eval_sequences: int = 8
    dtype: str = "float32"
    record_wall_time: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}")
        for name in ("batch_size", "seq_len", "total_tokens", "eval_interval",
                     "diagnostics_interval", "eval_sequences"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.seq_len > self.model.max_seq_len:
            raise ConfigError("seq_len exceeds model.max_seq_len")
        if self.total_tokens % (self.batch_size * self.seq_len):
            raise ConfigError(
                f"total_tokens={self.total_tokens} is not a multiple of "
                f"batch_size*seq_len={self.batch_size * self.seq_len}")
        self.schedule  # validates warmup/decay

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def total_steps(self) -> int:
        return self.total_tokens // self.tokens_per_step

    @property
    def schedule(self) -> ScheduleConfig:
        warmup = self.warmup_steps
        if warmup is None:
            warmup = int(DEFAULT_WARMUP_FRACTION * self.total_steps)
        try:
            return ScheduleConfig(self.total_steps, warmup, self.decay_fraction)
        except OptimError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["hyper"] = Hyper(**d.get("hyper", {}))
        return cls(**d)


_TOP_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model", "hyper", "warmup_steps", "decay_fraction"}
_SECTIONS = {
    "model": {f.name for f in dataclasses.fields(ModelConfig)} - {"ffn_hadamard"},
    "optim": {f.name for f in dataclasses.fields(Hyper)},
    "schedule": {"warmup_steps", "decay_fraction"},
    "train": _TOP_KEYS,
}


def _line_of(text: str, section: Optional[str], key: Optional[str] = None) -> Optional[int]:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[\s*([\w.-]+)\s*\]", s)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def parse_config(text: str, env: Optional[dict] = None) -> TrainConfig:
    """Parse config text; every error carries the offending line number when known."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", int(m.group(1)) if m else None) from exc

    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {"model": {}, "optim": {}, "schedule": {}}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise ConfigError(f"unknown section [{key}]", _line_of(text, key))
            for k, v in value.items():
                if k not in _SECTIONS[key]:
                    raise ConfigError(f"unknown key {k!r} in [{key}]", _line_of(text, key, k))
                (top if key == "train" else sections[key])[k] = v
        elif key in _TOP_KEYS:
            top[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}", _line_of(text, None, key))

    for req in ("corpus", "total_tokens"):
        if req not in top:
            raise ConfigError(f"missing required key {req!r}")

    env = os.environ if env is None else env
    if env.get("OSPLAB_SEED"):
        try:
            top["seed"] = int(env["OSPLAB_SEED"])
        except ValueError as exc:
            raise ConfigError("OSPLAB_SEED must be an integer") from exc

    def build(section, factory, kwargs):
        try:
            return factory(**kwargs)
        except (TypeError, ModelError, OptimError, ConfigError) as exc:
            msg = str(exc)
            named = [k for k in kwargs if k in msg]
            line = None
            for k in named:
                line = _line_of(text, section, k) or _line_of(text, "train", k) or _line_of(text, "schedule", k)
                if line:
                    break
            if line is None and section:
                line = _line_of(text, section)
            where = f"[{section}] " if section else ""
            raise ConfigError(f"invalid {where}value: {msg}", line) from exc

    model = build("model", ModelConfig, sections["model"])
    hyper = build("optim", Hyper, sections["optim"])
    return build(None, TrainConfig, {**top, **sections["schedule"], "model": model, "hyper": hyper})


def load_config(path, env: Optional[dict] = None) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), env)
