"""Run configuration: an INI file with sections, overridable from the command line."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .datamodel import DEFAULT_SESSION_TIMEOUT, ConfigError
from .ranker import VARIANTS, ModelConfig, TrainConfig

# INI section of every field
SECTIONS = {
    "paths": ("catalog", "logs", "graph", "checkpoint", "reports"),
    "model": ("d", "d_c", "d_n", "widths", "heads", "max_len", "dropout", "geohash_precision",
              "backward_state", "score_mode", "per_type_w1", "masked_attention", "dtype"),
    "graph": ("top_k_queries", "keep_nonpositive_pmi", "window_multiplicity"),
    "train": ("batch_size", "epochs", "lr", "lr_floor", "seed", "variant"),
    "data": ("session_timeout", "split_seed"),
}


@dataclass(frozen=True)
class RunConfig:
    catalog: str = ""
    logs: str = ""
    graph: str = ""
    checkpoint: str = ""
    reports: str = ""
    d: int = 128
    d_c: int = 64
    d_n: int = 128
    widths: tuple[int, ...] = (128, 256)
    heads: int = 4
    max_len: int = 30
    dropout: float = 0.5
    geohash_precision: int = 10
    backward_state: str = "terminal"
    score_mode: str = "full"
    per_type_w1: bool = False
    masked_attention: bool = False
    dtype: str = "float32"
    top_k_queries: int = 4
    keep_nonpositive_pmi: bool = False
    window_multiplicity: bool = False
    batch_size: int = 64
    epochs: int = 40
    lr: float = 1e-3
    lr_floor: float = 0.0
    seed: int = 0
    variant: str = "full"
    session_timeout: float = DEFAULT_SESSION_TIMEOUT
    split_seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")
        if self.session_timeout <= 0:
            raise ConfigError("session_timeout must be positive")
        try:
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, d_c=self.d_c, d_n=self.d_n, widths=tuple(self.widths), heads=self.heads,
                           max_len=self.max_len, top_k=self.top_k_queries,
                           geohash_precision=self.geohash_precision, backward_state=self.backward_state,
                           dropout=self.dropout, variant=self.variant, score_mode=self.score_mode,
                           per_type_w1=self.per_type_w1, masked_attention=self.masked_attention,
                           dtype=self.dtype, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                           lr_floor=self.lr_floor, seed=self.seed)

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def fingerprint(self, exclude_paths: bool = True) -> str:
        d = self.to_json()
        if exclude_paths:
            for k in SECTIONS["paths"]:
                d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, raw):
    default = getattr(RunConfig, name)
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            if isinstance(raw, str):
                raw = [x for x in raw.replace(",", " ").split() if x]
            return tuple(int(x) for x in raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{field: value}`` pairs, skipping ``None`` values."""
    changes = {}
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        changes[k] = _convert(k, v)
    return replace(cfg, **changes)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the INI file (if any), then ``overrides``; validated."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = raw
        cfg = with_overrides(cfg, values)
    if overrides:
        cfg = with_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`load_config` reads back to ``cfg``."""
    parser = configparser.ConfigParser()
    d = cfg.to_json()
    for section, keys in SECTIONS.items():
        parser[section] = {k: (" ".join(str(x) for x in d[k]) if isinstance(d[k], list) else str(d[k]))
                           for k in keys}
    import io
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
