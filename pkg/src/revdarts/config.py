"""Run configuration: one JSON document, dotted ``--set`` overrides, field-level validation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

from .data import SHARDS, DatasetSpec
from .model import Dims
from .profiler import ProfileConfig
from .search import SearchConfig
from .seq2seq import TrainConfig
from .tensor import DTYPES

MODES = ("search", "derive", "train", "eval", "gradcheck", "memprofile")
STRATEGIES = ("darts", "uniform_sampling")
POOLINGS = ("max", "avg")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class SearchSection:
    steps: int = 2000
    checkpoint_interval: int = 500
    log_interval: int = 10
    batch_size: int = 16
    dropout: float = 0.1
    theta_lr: float = 5e-4
    warmup_frac: float = 0.04
    alpha_lr: float = 3e-4
    alpha_weight_decay: float = 1e-3
    alpha_init_std: float = 1e-3


@dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.04
    dropout: float = 0.1
    log_interval: int = 100
    shard: str = "retrain_train"


@dataclass
class EvalSection:
    shard: str = "test"
    batch_size: int = 64


@dataclass
class MemprofileSection:
    d: list = field(default_factory=lambda: [96])
    depths: list = field(default_factory=lambda: [1, 2, 4, 8])
    splits: int = 2
    batch_size: int = 8
    seq_len: int = 16
    byte_cap: Optional[int] = None


@dataclass
class GradcheckSection:
    quick: bool = False


@dataclass
class PathsSection:
    out: str = "run"
    checkpoint: Optional[str] = None  # derive: a checkpoint directory or its alpha.json
    arch: Optional[str] = None  # train / eval
    theta: Optional[str] = None  # eval: directory holding theta.bin + sidecar


@dataclass
class RunConfig:
    mode: str = "search"
    seed: int = 0
    dtype: str = "f32"
    pooling: str = "max"
    search_strategy: str = "darts"
    dims: Dims = field(default_factory=Dims)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    search: SearchSection = field(default_factory=SearchSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    memprofile: MemprofileSection = field(default_factory=MemprofileSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- conversion ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        cfg = _build(cls, doc, "")
        cfg.validate()
        return cfg

    # -- views for the library entry points ---------------------------------------------
    def search_config(self) -> SearchConfig:
        s = self.search
        return SearchConfig(dims=self.dims, dataset=self.dataset, pooling=self.pooling, seed=self.seed,
                            steps=s.steps, checkpoint_interval=s.checkpoint_interval, log_interval=s.log_interval,
                            batch_size=s.batch_size, dropout=s.dropout, dtype=self.dtype,
                            strategy=self.search_strategy, theta_lr=s.theta_lr, warmup_frac=s.warmup_frac,
                            alpha_lr=s.alpha_lr, alpha_weight_decay=s.alpha_weight_decay,
                            alpha_init_std=s.alpha_init_std)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr, warmup_frac=t.warmup_frac,
                           dropout=t.dropout, log_interval=t.log_interval, seed=self.seed, dtype=self.dtype,
                           shard=t.shard)

    def profile_config(self) -> ProfileConfig:
        p = self.memprofile
        return ProfileConfig(d=list(p.d), depths=list(p.depths), splits=p.splits, batch_size=p.batch_size,
                             seq_len=p.seq_len, pooling=self.pooling, byte_cap=p.byte_cap, seed=self.seed,
                             dtype=self.dtype)

    # -- validation ---------------------------------------------------------------------
    def validate(self) -> None:
        _choice("mode", self.mode, MODES)
        _choice("dtype", self.dtype, sorted(DTYPES))
        _choice("pooling", self.pooling, POOLINGS)
        _choice("search_strategy", self.search_strategy, STRATEGIES)
        _choice("train.shard", self.train.shard, SHARDS)
        _choice("eval.shard", self.eval.shard, SHARDS)
        if self.dims.vocab != self.dataset.vocab:
            raise ConfigError("dims.vocab", f"{self.dims.vocab} differs from dataset.vocab={self.dataset.vocab}")
        if self.dataset.max_len + 1 > self.dims.max_len:
            raise ConfigError("dims.max_len", f"{self.dims.max_len} leaves no room for dataset.max_len="
                                              f"{self.dataset.max_len} plus the end marker")
        try:
            self.dataset.validate()
        except ValueError as exc:
            raise ConfigError("dataset", str(exc)) from None
        for name, v in (("search.steps", self.search.steps), ("train.steps", self.train.steps)):
            if v < 0:
                raise ConfigError(name, "must be >= 0")
        for name, v in (("search.checkpoint_interval", self.search.checkpoint_interval),
                        ("search.log_interval", self.search.log_interval),
                        ("search.batch_size", self.search.batch_size),
                        ("train.log_interval", self.train.log_interval),
                        ("train.batch_size", self.train.batch_size),
                        ("eval.batch_size", self.eval.batch_size),
                        ("memprofile.splits", self.memprofile.splits),
                        ("memprofile.batch_size", self.memprofile.batch_size),
                        ("memprofile.seq_len", self.memprofile.seq_len)):
            if v <= 0:
                raise ConfigError(name, f"must be positive, got {v}")
        for name, v in (("search.dropout", self.search.dropout), ("train.dropout", self.train.dropout)):
            if not 0.0 <= v < 1.0:
                raise ConfigError(name, f"must be in [0, 1), got {v}")
        for d in self.memprofile.d:
            if not isinstance(d, int) or d <= 0 or d % self.memprofile.splits:
                raise ConfigError("memprofile.d", f"{d!r} is not a positive multiple of memprofile.splits")
        for depth in self.memprofile.depths:
            if not isinstance(depth, int) or depth <= 0:
                raise ConfigError("memprofile.depths", f"{depth!r} is not a positive integer")

    def check_paths(self) -> None:
        """Fail fast on inputs the selected mode needs."""
        need = {"derive": ("checkpoint",), "train": ("arch",), "eval": ("arch", "theta")}.get(self.mode, ())
        for name in need:
            value = getattr(self.paths, name)
            if value is None:
                raise ConfigError(f"paths.{name}", f"required for mode {self.mode!r}")
            if not Path(value).exists():
                raise ConfigError(f"paths.{name}", f"{value} does not exist")


def _choice(name: str, value, allowed) -> None:
    if value not in allowed:
        raise ConfigError(name, f"{value!r} is not one of {list(allowed)}")


def _coerce(path: str, value, default, hint):
    if is_dataclass(default) or (isinstance(hint, type) and is_dataclass(hint)):
        cls = type(default) if is_dataclass(default) else hint
        if not isinstance(value, dict):
            raise ConfigError(path, "must be an object")
        return _build(cls, value, path + ".")
    if value is None:
        if default is None:
            return None
        raise ConfigError(path, "must not be null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or path.endswith("byte_cap"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) or default is None:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, (list, dict)):
        if not isinstance(value, type(default)):
            raise ConfigError(path, f"expected a {type(default).__name__}, got {value!r}")
        return copy.deepcopy(value)
    return value


def _build(cls, doc: dict, prefix: str):
    proto = cls()
    names = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(prefix + key, "unknown field")
    kwargs = {}
    for name, f in names.items():
        default = getattr(proto, name)
        if name in doc:
            kwargs[name] = _coerce(prefix + name, doc[name], default, f.type)
        else:
            kwargs[name] = copy.deepcopy(default)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from None


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; the value is read as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError("--set", f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError("--set", f"bad key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides:
        parts, value = parse_override(text)
        node = doc
        for i, part in enumerate(parts[:-1]):
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(".".join(parts[:i + 1]), "is not a section")
            node = nxt
        node[parts[-1]] = value
    return doc


def load_config(path=None, overrides: Optional[list[str]] = None, **top_level) -> RunConfig:
    """Read ``path`` (or start from defaults), apply ``--set`` overrides, then top-level flags."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("--config", f"{p} does not exist")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"{p} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
    doc = apply_overrides(doc, overrides or [])
    for key, value in top_level.items():
        if value is None:
            continue
        if key == "out":
            doc.setdefault("paths", {})["out"] = value
        else:
            doc[key] = value
    return RunConfig.from_dict(doc)
