"""Run configuration: YAML file, command-line overrides, snapshots.

A config file is a YAML mapping with these optional sections::

    segnet:      SegNetConfig fields
    critic:      CriticConfig fields
    train:       TrainConfig fields
    data:        manifest, train_split, val_split, test_split, flips
    eval:        checkpoint, split, threshold, tolerance, metric, pred_dir, figure
    infer:       checkpoint, inputs, threshold, dump_probs, dump_features
    complexity:  input_size, runs, warmup, timing
    output_dir:  run directory (CRACKCLF_OUT overrides it)
    resume:      checkpoint to resume training from

Unknown sections or keys are rejected.
"""

import collections.abc
import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence

import yaml

from crackclf.adversary import CriticConfig
from crackclf.segnet import SegNetConfig
from crackclf.trainer import TrainConfig

ENV_OUT = "CRACKCLF_OUT"
ALIASES = {"clf": ("train", "clf_enabled")}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"
    flips: bool = False


@dataclass
class EvalConfig:
    checkpoint: Optional[str] = None
    split: str = "test"
    threshold: float = 0.5
    tolerance: float = 2.0
    metric: str = "euclidean"
    pred_dir: Optional[str] = None
    figure: bool = True

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.metric not in ("euclidean", "chebyshev"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class InferConfig:
    checkpoint: Optional[str] = None
    inputs: List[str] = field(default_factory=list)
    threshold: float = 0.5
    dump_probs: bool = False
    dump_features: bool = False

    def __post_init__(self):
        self.inputs = [str(p) for p in self.inputs]
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class ComplexityConfig:
    input_size: Sequence[int] = (256, 256)
    runs: int = 50
    warmup: int = 5
    timing: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.input_size) != 2 or min(self.input_size) < 16 or any(s % 16 for s in self.input_size):
            raise ValueError("input_size must be two multiples of 16")
        if self.runs < 1 or self.warmup < 0:
            raise ValueError("runs must be >= 1 and warmup >= 0")


SECTIONS = {
    "segnet": SegNetConfig,
    "critic": CriticConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "infer": InferConfig,
    "complexity": ComplexityConfig,
}
TOP_LEVEL = {"output_dir": "runs/crackclf", "resume": None}


@dataclass
class RunConfig:
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    complexity: ComplexityConfig = field(default_factory=ComplexityConfig)
    output_dir: str = TOP_LEVEL["output_dir"]
    resume: Optional[str] = None
    # keys given explicitly (file or overrides), as "section.key"
    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    def to_dict(self):
        d = {}
        for name in SECTIONS:
            section = getattr(self, name)
            d[name] = section.to_dict() if hasattr(section, "to_dict") else _plain(dataclasses.asdict(section))
        d["output_dir"] = self.output_dir
        d["resume"] = self.resume
        return d

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _defaults(cls):
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(where, value, hint):
    """Convert ``value`` to the annotated field type, raising :class:`ConfigError` if it cannot be."""
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(where, value, inner[0])
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if hint in (int, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if hint is int and not float(value).is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return hint(value)
    if hint is str:
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return str(value)
    if origin in (list, tuple, collections.abc.Sequence):
        if isinstance(value, (str, int, float)):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        inner = args[0] if args else None
        return [v if inner is None else _coerce(where, v, inner) for v in value]
    return value


def from_dict(raw, explicit=None):
    """Build a validated :class:`RunConfig` from a nested mapping."""
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    seen = set(explicit or ())
    built = {}
    for name, cls in SECTIONS.items():
        given = raw.get(name) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"{name}: expected a mapping, got {type(given).__name__}")
        hints = _hints(cls)
        bad = set(given) - set(_defaults(cls))
        if bad:
            raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(bad))}")
        kwargs = {k: _coerce(f"{name}.{k}", v, hints[k]) for k, v in given.items()}
        seen.update(f"{name}.{k}" for k in given)
        try:
            built[name] = cls(**kwargs)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{name}: {e}") from None
    for key in TOP_LEVEL:
        if key in raw:
            seen.add(key)
    out_dir = raw.get("output_dir", TOP_LEVEL["output_dir"])
    resume = raw.get("resume")
    for key, value in (("output_dir", out_dir), ("resume", resume)):
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: expected a path, got {value!r}")
    return RunConfig(**built, output_dir=str(out_dir), resume=None if resume is None else str(resume),
                     explicit=frozenset(seen))


def _resolve_key(key, command):
    key = key.replace("-", "_")
    if key in ALIASES:
        return ALIASES[key]
    if key in TOP_LEVEL:
        return (None, key)
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section in --{key}")
        if name not in _defaults(SECTIONS[section]):
            raise ConfigError(f"unknown key {name!r} in section {section}")
        return (section, name)
    owners = [s for s, cls in SECTIONS.items() if key in _defaults(cls)]
    if command in owners:
        return (command, key)
    if len(owners) == 1:
        return (owners[0], key)
    if not owners:
        raise ConfigError(f"unknown option --{key}")
    raise ConfigError(f"--{key} is ambiguous; use one of " + ", ".join(f"--{s}.{key}" for s in owners))


def _parse_value(text, default):
    # strings stay verbatim so names like "1e3" or "no" survive
    return text if isinstance(default, str) else yaml.safe_load(text)


BOOL_WORDS = {"true", "false", "yes", "no", "on", "off", "1", "0"}


def parse_overrides(tokens, command=None):
    """Split ``--key value`` / ``--key=value`` / bare ``--flag`` tokens from positionals.

    Returns ``(overrides, positionals)`` where ``overrides`` maps
    ``(section, key)`` to a parsed value.
    """
    overrides, positionals = {}, []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            positionals.append(tok)
            i += 1
            continue
        key, eq, text = tok[2:].partition("=")
        section, name = _resolve_key(key, command)
        default = TOP_LEVEL[name] if section is None else _defaults(SECTIONS[section])[name]
        if not eq:
            nxt = tokens[i + 1] if i + 1 < len(tokens) else None
            if isinstance(default, bool):
                # bare boolean flags take a value only when one is spelled out
                if nxt is not None and nxt.lower() in BOOL_WORDS:
                    text, i = nxt, i + 1
                else:
                    text = "true"
            elif nxt is None or nxt.startswith("--"):
                raise ConfigError(f"--{key} needs a value")
            else:
                text, i = nxt, i + 1
        value = _parse_value(text, default)
        if isinstance(default, bool) and isinstance(value, int) and not isinstance(value, bool):
            value = bool(value)
        if isinstance(default, list) and section is not None:
            overrides.setdefault((section, name), []).extend(value if isinstance(value, list) else [value])
        else:
            overrides[(section, name)] = value
        i += 1
    return overrides, positionals


def load_config(path=None, overrides=None, env=None):
    """Read ``path`` (optional), apply overrides, then the output-dir environment variable.

    Precedence: command-line override > ``CRACKCLF_OUT`` > file > default.
    """
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    env = os.environ if env is None else env
    if env.get(ENV_OUT):
        raw["output_dir"] = env[ENV_OUT]
    for (section, name), value in (overrides or {}).items():
        if section is None:
            raw[name] = value
        else:
            raw.setdefault(section, {})
            if raw[section] is None:
                raw[section] = {}
            raw[section][name] = value
    return from_dict(raw)
