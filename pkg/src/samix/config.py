"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

SCENARIOS = ("sl", "ssl-i", "ssl-c", "sl-pretrained")


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + msg)


@dataclass
class DatasetSpec:
    kind: str  # "cifar" or "synth"
    path: str | None = None
    n: int = 0
    classes: int = 0

    @classmethod
    def parse(cls, text: str) -> "DatasetSpec":
        kind, _, rest = text.partition(":")
        if kind == "cifar" and rest:
            return cls("cifar", path=rest)
        if kind == "synth":
            try:
                n, classes = (int(v) for v in rest.split(","))
            except ValueError:
                raise ValueError(f"expected synth:<n>,<classes>, got {text!r}") from None
            if n < 2 or classes < 2:
                raise ValueError("synth needs n >= 2 and classes >= 2")
            return cls("synth", n=n, classes=classes)
        raise ValueError(f"dataset must be cifar:<path> or synth:<n>,<classes>, got {text!r}")

    def __str__(self) -> str:
        return f"cifar:{self.path}" if self.kind == "cifar" else f"synth:{self.n},{self.classes}"


def _in(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        bad_lo = v <= lo if lo_open else v < lo
        bad_hi = v >= hi if hi_open else v > hi
        if (lo is not None and bad_lo) or (hi is not None and bad_hi):
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            raise ValueError(f"must lie in {lb}{lo}, {hi}{rb}")
    return check


_INF = float("inf")


@dataclass
class ExperimentConfig:
    scenario: str = "sl"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec("synth", n=2000, classes=4))
    alpha: float = 2.0
    eta: float = 0.5
    beta0: float = 0.1
    epsilon: float = 0.1
    temperature: float = 0.2
    lr: float = 0.05
    mixer_lr: float = 0.05
    momentum: float = 0.999
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    queue_len: int = 512
    clusters: int = 16
    content: str = "nonlinear"
    lambda_adjust: bool = True
    mix_policy: str = "samix"
    holdout: int = 0
    mixer_checkpoint: str | None = None
    encoder_checkpoint: str | None = None


# key -> (converter, validator)
_RULES = {
    "scenario": (str, lambda v: _choice(v, SCENARIOS)),
    "dataset": (DatasetSpec.parse, None),
    "alpha": (float, _in(0, _INF, lo_open=True)),
    "eta": (float, _in(0, 1)),
    "beta0": (float, _in(0, _INF)),
    "epsilon": (float, _in(0, 1)),
    "temperature": (float, _in(0, _INF, lo_open=True)),
    "lr": (float, _in(0, _INF, lo_open=True)),
    "mixer_lr": (float, _in(0, _INF, lo_open=True)),
    "momentum": (float, _in(0, 1)),
    "weight_decay": (float, _in(0, _INF)),
    "epochs": (int, _in(1, _INF)),
    "batch_size": (int, _in(2, _INF)),
    "seed": (int, _in(0, _INF)),
    "queue_len": (int, _in(1, _INF)),
    "clusters": (int, _in(1, _INF)),
    "content": (str, lambda v: _choice(v, ("nonlinear", "linear"))),
    "lambda_adjust": (lambda s: _bool(s), None),
    "mix_policy": (str, lambda v: _choice(v, ("samix", "mixup", "cutmix", "none"))),
    "holdout": (int, _in(0, _INF)),
    "mixer_checkpoint": (str, None),
    "encoder_checkpoint": (str, None),
}
assert set(_RULES) == {f.name for f in fields(ExperimentConfig)}


def _choice(v, options):
    if v not in options:
        raise ValueError(f"must be one of {', '.join(options)}")


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def set_value(cfg: ExperimentConfig, key: str, raw: str, line: int | None = None) -> None:
    if key not in _RULES:
        raise ConfigError(f"unknown key '{key}'", line, key)
    conv, check = _RULES[key]
    try:
        value = conv(raw)
        if check is not None:
            check(value)
    except ValueError as exc:
        raise ConfigError(f"invalid value for '{key}': {exc}", line, key) from None
    setattr(cfg, key, value)


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", n)
        if key in seen:
            raise ConfigError(f"duplicate key '{key}' (first set on line {seen[key]})", n, key)
        if not value:
            raise ConfigError(f"missing value for '{key}'", n, key)
        set_value(cfg, key, value, n)
        seen[key] = n
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-key checks that a single line cannot catch."""
    if cfg.scenario == "sl-pretrained" and not cfg.mixer_checkpoint:
        raise ConfigError("scenario sl-pretrained requires key 'mixer_checkpoint'", key="mixer_checkpoint")
    if cfg.scenario == "ssl-c" and cfg.clusters < 2:
        raise ConfigError("scenario ssl-c needs clusters >= 2", key="clusters")
    if cfg.dataset.kind == "synth" and cfg.holdout >= cfg.dataset.n:
        raise ConfigError("holdout must be smaller than the dataset", key="holdout")


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
