"""Strict JSON run configuration.

Every field has a default; unknown keys, wrong types and constraint violations
raise ConfigError naming the offending field path.
"""

from __future__ import annotations

import json
import math
import types
import typing
from dataclasses import asdict, dataclass, field, fields

from . import data as D
from . import generator as G
from . import objectives as O
from . import tensor as T

METHODS = ("mta", "gap", "fgsm")
FAMILIES = ("independent", "shared_encoder")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DatasetSection:
    suite: str = D.SHARED_LABEL
    M: int = 3
    C: int = 10
    n: int = 500
    resolution: int = 16
    amplitude: float = 0.5
    noise: float = 0.05
    test_fraction: float = 0.2


@dataclass
class VictimSection:
    family: str = "independent"
    widths: list[int] = field(default_factory=lambda: [8, 16])
    epochs: int = 25
    lr: float = 5e-3
    batch_size: int = 32


@dataclass
class GeneratorSection:
    mode: str = G.UNIVERSAL
    blocks: int = 2
    widths: list[int] = field(default_factory=lambda: [8, 16])
    eps: float = 0.1
    p: str | float = "inf"


@dataclass
class AttackSection:
    goal: str = O.NON_TARGETED
    method: str = "mta"
    weights: list[float] | None = None
    targets: list[int] | None = None
    epochs: int = 120
    batch_size: int = 10
    lr: float = 2e-4
    delta: float = T.DELTA
    probe_size: int = 50


@dataclass
class EvalSection:
    split: str = "test"
    timing: bool = True
    timing_repetitions: int = 30
    timing_warmup: int = 3
    dense_metrics: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    victims: VictimSection = field(default_factory=VictimSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out: str = "run"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def p_value(self) -> float:
        return math.inf if self.generator.p == "inf" else float(self.generator.p)

    def weights(self) -> list[float]:
        return self.attack.weights or [1.0 / self.dataset.M] * self.dataset.M

    def generator_config(self, input_shape) -> G.GeneratorConfig:
        return G.GeneratorConfig(
            M=self.dataset.M,
            mode=self.generator.mode,
            eps=self.generator.eps,
            p=self.p_value(),
            blocks=self.generator.blocks,
            widths=tuple(self.generator.widths),
            input_shape=tuple(input_shape),
            seed=self.seed,
        )

    def attack_config(self) -> O.AttackConfig:
        a = self.attack
        return O.AttackConfig(
            goal=a.goal,
            mode=self.generator.mode,
            eps=self.generator.eps,
            p=self.p_value(),
            weights=self.weights(),
            targets=list(a.targets) if a.targets is not None else None,
            epochs=a.epochs,
            batch_size=a.batch_size,
            lr=a.lr,
            seed=self.seed,
            delta=a.delta,
            probe_size=a.probe_size,
        )


SECTIONS = {
    "dataset": DatasetSection,
    "victims": VictimSection,
    "generator": GeneratorSection,
    "attack": AttackSection,
    "eval": EvalSection,
}


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (item,) = typing.get_args(hint)
        return isinstance(value, list) and all(_type_ok(v, item) for v in value)
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, hint)


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for name, value in raw.items():
        where = f"{path}.{name}" if path else name
        if name in SECTIONS and cls is RunConfig:
            kwargs[name] = _build(SECTIONS[name], value, where)
            continue
        if not _type_ok(value, hints[name]):
            raise ConfigError(where, f"type mismatch, got {type(value).__name__} {value!r}")
        if hints[name] is float and isinstance(value, int):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: RunConfig) -> RunConfig:
    d, v, g, a, e = cfg.dataset, cfg.victims, cfg.generator, cfg.attack, cfg.eval
    _require(cfg.seed >= 0, "seed", "must be a non-negative integer")
    _require(d.suite in (D.SHARED_LABEL, D.SHARED_INPUT), "dataset.suite", f"unknown suite {d.suite!r}")
    if d.suite == D.SHARED_INPUT:
        _require(d.M == 3, "dataset.M", "the shared-input suite always has 3 tasks")
    _require(d.M >= 1, "dataset.M", "need at least one task")
    _require(d.C >= 2, "dataset.C", "need at least two classes")
    _require(d.n >= 1, "dataset.n", "must be positive")
    _require(d.resolution >= 4 and d.resolution % 4 == 0, "dataset.resolution", "must be a positive multiple of 4")
    _require(0 < d.test_fraction < 1, "dataset.test_fraction", "must lie in (0, 1)")
    _require(d.amplitude > 0 and d.noise >= 0, "dataset.amplitude", "amplitude must be positive and noise non-negative")
    _require(v.family in FAMILIES, "victims.family", f"unknown family {v.family!r}")
    _require(len(v.widths) == 2 and min(v.widths) >= 1, "victims.widths", "must be two positive ints")
    _require(v.epochs >= 0, "victims.epochs", "must be >= 0")
    _require(v.lr > 0, "victims.lr", "must be positive")
    _require(v.batch_size >= 1, "victims.batch_size", "must be >= 1")
    _require(g.mode in (G.UNIVERSAL, G.PER_INSTANCE), "generator.mode", f"unknown mode {g.mode!r}")
    _require(g.blocks >= 1, "generator.blocks", "need at least one residual block")
    _require(len(g.widths) == 2 and min(g.widths) >= 1, "generator.widths", "must be two positive ints")
    _require(g.eps > 0, "generator.eps", "must be positive")
    _require(g.p in ("inf", 2, 2.0), "generator.p", 'must be 2 or "inf"')
    _require(a.goal in (O.NON_TARGETED, O.TARGETED), "attack.goal", f"unknown goal {a.goal!r}")
    _require(a.method in METHODS, "attack.method", f"unknown method {a.method!r}")
    if a.weights is not None and len(a.weights) > 0:
        _require(abs(math.fsum(a.weights) - 1.0) <= 1e-9, "attack.weights", "weights must sum to 1")
        _require(all(w > 0 for w in a.weights), "attack.weights", "weights must be positive")
        _require(len(a.weights) == d.M, "attack.weights", f"{len(a.weights)} weights for {d.M} tasks")
    else:
        a.weights = None
    if a.goal == O.TARGETED:
        _require(d.suite == D.SHARED_LABEL, "attack.goal", "targeted attacks need classification tasks")
        _require(a.targets is not None and len(a.targets) == d.M, "attack.targets", "targeted goal needs one target class per task")
        _require(all(0 <= t < d.C for t in a.targets), "attack.targets", f"target classes must lie in 0..{d.C - 1}")
    _require(a.epochs >= 0, "attack.epochs", "must be >= 0")
    _require(a.batch_size >= 1, "attack.batch_size", "must be >= 1")
    _require(a.lr > 0, "attack.lr", "must be positive")
    _require(a.delta > 0, "attack.delta", "must be positive")
    _require(a.probe_size >= 1, "attack.probe_size", "must be >= 1")
    _require(e.split in ("train", "test"), "eval.split", "must be train or test")
    _require(e.timing_repetitions >= 30, "eval.timing_repetitions", "need at least 30 repetitions")
    _require(e.timing_warmup >= 0, "eval.timing_warmup", "must be >= 0")
    _require(bool(cfg.out), "out", "must be a non-empty path")
    return cfg


def from_dict(raw: dict) -> RunConfig:
    return validate(_build(RunConfig, raw, ""))


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(raw)
