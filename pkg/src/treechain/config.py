"""Experiment configuration: a YAML document with nested sections.

Unknown keys are rejected at every level so the file is a complete record
of the experiment. ``to_dict`` output parses back to an equal config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import yaml

from .engine import DEFAULT_FULL_TREE_CAP, MAX_GENERATION
from .kernels import KernelError, KernelFamily, make_kernel
from .limits import LimitError, LimitLaw, limit_law_for
from .measures import MeasureError, test_function

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    min: float = -2.0
    max: float = 2.0
    step: float = 0.25


@dataclass
class SampleConfig:
    m: int = 20000
    replicates: int = 200
    pairs: int = 2000
    budget: int | None = None


@dataclass
class ThresholdConfig:
    distance: float = 0.03
    significance: float = 0.01
    level: float = 0.99
    resamples: int = 2000


@dataclass
class SimulateConfig:
    mode: str = "full_tree"
    k: int = 8
    dump: bool = True


@dataclass
class MrcaConfig:
    k_list: list = field(default_factory=lambda: [3, 8])
    pairs: int = 100000


@dataclass
class OracleConfig:
    k: int = 2


@dataclass
class OutputConfig:
    dir: str = "out"
    format: str = "json"


@dataclass
class ExperimentConfig:
    kernel: dict = field(default_factory=lambda: {"family": "donsker", "n": 1})
    n_list: list | None = None
    x0: float = 0
    t: float = 1.0
    T: float = 1.0
    master_seed: int = 0
    workers: int = 1
    full_tree_cap: int = DEFAULT_FULL_TREE_CAP
    test_functions: list = field(default_factory=lambda: ["square"])
    limit_law: dict | None = None
    grid: GridConfig = field(default_factory=GridConfig)
    samples: SampleConfig = field(default_factory=SampleConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    mrca: MrcaConfig = field(default_factory=MrcaConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.validate()

    # -- derived objects -------------------------------------------------------------
    def make_kernel(self, n: int | None = None) -> KernelFamily:
        spec = dict(self.kernel)
        if n is not None:
            spec["n"] = n
        return make_kernel(spec)

    def scales(self) -> list[int]:
        return list(self.n_list) if self.n_list else [self.make_kernel().n]

    def phis(self):
        return [test_function(s) for s in self.test_functions]

    def law(self, kernel: KernelFamily | None = None) -> LimitLaw:
        kernel = self.make_kernel() if kernel is None else kernel
        if self.limit_law is None:
            return limit_law_for(kernel, self.t, self.x0)
        spec = dict(self.limit_law)
        kind = spec.pop("kind", None)
        if kind == "normal":
            law = LimitLaw.normal(spec.pop("t", self.t))
        elif kind == "poisson":
            law = LimitLaw.poisson(spec.pop("rate", 1.0), spec.pop("t", self.t))
        elif kind == "point_mass":
            law = LimitLaw.point_mass(spec.pop("x0", self.x0))
        else:
            raise ConfigError(f"unknown limit law kind {kind!r}")
        if spec:
            raise ConfigError(f"unexpected limit_law fields {sorted(spec)}")
        return law

    # -- checks ---------------------------------------------------------------------
    def validate(self) -> None:
        if not isinstance(self.master_seed, int) or not 0 <= self.master_seed <= MASK64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be a positive integer")
        if not 0 <= self.full_tree_cap <= MAX_GENERATION:
            raise ConfigError(f"full_tree_cap must be within 0..{MAX_GENERATION}")
        if self.t < 0 or self.T < 0:
            raise ConfigError("times must be nonnegative")
        if self.n_list is not None and (not self.n_list or any(not isinstance(n, int) or n < 1 for n in self.n_list)):
            raise ConfigError("n_list must be a nonempty list of positive integers")
        if self.simulate.mode not in ("full_tree", "walk"):
            raise ConfigError("simulate.mode must be full_tree or walk")
        if self.output.format not in ("csv", "json"):
            raise ConfigError("output.format must be csv or json")
        if not 0 < self.thresholds.level < 1 or not 0 < self.thresholds.significance < 1:
            raise ConfigError("level and significance must lie in (0, 1)")
        try:
            kernels = [self.make_kernel(n) for n in (self.n_list or [None])]
            for k in kernels:
                k.check_state(self.x0)
            self.phis()
            if self.limit_law is not None:
                law = self.law(kernels[0])
                integer = kernels[0].state_kind == "integer"
                if (law.kind == "normal" and integer) or (law.kind == "poisson" and not integer):
                    raise ConfigError(f"limit law {law.kind} does not fit the {kernels[0].family_id} state space")
        except (KernelError, LimitError, MeasureError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- (de)serialisation ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict | None) -> ExperimentConfig:
        return _build(cls, data or {}, "")

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        with open(path) as fh:
            return cls.loads(fh.read())


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or '<root>'}: {', '.join(map(str, unknown))}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
