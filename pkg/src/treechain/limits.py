"""Limit laws of the built-in families and the generator checks.

The finite-``n`` walk generator is ``n * (P_R phi - phi)``. Its distance to the
limiting generator, taken as a sup over a finite grid of states, should
vanish as ``n`` grows; for the donsker family with ``phi = x^2`` it is zero for
every ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .kernels import KernelFamily, PoissonKernel, DonskerKernel, walk_step_increment
from .measures import TestFunction


class LimitError(ValueError):
    pass


@dataclass(frozen=True)
class LimitLaw:
    """``normal`` (mean 0, variance t), ``poisson`` (mean rate*t) or ``point_mass`` (x0)."""

    kind: str
    t: float = 1.0
    rate: float = 1.0
    x0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("normal", "poisson", "point_mass"):
            raise LimitError(f"unknown limit law {self.kind!r}")
        if self.t < 0:
            raise LimitError("time must be nonnegative")
        if self.kind == "poisson" and self.rate < 0:
            raise LimitError("poisson rate must be nonnegative")

    @classmethod
    def normal(cls, t: float) -> LimitLaw:
        return cls("normal", t) if t > 0 else cls("point_mass", 0.0, x0=0.0)

    @classmethod
    def poisson(cls, rate: float, t: float) -> LimitLaw:
        return cls("poisson", t, rate) if t > 0 else cls("point_mass", 0.0, x0=0.0)

    @classmethod
    def point_mass(cls, x0: float) -> LimitLaw:
        return cls("point_mass", 0.0, x0=x0)

    @property
    def discrete(self) -> bool:
        return self.kind != "normal"

    @property
    def mean(self) -> float:
        return {"normal": 0.0, "poisson": self.rate * self.t, "point_mass": self.x0}[self.kind]

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "normal":
            return stats.norm.cdf(x, scale=math.sqrt(self.t))
        if self.kind == "poisson":
            return stats.poisson.cdf(np.floor(x), self.rate * self.t)
        return (x >= self.x0).astype(float)

    def pmf(self, j):
        if self.kind == "normal":
            raise LimitError("the normal limit law has no pmf; use cdf")
        j = np.asarray(j)
        if self.kind == "poisson":
            return stats.poisson.pmf(j, self.rate * self.t)
        return (j == self.x0).astype(float)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "t": self.t}
        if self.kind == "poisson":
            out["rate"] = self.rate
        if self.kind == "point_mass":
            out["x0"] = self.x0
        return out


def limit_law_for(kernel: KernelFamily, t: float, x0=0) -> LimitLaw:
    """The law of the limiting process at time ``t`` started from ``x0 = 0``."""
    if t == 0:
        return LimitLaw.point_mass(x0)
    if x0 != 0:
        raise LimitError("built-in limit laws are stated for x0 = 0")
    if isinstance(kernel, DonskerKernel):
        return LimitLaw.normal(t)
    if isinstance(kernel, PoissonKernel):
        return LimitLaw.poisson(kernel.rate, t)
    raise LimitError(f"no analytic limit law for {kernel!r}")


def second_difference_step(x: float) -> float:
    return max(1e-4, 1e-4 * abs(x))


@dataclass(frozen=True)
class GeneratorSpec:
    """Limiting generator: ``donsker`` (half the second derivative) or ``poisson`` (rate * forward difference)."""

    family: str
    rate: float = 1.0

    def __post_init__(self):
        if self.family not in ("donsker", "poisson"):
            raise LimitError(f"no limiting generator for family {self.family!r}")

    @classmethod
    def for_kernel(cls, kernel: KernelFamily) -> GeneratorSpec:
        if isinstance(kernel, PoissonKernel):
            return cls("poisson", kernel.rate)
        if isinstance(kernel, DonskerKernel):
            return cls("donsker")
        raise LimitError(f"no limiting generator for {kernel!r}")

    def apply(self, phi: TestFunction, x: float) -> float:
        if self.family == "poisson":
            return self.rate * (float(phi(x + 1)) - float(phi(x)))
        if getattr(phi, "second_derivative", None) is not None:
            return 0.5 * float(phi.second_derivative(x))
        h = second_difference_step(x)
        return 0.5 * (float(phi(x + h)) - 2.0 * float(phi(x)) + float(phi(x - h))) / (h * h)


def generator_estimate(kernel: KernelFamily, phi, x, budget: int | None = None, rng=None) -> float:
    """``n * E[phi(R_1) - phi(R_0) | R_0 = x]`` for the kernel at scale ``n``."""
    return kernel.n * walk_step_increment(kernel, phi, x, budget, rng).value


def make_grid(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0 or hi < lo:
        raise LimitError("grid needs step > 0 and hi >= lo")
    count = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(count)


@dataclass
class GapReport:
    phi: str
    family: str
    n: int
    grid_min: float
    grid_max: float
    grid_step: float | None
    gap: float

    def to_dict(self) -> dict:
        return dict(vars(self))


def _grid_step(grid: np.ndarray):
    d = np.diff(grid)
    return float(d[0]) if len(d) and np.allclose(d, d[0]) else None


def generator_gap(kernel: KernelFamily, phi, gen: GeneratorSpec, grid, budget=None, rng=None) -> GapReport:
    """Sup over ``grid`` of ``|G phi(x) - n (P_R phi - phi)(x)|``."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise LimitError("grid must be nonempty")
    if kernel.state_kind == "integer":
        grid = grid[(grid >= 0) & (grid == np.round(grid))].astype(int)
        if grid.size == 0:
            raise LimitError("grid has no states of this integer-valued family")
    gap = max(
        abs(gen.apply(phi, x.item()) - generator_estimate(kernel, phi, x.item(), budget, rng)) for x in grid
    )
    return GapReport(getattr(phi, "name", "phi"), kernel.family_id, kernel.n,
                     float(grid.min()), float(grid.max()), _grid_step(grid), float(gap))


def function_gap(phi, phi_n, grid) -> float:
    """Sup over ``grid`` of ``|phi(x) - phi_n(x)|``."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise LimitError("grid must be nonempty")
    return float(np.max(np.abs(np.asarray(phi(grid), dtype=float) - np.asarray(phi_n(grid), dtype=float))))
