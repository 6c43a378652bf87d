"""Empirical measures, test functions, moment estimates and distribution distances."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr


class MeasureError(ValueError):
    pass


# -- test functions --------------------------------------------------------------------


class TestFunction:
    """A test function usable on numpy arrays and on exact scalars (Fraction).

    ``bounded`` is False for the polynomial surrogates; reports flag their use
    because the limit theory is stated for bounded continuous functions.
    ``gaussian_mean(x, v)`` is ``E phi(x + sqrt(v) Z)`` in closed form and
    ``gaussian_increment(x, v)`` the same minus ``phi(x)``; both optional.
    """

    __test__ = False  # not a pytest class

    def __init__(self, name: str, scalar: Callable, vector: Callable | None = None,
                 second_derivative: Callable | None = None, bounded: bool = True,
                 gaussian_mean: Callable | None = None, gaussian_increment: Callable | None = None):
        self.name = name
        self.scalar = scalar
        self.vector = vector
        self.second_derivative = second_derivative
        self.bounded = bounded
        self.gaussian_mean = gaussian_mean
        self.gaussian_increment = gaussian_increment
        if gaussian_mean is not None and gaussian_increment is None:
            self.gaussian_increment = lambda x, v: gaussian_mean(x, v) - np.asarray(self(np.asarray(x, dtype=float)))

    def __call__(self, x):
        if isinstance(x, np.ndarray):
            if self.vector is not None:
                return self.vector(x)
            return np.vectorize(self.scalar, otypes=[float])(x)
        return self.scalar(x)

    def __repr__(self):
        return f"TestFunction({self.name!r})"


def _f(x):
    return np.asarray(x, dtype=float)


def identity() -> TestFunction:
    return TestFunction("identity", lambda x: x, lambda x: x.astype(float),
                        second_derivative=lambda x: 0 * x, bounded=False,
                        gaussian_mean=lambda x, v: _f(x), gaussian_increment=lambda x, v: 0 * _f(x))


def square() -> TestFunction:
    return TestFunction("square", lambda x: x * x, lambda x: np.square(x, dtype=float),
                        second_derivative=lambda x: 2 + 0 * x, bounded=False,
                        gaussian_mean=lambda x, v: _f(x) ** 2 + v, gaussian_increment=lambda x, v: v + 0 * _f(x))


def quartic() -> TestFunction:
    return TestFunction("quartic", lambda x: (x * x) * (x * x),
                        lambda x: np.square(np.square(x, dtype=float)),
                        second_derivative=lambda x: 12 * x * x, bounded=False,
                        gaussian_mean=lambda x, v: _f(x) ** 4 + 6 * _f(x) ** 2 * v + 3 * v * v,
                        gaussian_increment=lambda x, v: 6 * _f(x) ** 2 * v + 3 * v * v)


def _ramp_mean(x, a, v):
    """``E (x + sqrt(v) Z - a)_+``."""
    s = math.sqrt(v)
    d = (_f(x) - a) / s
    return (_f(x) - a) * ndtr(d) + s * np.exp(-0.5 * d * d) / math.sqrt(2 * math.pi)


def indicator(threshold) -> TestFunction:
    """Closed upper set ``[x >= threshold]``."""
    return TestFunction(f"indicator[x>={threshold}]", lambda x: 1 if x >= threshold else 0,
                        lambda x: (x >= threshold).astype(float),
                        gaussian_mean=lambda x, v: ndtr((_f(x) - threshold) / math.sqrt(v)))


def exp_bounded(a: float) -> TestFunction:
    """``exp(-a x^2)``, bounded and smooth."""
    if not a > 0:
        raise MeasureError("exp_bounded needs a > 0")

    def smoothed(x, v):
        c = 1 + 2 * a * v
        return np.exp(-a * _f(x) ** 2 / c) / math.sqrt(c)

    return TestFunction(
        f"exp_bounded({a})",
        lambda x: math.exp(-a * float(x) ** 2),
        lambda x: np.exp(-a * np.square(x, dtype=float)),
        second_derivative=lambda x: (4 * a * a * x * x - 2 * a) * np.exp(-a * x * x),
        gaussian_mean=smoothed,
    )


def table_function(points: Sequence[float], values: Sequence[float]) -> TestFunction:
    """Piecewise-linear interpolation of a table, constant beyond its ends."""
    xp = np.asarray(points, dtype=float)
    fp = np.asarray(values, dtype=float)
    if xp.ndim != 1 or len(xp) == 0 or len(xp) != len(fp) or np.any(np.diff(xp) <= 0):
        raise MeasureError("table function needs strictly increasing points and matching values")
    # fp[0] plus a ramp at each knot whose weight is the change of slope there
    slopes = np.concatenate([[0.0], np.diff(fp) / np.diff(xp), [0.0]])
    kinks = np.diff(slopes)

    def smoothed(x, v):
        return fp[0] + sum(k * _ramp_mean(x, a, v) for a, k in zip(xp, kinks))

    return TestFunction("table", lambda x: float(np.interp(float(x), xp, fp)), lambda x: np.interp(x, xp, fp),
                        gaussian_mean=smoothed)


def constant(c: float) -> TestFunction:
    return TestFunction(f"constant({c})", lambda x: c, lambda x: np.full(np.shape(x), float(c)),
                        second_derivative=lambda x: 0 * x,
                        gaussian_mean=lambda x, v: float(c) + 0 * _f(x), gaussian_increment=lambda x, v: 0 * _f(x))


def linear_combination(coeffs: Sequence[float], funcs: Sequence[TestFunction]) -> TestFunction:
    coeffs, funcs = list(coeffs), list(funcs)
    smooth = all(f.gaussian_mean is not None for f in funcs)
    return TestFunction(
        "+".join(f"{c}*{f.name}" for c, f in zip(coeffs, funcs)),
        lambda x: sum(c * f(x) for c, f in zip(coeffs, funcs)),
        lambda x: sum(c * np.asarray(f(x), dtype=float) for c, f in zip(coeffs, funcs)),
        bounded=all(f.bounded for f in funcs),
        gaussian_mean=(lambda x, v: sum(c * f.gaussian_mean(x, v) for c, f in zip(coeffs, funcs))) if smooth else None,
        gaussian_increment=(lambda x, v: sum(c * f.gaussian_increment(x, v) for c, f in zip(coeffs, funcs)))
        if smooth else None,
    )


def test_function(spec) -> TestFunction:
    """Parse an id such as ``square``, ``indicator:1`` or ``exp_bounded:0.5``."""
    if isinstance(spec, TestFunction):
        return spec
    if isinstance(spec, Mapping):
        kind = spec.get("kind")
        if kind == "table":
            return table_function(spec["points"], spec["values"])
        raise MeasureError(f"unknown test function block {dict(spec)!r}")
    name, _, arg = str(spec).partition(":")
    simple = {"identity": identity, "square": square, "quartic": quartic}
    if name in simple and not arg:
        return simple[name]()
    if name == "indicator" and arg:
        return indicator(float(arg))
    if name == "exp_bounded" and arg:
        return exp_bounded(float(arg))
    if name == "constant" and arg:
        return constant(float(arg))
    raise MeasureError(f"unknown test function {spec!r}")


# -- empirical measures -------------------------------------------------------------------------


class EmpiricalMeasure:
    """Uniform-weight atoms."""

    def __init__(self, atoms):
        atoms = np.array(atoms).reshape(-1)
        if atoms.size == 0:
            raise MeasureError("an empirical measure needs at least one atom")
        self.atoms = atoms

    def __len__(self):
        return len(self.atoms)

    @property
    def weight(self) -> float:
        return 1.0 / len(self.atoms)

    def integrate(self, phi) -> float:
        return integrate(self, phi)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["state"])
            for a in self.atoms:
                writer.writerow([format_float(a)])


def format_float(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def empirical_from_buffer(buffer) -> EmpiricalMeasure:
    return EmpiricalMeasure(np.array(buffer.states, copy=True))


def empirical_from_leaves(states: Mapping) -> EmpiricalMeasure:
    if len(states) == 0:
        raise MeasureError("no leaves given")
    return EmpiricalMeasure(np.fromiter(states.values(), dtype=float, count=len(states)))


def integrate(Z: EmpiricalMeasure, phi) -> float:
    """``<Z, phi>``: mean of phi over the atoms."""
    return float(np.mean(np.asarray(phi(Z.atoms), dtype=float)))


def ks_distance(Z: EmpiricalMeasure, cdf: Callable) -> float:
    """Sup distance between the right-continuous empirical CDF and ``cdf``.

    Ties are merged; the distance is checked just before and at each atom.
    """
    values, counts = np.unique(np.asarray(Z.atoms, dtype=float), return_counts=True)
    upper = np.cumsum(counts) / len(Z)
    lower = upper - counts / len(Z)
    F = np.asarray(cdf(values), dtype=float)
    return float(max(np.max(upper - F), np.max(F - lower), 0.0))


def tv_distance_discrete(Z: EmpiricalMeasure, pmf: Callable) -> float:
    """Total variation distance to a law on the nonnegative integers, tail included."""
    atoms = np.asarray(Z.atoms)
    if atoms.dtype.kind == "f":
        if not np.all(atoms == np.round(atoms)):
            raise MeasureError("tv_distance_discrete needs integer atoms")
        atoms = atoms.astype(np.int64)
    elif atoms.dtype.kind not in "iu":
        raise MeasureError("tv_distance_discrete needs integer atoms")
    negative = float(np.mean(atoms < 0))
    top = max(int(atoms.max()), 0)
    freq = np.bincount(atoms[atoms >= 0], minlength=top + 1) / len(atoms)
    p = np.asarray(pmf(np.arange(top + 1)), dtype=float)
    tail = max(0.0, 1.0 - float(np.sum(p)))
    return 0.5 * (float(np.sum(np.abs(freq - p))) + tail + negative)


# -- replicate statistics ----------------------------------------------------------------------


@dataclass
class Interval:
    estimate: float
    low: float
    high: float
    level: float

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "low": self.low, "high": self.high, "level": self.level}


def covariance(a, b) -> float:
    """Population covariance on shifted data (exactly 0 for a constant sequence)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da = a - a[0]
    db = b - b[0]
    return float(np.mean(da * db) - np.mean(da) * np.mean(db))


def sample_variance(a) -> float:
    a = np.asarray(a, dtype=float)
    d = a - a[0]
    return float(np.sum((d - d.mean()) ** 2) / (len(a) - 1))


def bootstrap_interval(stat: Callable, samples: Sequence[np.ndarray], rng: np.random.Generator,
                       resamples: int = 2000, level: float = 0.99) -> Interval:
    """Percentile bootstrap for a statistic of paired replicate arrays."""
    samples = [np.asarray(s) for s in samples]
    n = len(samples[0])
    estimate = stat(*samples)
    idx = rng.integers(0, n, size=(resamples, n))
    boots = np.array([stat(*(s[i] for s in samples)) for i in idx])
    alpha = (1 - level) / 2
    low, high = np.quantile(boots, [alpha, 1 - alpha])
    return Interval(float(estimate), float(low), float(high), level)


MIN_REPLICATES = 30


@dataclass
class MomentEstimates:
    first: float
    first_stderr: float
    second: float
    second_stderr: float
    replicates: int

    def to_dict(self) -> dict:
        return dict(vars(self))


def moment_estimates(values1, values2=None) -> MomentEstimates:
    """First moment of ``<Z, phi1>`` and mixed second moment ``E[<Z,phi1><Z,phi2>]``."""
    v1 = np.asarray(values1, dtype=float)
    v2 = v1 if values2 is None else np.asarray(values2, dtype=float)
    prod = v1 * v2
    r = len(v1)
    if r < 2:
        raise MeasureError("need at least two replicates")
    return MomentEstimates(float(v1.mean()), float(v1.std(ddof=1) / math.sqrt(r)),
                           float(prod.mean()), float(prod.std(ddof=1) / math.sqrt(r)), r)


def product_form_gap(values1, values2, rng: np.random.Generator | None = None,
                     resamples: int = 2000, level: float = 0.99) -> Interval:
    """``E[<Z,phi1><Z,phi2>] - E<Z,phi1> E<Z,phi2>`` with a bootstrap interval.

    Zero (up to sampling error) exactly when the second moment measure has
    product form, i.e. when ``Z`` is deterministic.
    """
    v1 = np.asarray(values1, dtype=float)
    v2 = np.asarray(values2, dtype=float)
    if len(v1) != len(v2):
        raise MeasureError("replicate arrays differ in length")
    if len(v1) < MIN_REPLICATES:
        raise MeasureError(f"product_form_gap needs at least {MIN_REPLICATES} replicates, got {len(v1)}")
    rng = np.random.default_rng(0) if rng is None else rng
    return bootstrap_interval(covariance, [v1, v2], rng, resamples, level)
