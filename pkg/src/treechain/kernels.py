"""Joint child kernels, their walk kernels, and exact one-step walk operators.

A kernel maps a parent state ``x`` to a pair of child states. All built-in
kernels are additive: the children are ``x + s0`` and ``x + s1`` for a random
shift pair. Sampling is vectorised and driven by explicit uniforms, so the
engine can feed per-vertex counter-based streams while ad-hoc callers pass a
numpy ``Generator``.

The walk kernel is the half/half mixture of the two child marginals. For the
lattice built-ins it is a finite weighted law of shifts, which gives exact
one-step expectations. For gaussian increments the walk step is normal;
expectations use a test function's closed-form gaussian smoothing when it has
one and Gauss-Hermite nodes otherwise (exact for polynomials of degree < 64,
poor for discontinuous functions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .rng import KERNEL_SLOTS

QUADRATURE_NODES = 32

REAL = "real"
INTEGER = "integer"


class KernelError(ValueError):
    pass


class Estimate(NamedTuple):
    value: float
    stderr: float = 0.0


def _exact_sqrt_recip(n: int):
    r = math.isqrt(n)
    return Fraction(1, r) if r * r == n else 1.0 / math.sqrt(n)


def _normal_nodes(scale: float = 1.0):
    z, w = hermegauss(QUADRATURE_NODES)
    w = w / w.sum()
    return scale * z, w


def _inverse_cdf(u, values, probs):
    cdf = np.cumsum(probs)
    idx = np.searchsorted(cdf, u, side="right")
    return np.asarray(values)[np.minimum(idx, len(values) - 1)]


@dataclass(frozen=True)
class IncrementLaw:
    """Law of an additive increment.

    ``kind`` is one of ``rademacher``, ``gaussian`` (``sigma``),
    ``bernoulli_jump`` (value 1 with probability ``2*rate/n``),
    ``point_mass`` (``value``) or ``table`` (``values``/``probs``).
    """

    kind: str
    sigma: float = 1.0
    rate: float = 1.0
    value: float = 0.0
    values: tuple = ()
    probs: tuple = ()

    KINDS = ("rademacher", "gaussian", "bernoulli_jump", "point_mass", "table")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise KernelError(f"unknown increment law {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise KernelError("gaussian increment needs sigma > 0")
        if self.kind == "bernoulli_jump" and not self.rate > 0:
            raise KernelError("bernoulli_jump needs rate > 0")
        if self.kind == "table":
            if len(self.values) == 0 or len(self.values) != len(self.probs):
                raise KernelError("table law needs equally many values and probs")
            if not all(math.isfinite(float(v)) for v in self.values):
                raise KernelError("table values must be finite")
            if any(p < 0 for p in self.probs) or abs(sum(float(p) for p in self.probs) - 1) > 1e-12:
                raise KernelError("table probs must be nonnegative and sum to 1")

    @property
    def slots(self) -> int:
        return 2 if self.kind == "gaussian" else 1

    @property
    def integer_valued(self) -> bool:
        if self.kind in ("rademacher", "bernoulli_jump"):
            return True
        if self.kind == "point_mass":
            return float(self.value).is_integer()
        if self.kind == "table":
            return all(float(v).is_integer() for v in self.values)
        return False

    def jump_probability(self, n: int):
        p = Fraction(self.rate).limit_denominator(10**9) * 2 / n
        if p > 1:
            raise KernelError(f"bernoulli_jump needs n > 2*rate (n={n}, rate={self.rate})")
        return p

    def from_uniforms(self, u: np.ndarray, n: int = 1) -> np.ndarray:
        u0 = u[..., 0]
        if self.kind == "rademacher":
            return np.where(u0 < 0.5, 1.0, -1.0)
        if self.kind == "gaussian":
            radius = np.sqrt(-2.0 * np.log1p(-u0))
            return self.sigma * radius * np.cos(2.0 * np.pi * u[..., 1])
        if self.kind == "bernoulli_jump":
            return (u0 < float(self.jump_probability(n))).astype(np.int64)
        if self.kind == "point_mass":
            return np.full(u0.shape, self.value)
        return _inverse_cdf(u0, [float(v) for v in self.values], [float(p) for p in self.probs])

    def table(self, n: int = 1):
        """Finite (values, probs) for this law; Gauss-Hermite nodes for ``gaussian``."""
        if self.kind == "rademacher":
            return [1, -1], [Fraction(1, 2), Fraction(1, 2)]
        if self.kind == "gaussian":
            z, w = _normal_nodes(self.sigma)
            return list(z), list(w)
        if self.kind == "bernoulli_jump":
            p = self.jump_probability(n)
            return [0, 1], [1 - p, p]
        if self.kind == "point_mass":
            return [self.value], [Fraction(1)]
        return list(self.values), list(self.probs)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "gaussian":
            out["sigma"] = self.sigma
        elif self.kind == "bernoulli_jump":
            out["rate"] = self.rate
        elif self.kind == "point_mass":
            out["value"] = self.value
        elif self.kind == "table":
            out["values"] = list(self.values)
            out["probs"] = list(self.probs)
        return out


class WalkLaw(NamedTuple):
    shifts: list
    probs: list


def _merge(shifts, probs) -> WalkLaw:
    acc: dict = {}
    for s, p in zip(shifts, probs):
        acc[s] = acc.get(s, 0) + p
    keys = sorted(acc)
    return WalkLaw(keys, [acc[k] for k in keys])


class KernelFamily:
    """Base class: a joint child kernel at scale ``n``."""

    family_id = "custom"
    state_kind = REAL
    slots = KERNEL_SLOTS

    def __init__(self, n: int = 1):
        if int(n) != n or n < 1:
            raise KernelError(f"scale n must be a positive integer, got {n}")
        self.n = int(n)

    # -- sampling -----------------------------------------------------------------
    def children(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Child pairs for parent states ``x`` from uniforms ``u`` of shape (..., slots)."""
        raise NotImplementedError

    def check_state(self, x) -> None:
        x = np.asarray(x)
        if self.state_kind == INTEGER:
            if not np.all(np.asarray(x, dtype=float) == np.round(np.asarray(x, dtype=float))) or np.any(x < 0):
                raise KernelError(f"{self.family_id} states are nonnegative integers, got {x}")
        elif not np.all(np.isfinite(np.asarray(x, dtype=float))):
            raise KernelError(f"{self.family_id} states are finite reals, got {x}")

    @property
    def dtype(self):
        return np.int64 if self.state_kind == INTEGER else np.float64

    def sample_children(self, x, rng: np.random.Generator):
        self.check_state(x)
        u = rng.random(self.slots)
        x0, x1 = self.children(np.asarray([x], dtype=self.dtype), u[None, :])
        return x0[0].item(), x1[0].item()

    def sample_walk_step(self, x, rng: np.random.Generator):
        """Draw a child pair, then keep one of the two uniformly: one draw of p_R."""
        x0, x1 = self.sample_children(x, rng)
        return x0 if rng.random() < 0.5 else x1

    # -- laws -----------------------------------------------------------------------
    def pair_law(self):
        """Finite list of ``(shift0, shift1, prob)`` rows, or None if not finite."""
        return None

    def walk_law(self) -> WalkLaw | None:
        """Finite weighted shift law of the walk kernel, or None."""
        rows = self.pair_law()
        if rows is None:
            return None
        half = Fraction(1, 2)
        shifts, probs = [], []
        for s0, s1, p in rows:
            shifts += [s0, s1]
            probs += [half * p, half * p]
        return _merge(shifts, probs)

    def walk_law_steps(self, steps: int) -> WalkLaw:
        """Law of the sum of ``steps`` walk increments (convolution of the finite law)."""
        law = self.walk_law()
        if law is None:
            raise KernelError(f"{self!r} has no finite walk law")
        dist = {0: Fraction(1) if isinstance(law.probs[0], Fraction) else 1.0}
        for _ in range(steps):
            nxt: dict = {}
            for a, pa in dist.items():
                for s, ps in zip(law.shifts, law.probs):
                    nxt[a + s] = nxt.get(a + s, 0) + pa * ps
            dist = nxt
        return _merge(list(dist), list(dist.values()))

    def gaussian_variance(self, steps: int = 1) -> float | None:
        """Variance of a ``steps``-step walk increment when it is exactly normal, else None."""
        return None

    def embed(self, x):
        """State-space embedding into the limit space; identity for built-ins."""
        return x

    def rescaled(self, n: int) -> KernelFamily:
        raise KernelError(f"{self.family_id} kernel has no scaling family")

    def to_dict(self) -> dict:
        return {"family": self.family_id, "n": self.n}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items() if k != "family")
        return f"{type(self).__name__}({args})"

    def __eq__(self, other):
        return isinstance(other, KernelFamily) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(repr(self))


class DonskerKernel(KernelFamily):
    """Antithetic children ``(x + Y/sqrt(n), x - Y/sqrt(n))`` with mean-0, variance-1 ``Y``."""

    family_id = "donsker"

    def __init__(self, n: int = 1, increment: str | IncrementLaw = "rademacher"):
        super().__init__(n)
        if isinstance(increment, str):
            increment = IncrementLaw(increment)
        if increment.kind not in ("rademacher", "gaussian") or increment.sigma != 1.0:
            raise KernelError("donsker increments must be rademacher or gaussian(1)")
        self.increment = increment
        self.step = _exact_sqrt_recip(self.n)

    def children(self, x, u):
        d = float(self.step) * self.increment.from_uniforms(u)
        return x + d, x - d

    def pair_law(self):
        if self.increment.kind != "rademacher":
            return None
        d = self.step
        return [(d, -d, Fraction(1, 2)), (-d, d, Fraction(1, 2))]

    def walk_law(self):
        if self.increment.kind == "rademacher":
            return super().walk_law()
        z, w = _normal_nodes(float(self.step))
        return WalkLaw(list(z), list(w))

    def walk_law_steps(self, steps):
        if self.increment.kind == "gaussian":
            z, w = _normal_nodes(float(self.step) * math.sqrt(steps))
            return WalkLaw(list(z), list(w))
        # binomial lattice; shifts are integer multiples of the step
        probs = [Fraction(math.comb(steps, j), 2**steps) for j in range(steps + 1)]
        return WalkLaw([(2 * j - steps) * self.step for j in range(steps + 1)], probs)

    def gaussian_variance(self, steps=1):
        return steps / self.n if self.increment.kind == "gaussian" else None

    def rescaled(self, n):
        return DonskerKernel(n, self.increment)

    def to_dict(self):
        return {"family": self.family_id, "n": self.n, "increment": self.increment.kind}


class PoissonKernel(KernelFamily):
    """Left child copies the parent; right child adds a Bernoulli(2*rate/n) jump."""

    family_id = "poisson"
    state_kind = INTEGER

    def __init__(self, n: int, rate: float = 1.0):
        super().__init__(n)
        if not rate > 0:
            raise KernelError("poisson rate must be positive")
        if not self.n > 2 * rate:
            raise KernelError(f"poisson family needs n > 2*rate (n={self.n}, rate={rate})")
        self.rate = rate
        self.increment = IncrementLaw("bernoulli_jump", rate=rate)

    def children(self, x, u):
        return x.copy(), x + self.increment.from_uniforms(u, self.n)

    def pair_law(self):
        p = self.increment.jump_probability(self.n)
        return [(0, 0, 1 - p), (0, 1, p)]

    def rescaled(self, n):
        return PoissonKernel(n, self.rate)

    def to_dict(self):
        return {"family": self.family_id, "n": self.n, "rate": self.rate}


class SymmetricProductKernel(KernelFamily):
    """Conditionally independent children, each ``x + xi`` with ``xi ~ q``."""

    family_id = "symmetric_product"

    def __init__(self, q: IncrementLaw, n: int = 1):
        super().__init__(n)
        self.q = q
        self.state_kind = INTEGER if q.kind == "bernoulli_jump" else REAL

    def children(self, x, u):
        k = self.q.slots
        return x + self.q.from_uniforms(u[..., :k], self.n), x + self.q.from_uniforms(u[..., 2 : 2 + k], self.n)

    def pair_law(self):
        if self.q.kind == "gaussian":
            return None
        vals, probs = self.q.table(self.n)
        return [(a, b, pa * pb) for a, pa in zip(vals, probs) for b, pb in zip(vals, probs)]

    def walk_law(self):
        vals, probs = self.q.table(self.n)
        return _merge(vals, probs)

    def gaussian_variance(self, steps=1):
        return steps * self.q.sigma**2 if self.q.kind == "gaussian" else None

    def rescaled(self, n):
        return SymmetricProductKernel(self.q, n)

    def to_dict(self):
        return {"family": self.family_id, "n": self.n, "q": self.q.to_dict()}


class MixtureTableKernel(KernelFamily):
    """Custom kernel: a finite mixture of shift pairs ``(s0, s1, prob)``."""

    family_id = "custom"

    def __init__(self, table: Sequence[Sequence], n: int = 1):
        super().__init__(n)
        rows = [tuple(r) for r in table]
        if not rows or any(len(r) != 3 for r in rows):
            raise KernelError("custom table rows must be (shift0, shift1, prob)")
        probs = [r[2] for r in rows]
        if any(p < 0 for p in probs) or abs(sum(float(p) for p in probs) - 1) > 1e-12:
            raise KernelError("custom table probabilities must be nonnegative and sum to 1")
        if not all(math.isfinite(float(s)) for r in rows for s in r[:2]):
            raise KernelError("custom table shifts must be finite")
        self.table = rows
        self._s0 = np.array([float(r[0]) for r in rows])
        self._s1 = np.array([float(r[1]) for r in rows])
        self._cdf = np.cumsum([float(p) for p in probs])

    def children(self, x, u):
        idx = np.minimum(np.searchsorted(self._cdf, u[..., 0], side="right"), len(self.table) - 1)
        return x + self._s0[idx], x + self._s1[idx]

    def pair_law(self):
        return list(self.table)

    def rescaled(self, n):
        return MixtureTableKernel(self.table, n)

    def to_dict(self):
        return {"family": self.family_id, "n": self.n, "table": [list(r) for r in self.table]}


class SamplerKernel(KernelFamily):
    """Kernel given only by a vectorised sampler ``f(x, u) -> (x0, x1)``; no exact operator."""

    family_id = "custom"

    def __init__(self, sampler: Callable, n: int = 1, state_kind: str = REAL, name: str = "sampler"):
        super().__init__(n)
        self.sampler = sampler
        self.state_kind = state_kind
        self.name = name

    def children(self, x, u):
        return self.sampler(x, u)

    def to_dict(self):
        return {"family": self.family_id, "n": self.n, "sampler": self.name}


def make_kernel(spec: dict) -> KernelFamily:
    """Build a kernel from its config block."""
    spec = dict(spec)
    family = spec.pop("family")
    n = spec.pop("n", 1)
    if family == "donsker":
        kernel = DonskerKernel(n, spec.pop("increment", "rademacher"))
    elif family == "poisson":
        kernel = PoissonKernel(n, spec.pop("rate", 1.0))
    elif family == "symmetric_product":
        q = spec.pop("q")
        kernel = SymmetricProductKernel(IncrementLaw(**{k: tuple(v) if isinstance(v, list) else v for k, v in q.items()}), n)
    elif family == "custom":
        kernel = MixtureTableKernel(spec.pop("table"), n)
    else:
        raise KernelError(f"unknown kernel family {family!r}")
    if spec:
        raise KernelError(f"unexpected fields for {family} kernel: {sorted(spec)}")
    return kernel


# -- walk-step expectations ----------------------------------------------------------


def _try_exact_sum(phi, x, shifts, probs):
    """sum_i p_i (phi(x + s_i) - phi(x)) in rational arithmetic, or None."""
    try:
        xf = Fraction(x)
        total = Fraction(0)
        base = phi(xf)
        for s, p in zip(shifts, probs):
            total += Fraction(p) * (Fraction(phi(xf + Fraction(s))) - Fraction(base))
        return total
    except (TypeError, ValueError, AttributeError, OverflowError):
        return None


def gaussian_smoothing(phi, x, var: float):
    """``E phi(x + sqrt(var) Z)`` for standard normal ``Z``."""
    hook = getattr(phi, "gaussian_mean", None)
    if hook is not None:
        return hook(x, var)
    z, w = _normal_nodes(math.sqrt(var))
    x = np.asarray(x, dtype=float)
    return sum(wi * np.asarray(phi(x + zi), dtype=float) for zi, wi in zip(z, w))


def gaussian_smoothing_increment(phi, x, var: float):
    """``E phi(x + sqrt(var) Z) - phi(x)``, computed without cancellation when possible."""
    hook = getattr(phi, "gaussian_increment", None)
    if hook is not None:
        return hook(x, var)
    x = np.asarray(x, dtype=float)
    return gaussian_smoothing(phi, x, var) - np.asarray(phi(x), dtype=float)


def walk_step_increment(kernel: KernelFamily, phi, x, budget: int | None = None, rng=None) -> Estimate:
    """``E[phi(R_1) - phi(R_0) | R_0 = x]``, exact when the walk law is finite or normal."""
    var = kernel.gaussian_variance()
    if var is not None:
        kernel.check_state(x)
        return Estimate(float(gaussian_smoothing_increment(phi, float(x), var)))
    law = kernel.walk_law()
    if law is not None:
        exact = _try_exact_sum(phi, x, law.shifts, law.probs)
        if exact is not None:
            return Estimate(float(exact))
        xs = np.asarray([x + float(s) for s in law.shifts], dtype=float)
        w = np.asarray([float(p) for p in law.probs])
        return Estimate(float(np.dot(w, np.asarray(phi(xs), dtype=float) - float(phi(x)))))
    est = walk_step_expectation(kernel, phi, x, budget, rng)
    return Estimate(est.value - float(phi(x)), est.stderr)


def walk_step_expectation(kernel: KernelFamily, phi, x, budget: int | None = None, rng=None) -> Estimate:
    """``(P_R phi)(x)``: exact for finite or normal walk laws, Monte Carlo with ``budget`` draws otherwise."""
    kernel.check_state(x)
    var = kernel.gaussian_variance()
    if var is not None:
        return Estimate(float(gaussian_smoothing(phi, float(x), var)))
    law = kernel.walk_law()
    if law is not None:
        try:
            xf = Fraction(x)
            return Estimate(float(sum(Fraction(p) * Fraction(phi(xf + Fraction(s))) for s, p in zip(law.shifts, law.probs))))
        except (TypeError, ValueError, AttributeError, OverflowError):
            xs = np.asarray([x + float(s) for s in law.shifts], dtype=float)
            w = np.asarray([float(p) for p in law.probs])
            return Estimate(float(np.dot(w, np.asarray(phi(xs), dtype=float))))
    if budget is None:
        raise KernelError(f"{kernel!r} has no exact walk operator; pass a Monte Carlo budget")
    if budget < 2:
        raise KernelError("Monte Carlo budget must be at least 2")
    rng = np.random.default_rng(0) if rng is None else rng
    parents = np.full(budget, x, dtype=kernel.dtype)
    x0, x1 = kernel.children(parents, rng.random((budget, kernel.slots)))
    pick = rng.random(budget) < 0.5
    values = np.asarray(phi(np.where(pick, x0, x1)), dtype=float)
    return Estimate(float(values.mean()), float(values.std(ddof=1) / math.sqrt(budget)))


def has_exact_operator(kernel: KernelFamily) -> bool:
    return kernel.gaussian_variance() is not None or kernel.walk_law() is not None


def _shifted(kernel, states, s):
    return states + (int(s) if kernel.state_kind == INTEGER else float(s))


def walk_steps_expectation(kernel: KernelFamily, phi, states: np.ndarray, steps: int = 1) -> np.ndarray:
    """Vectorised ``P_R^steps phi`` at each state (exact operators only)."""
    states = np.asarray(states)
    if steps == 0:
        return np.asarray(phi(states), dtype=float) * np.ones(states.shape)
    var = kernel.gaussian_variance(steps)
    if var is not None:
        return np.asarray(gaussian_smoothing(phi, states.astype(float), var), dtype=float) * np.ones(states.shape)
    if kernel.walk_law() is None:
        raise KernelError(f"{kernel!r} has no exact walk operator")
    law = kernel.walk_law_steps(steps)
    out = np.zeros(states.shape, dtype=float)
    for s, p in zip(law.shifts, law.probs):
        out += float(p) * np.asarray(phi(_shifted(kernel, states, s)), dtype=float)
    return out


def apply_walk_operator(kernel: KernelFamily, phi, states: np.ndarray) -> np.ndarray:
    """Vectorised ``P_R phi`` at each state."""
    return walk_steps_expectation(kernel, phi, states, 1)


def walk_drift(kernel: KernelFamily, phi, states: np.ndarray) -> np.ndarray:
    """Vectorised ``P_R phi - phi``, differenced term by term to limit cancellation."""
    states = np.asarray(states)
    var = kernel.gaussian_variance()
    if var is not None:
        return np.asarray(gaussian_smoothing_increment(phi, states.astype(float), var), dtype=float) * np.ones(states.shape)
    law = kernel.walk_law()
    if law is None:
        raise KernelError(f"{kernel!r} has no exact walk operator")
    base = np.asarray(phi(states), dtype=float)
    out = np.zeros(states.shape, dtype=float)
    for s, p in zip(law.shifts, law.probs):
        out += float(p) * (np.asarray(phi(_shifted(kernel, states, s)), dtype=float) - base)
    return out
