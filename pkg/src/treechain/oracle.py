"""Exact rational oracles for kernels with a finite pair law.

Brute force: every assignment of pair-law rows to the ``2^k - 1`` internal
vertices of ``T_{<k}`` is enumerated (outcomes with the same generation-``k``
state vector are merged). Independently, walk laws and the MRCA split give
``E phi(R_k)`` and the distinct-pair moment without touching the tree, so
comparing the two routes checks identities rather than restating them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from fractions import Fraction

from .kernels import KernelError, KernelFamily

MAX_ORACLE_GENERATION = 4


def _rows(kernel: KernelFamily):
    rows = kernel.pair_law()
    if rows is None:
        raise KernelError(f"{kernel!r} has no finite pair law")
    return [(s0, s1, Fraction(p)) for s0, s1, p in rows]


def generation_law(kernel: KernelFamily, x0, k: int) -> dict[tuple, Fraction]:
    """Exact law of the generation-``k`` state vector, leaves in path order."""
    if not 0 <= k <= MAX_ORACLE_GENERATION:
        raise ValueError(f"oracle enumeration is limited to k <= {MAX_ORACLE_GENERATION}")
    return dict(_generation_law(kernel, x0, k))


@lru_cache(maxsize=32)
def _generation_law(kernel: KernelFamily, x0, k: int):
    rows = _rows(kernel)
    law = {(x0,): Fraction(1)}
    for _ in range(k):
        nxt: dict[tuple, Fraction] = {}
        for states, p in law.items():
            partial = {(): p}
            for x in states:
                step: dict[tuple, Fraction] = {}
                for acc, q in partial.items():
                    for s0, s1, r in rows:
                        key = acc + (x + s0, x + s1)
                        step[key] = step.get(key, 0) + q * r
                partial = step
            for acc, q in partial.items():
                nxt[acc] = nxt.get(acc, 0) + q
        law = nxt
    return tuple(law.items())


@lru_cache(maxsize=32)
def _multiset_law(kernel: KernelFamily, x0, k: int):
    """Generation law merged over leaf order; enough for symmetric statistics."""
    out: dict[tuple, Fraction] = {}
    for states, p in generation_law(kernel, x0, k).items():
        key = tuple(sorted(states))
        out[key] = out.get(key, 0) + p
    return tuple(out.items())


def _mean(values):
    return sum(values, Fraction(0)) / len(values)


def expected_integral(kernel: KernelFamily, x0, k: int, phi) -> Fraction:
    """``E <Z_k, phi>`` by enumeration."""
    return sum((p * _mean([Fraction(phi(x)) for x in s]) for s, p in _multiset_law(kernel, x0, k)),
               Fraction(0))


def expected_integral_squared(kernel: KernelFamily, x0, k: int, phi) -> Fraction:
    """``E <Z_k, phi>^2`` by enumeration."""
    return sum((p * _mean([Fraction(phi(x)) for x in s]) ** 2 for s, p in _multiset_law(kernel, x0, k)),
               Fraction(0))


def distinct_pair_moment_enumerated(kernel: KernelFamily, x0, k: int, phi) -> Fraction:
    """``E phi(X_S1) phi(X_S2)`` for a uniform ordered pair of distinct leaves, by enumeration."""
    if k == 0:
        raise ValueError("generation 0 has no distinct pair")
    total = Fraction(0)
    for s, p in _multiset_law(kernel, x0, k):
        f = [Fraction(phi(x)) for x in s]
        m = len(f)
        total += p * (sum(f) ** 2 - sum(v * v for v in f)) / (m * (m - 1))
    return total


def _walk_dist(kernel: KernelFamily, x0, steps: int) -> dict:
    law = kernel.walk_law_steps(steps)
    return {x0 + s: Fraction(p) for s, p in zip(law.shifts, law.probs)}


def walk_expectation(kernel: KernelFamily, x0, k: int, phi) -> Fraction:
    """``E phi(R_k)`` from the ``k``-step walk law."""
    return sum((p * Fraction(phi(x)) for x, p in _walk_dist(kernel, x0, k).items()), Fraction(0))


def mrca_pair_moment(kernel: KernelFamily, x0, k: int, phi) -> Fraction:
    """Distinct-pair moment via the MRCA split.

    Given MRCA depth ``j`` (pmf ``2^{-(j+1)}`` renormalised over ``j < k``), the
    shared ancestor follows the ``j``-step walk, its children come from one
    pair-law row, and the two leaves then move by independent walks of
    ``k - j - 1`` steps.
    """
    if k == 0:
        raise ValueError("generation 0 has no distinct pair")
    rows = _rows(kernel)
    norm = 1 - Fraction(1, 2**k)
    total = Fraction(0)
    for j in range(k):
        weight = Fraction(1, 2 ** (j + 1)) / norm
        tail = _walk_dist(kernel, 0, k - j - 1)
        g = {}

        def g_at(y):
            if y not in g:
                g[y] = sum((q * Fraction(phi(y + s)) for s, q in tail.items()), Fraction(0))
            return g[y]

        inner = Fraction(0)
        for a, pa in _walk_dist(kernel, x0, j).items():
            for s0, s1, r in rows:
                inner += pa * r * g_at(a + s0) * g_at(a + s1)
        total += weight * inner
    return total


@dataclass
class Decomposition:
    lhs: Fraction
    diagonal: Fraction
    off_diagonal: Fraction
    rhs: Fraction

    @property
    def gap(self) -> Fraction:
        return self.lhs - self.rhs


def second_moment_decomposition(kernel: KernelFamily, x0, k: int, phi) -> Decomposition:
    """``E<Z_k,phi>^2`` against ``2^{-k} E phi^2(R_k) + (1 - 2^{-k}) E phi(X_S1) phi(X_S2)``.

    The left side comes from enumeration; the right side only from walk laws
    and the MRCA split.
    """
    lhs = expected_integral_squared(kernel, x0, k, phi)
    diag = walk_expectation(kernel, x0, k, lambda x: Fraction(phi(x)) ** 2)
    if k == 0:
        return Decomposition(lhs, diag, Fraction(0), diag)
    off = mrca_pair_moment(kernel, x0, k, phi)
    w = Fraction(1, 2**k)
    return Decomposition(lhs, diag, off, w * diag + (1 - w) * off)


def pair_covariance_exact(kernel: KernelFamily, x0, k: int, phi) -> Fraction:
    """``Cov[phi(X_S1), phi(X_S2)]`` for distinct uniform leaves of generation ``k``."""
    return mrca_pair_moment(kernel, x0, k, phi) - walk_expectation(kernel, x0, k, phi) ** 2
