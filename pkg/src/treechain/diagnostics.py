"""Statistical checks of the law of large numbers for the empirical measure process.

* martingale: ``<Z_j, phi> - <Z_0, phi>`` minus its exact compensator
  ``sum_k <Z_{k-1}, P_R phi - phi>`` has mean zero and shrinks with ``n``;
* pair covariance: ``Cov[phi(X_S1), phi(X_S2)]`` for two distinct uniform
  leaves, the term that controls ``Var <Z, phi>``;
* variance decay of ``<Z_{[nt]}, phi>`` across ``n``;
* the LLN verdict: distance between a large joint leaf sample and the
  analytic limit law.

Replicates use independent trees with replicate-indexed seeds, so results do
not depend on how the replicates are spread over workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .engine import DEFAULT_FULL_TREE_CAP, full_tree_batch, joint_leaf_states, random_leaf_words, common_prefix_words
from .kernels import INTEGER, KernelFamily, KernelError, has_exact_operator, walk_drift, walk_steps_expectation
from .limits import LimitLaw
from .measures import (
    MIN_REPLICATES,
    EmpiricalMeasure,
    Interval,
    bootstrap_interval,
    covariance,
    integrate,
    ks_distance,
    sample_variance,
    tv_distance_discrete,
)
from .rng import VertexRngPolicy
from .tree import mrca_depth_pmf


class DiagnosticError(ValueError):
    pass


def generations_for(n: int, t: float) -> int:
    """``[n t]``; the tiny offset keeps e.g. ``n * 0.1 * 10`` from rounding down."""
    return int(math.floor(n * t + 1e-9))


def _require_replicates(replicates: int):
    if replicates < MIN_REPLICATES:
        raise DiagnosticError(f"need at least {MIN_REPLICATES} replicates, got {replicates}")


def _map_chunks(fn: Callable[[slice], np.ndarray], total: int, workers: int) -> list:
    """Apply ``fn`` to contiguous replicate slices; results in replicate order."""
    workers = max(1, min(workers, total))
    bounds = np.linspace(0, total, workers + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if workers == 1:
        return [fn(slices[0])]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, slices))


# -- martingale -------------------------------------------------------------------------------


@dataclass
class MartingalePath:
    times: np.ndarray
    values: np.ndarray
    compensator: np.ndarray
    observed: np.ndarray

    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


def _martingale_block(kernel, x0, steps, phi, seed_hashes, cap):
    reps = len(seed_hashes)
    observed = np.empty((reps, steps + 1))
    drift = np.zeros((reps, steps + 1))

    def visit(k, states):
        observed[:, k] = np.mean(np.asarray(phi(states), dtype=float), axis=1)
        if k < steps:
            drift[:, k] = np.mean(walk_drift(kernel, phi, states), axis=1)

    full_tree_batch(kernel, x0, steps, seed_hashes, visit, cap=cap)
    compensator = np.zeros((reps, steps + 1))
    compensator[:, 1:] = np.cumsum(drift[:, :-1], axis=1)
    values = observed - observed[:, :1] - compensator
    return np.stack([values, compensator, observed])


def martingale_batch(kernel: KernelFamily, x0, T: float, phi, seed_hashes: np.ndarray,
                     workers: int = 1, cap: int = DEFAULT_FULL_TREE_CAP):
    """Martingale paths for many independent trees: arrays (values, compensator, observed)."""
    if not has_exact_operator(kernel):
        raise DiagnosticError(f"{kernel!r} has no exact walk operator")
    steps = generations_for(kernel.n, T)
    seed_hashes = np.asarray(seed_hashes, dtype=np.uint64)
    parts = _map_chunks(lambda s: _martingale_block(kernel, x0, steps, phi, seed_hashes[s], cap),
                        len(seed_hashes), workers)
    values, compensator, observed = np.concatenate(parts, axis=1)
    return values, compensator, observed


def martingale_path(kernel: KernelFamily, x0, T: float, policy: VertexRngPolicy, phi,
                    cap: int = DEFAULT_FULL_TREE_CAP) -> MartingalePath:
    """One tree's martingale on the grid ``t_j = j/n``, ``j = 0..[nT]``."""
    values, comp, obs = martingale_batch(kernel, x0, T, phi, np.array([policy.h0]), cap=cap)
    steps = values.shape[1] - 1
    return MartingalePath(np.arange(steps + 1) / kernel.n, values[0], comp[0], obs[0])


@dataclass
class MartingaleSummary:
    n: int
    T: float
    phi: str
    replicates: int
    final_mean: float
    final_stderr: float
    increment_means: list
    increment_stderrs: list
    compensator_final: float
    sup_median: float

    def to_dict(self) -> dict:
        return dict(vars(self))


def martingale_summary(kernel: KernelFamily, x0, T: float, phi, replicates: int, policy: VertexRngPolicy,
                       workers: int = 1, cap: int = DEFAULT_FULL_TREE_CAP) -> MartingaleSummary:
    _require_replicates(replicates)
    hashes = policy.replicate_hashes(f"martingale/n={kernel.n}", replicates)
    values, comp, _ = martingale_batch(kernel, x0, T, phi, hashes, workers, cap)
    inc = np.diff(values, axis=1)
    r = math.sqrt(replicates)
    return MartingaleSummary(
        kernel.n, T, getattr(phi, "name", "phi"), replicates,
        float(values[:, -1].mean()), float(values[:, -1].std(ddof=1) / r),
        [float(v) for v in inc.mean(axis=0)], [float(v) for v in inc.std(axis=0, ddof=1) / r],
        float(comp[0, -1]), float(np.median(np.max(np.abs(values), axis=1))),
    )


def martingale_sup_decay(kernel: KernelFamily, phi, x0, T: float, n_list: Sequence[int], replicates: int,
                         policy: VertexRngPolicy, workers: int = 1,
                         cap: int = DEFAULT_FULL_TREE_CAP) -> dict[int, float]:
    """Median over replicates of ``sup_{s<=T} |M_s|`` for each scale ``n``."""
    _require_replicates(replicates)
    out = {}
    for n in n_list:
        k = kernel.rescaled(n)
        hashes = policy.replicate_hashes(f"martingale/n={n}", replicates)
        values, _, _ = martingale_batch(k, x0, T, phi, hashes, workers, cap)
        out[n] = float(np.median(np.max(np.abs(values), axis=1)))
    return out


# -- pair covariance ------------------------------------------------------------------------------


@dataclass
class PairCovReport:
    n: int
    t: float
    phi: str
    replicates: int
    generation: int
    estimate: float
    interval: Interval
    conditional_estimate: float | None
    conditional_interval: Interval | None
    remainder_bound: float
    phi_bounded: bool

    def to_dict(self) -> dict:
        out = dict(vars(self))
        out["interval"] = self.interval.to_dict()
        out["conditional_interval"] = None if self.conditional_interval is None else self.conditional_interval.to_dict()
        return out


def distinct_pair_words(rng: np.random.Generator, count: int, depth: int):
    """``count`` ordered pairs of distinct uniform leaves (rejection on collision)."""
    if depth == 0:
        raise DiagnosticError("generation 0 has no distinct leaf pair")
    a = random_leaf_words(rng, count, depth)
    b = random_leaf_words(rng, count, depth)
    clash = np.all(a == b, axis=1)
    while clash.any():
        b[clash] = random_leaf_words(rng, int(clash.sum()), depth)
        clash = np.all(a == b, axis=1)
    return a, b


def _conditional_values(kernel, phi, anc, depth, split):
    """``E[phi(R_m) | R_0 = anc]`` with ``m = depth - split - 1`` remaining steps."""
    out = np.empty(len(anc))
    for j in np.unique(split):
        rows = split == j
        out[rows] = walk_steps_expectation(kernel, phi, anc[rows], int(depth - j - 1))
    return out


def pair_covariance(kernel: KernelFamily, x0, t: float, phi, replicates: int, policy: VertexRngPolicy,
                    level: float = 0.99, resamples: int = 2000, workers: int = 1) -> PairCovReport:
    """Covariance of ``phi`` at two distinct uniform leaves of generation ``[nt]``.

    Each replicate is an independent tree, sampled only along the two leaves'
    paths, so ``[nt]`` may be far beyond the full-tree cap. Alongside the raw
    estimate, the report carries the same covariance computed from the
    conditional expectations given the two children of the leaves' MRCA (the
    leaves are conditionally independent given those), when the walk law
    allows it.
    """
    _require_replicates(replicates)
    depth = generations_for(kernel.n, t)
    label = f"paircov/n={kernel.n}"
    a, b = distinct_pair_words(policy.generator(label + "/leaves"), replicates, depth)
    split = common_prefix_words(a, b, depth)
    words = np.concatenate([a, b])
    rows = np.concatenate([np.arange(replicates)] * 2)
    target = np.concatenate([split + 1] * 2)
    hashes = policy.replicate_hashes(label, replicates)

    def block(s: slice):
        sel = np.concatenate([np.arange(s.start, s.stop), replicates + np.arange(s.start, s.stop)])
        leaf, anc = joint_leaf_states(kernel, x0, depth, words[sel], hashes, rows[sel], target[sel])
        return np.stack([leaf, anc]).astype(float)

    parts = _map_chunks(block, replicates, workers)
    # reassemble first leaves then second leaves in replicate order
    leaf1 = np.concatenate([p[0, : p.shape[1] // 2] for p in parts])
    leaf2 = np.concatenate([p[0, p.shape[1] // 2 :] for p in parts])
    anc1 = np.concatenate([p[1, : p.shape[1] // 2] for p in parts])
    anc2 = np.concatenate([p[1, p.shape[1] // 2 :] for p in parts])

    f1 = np.asarray(phi(leaf1), dtype=float)
    f2 = np.asarray(phi(leaf2), dtype=float)
    boot = policy.generator(label + "/bootstrap")
    raw = bootstrap_interval(covariance, [f1, f2], boot, resamples, level)

    cond_est, cond_int = None, None
    try:
        g1 = _conditional_values(kernel, phi, anc1, depth, split)
        g2 = _conditional_values(kernel, phi, anc2, depth, split)
        cond_int = bootstrap_interval(covariance, [g1, g2], boot, resamples, level)
        cond_est = cond_int.estimate
    except KernelError:
        pass

    sup_phi = float(np.max(np.abs(np.concatenate([f1, f2]))))
    return PairCovReport(kernel.n, t, getattr(phi, "name", "phi"), replicates, depth, raw.estimate, raw,
                         cond_est, cond_int, 2.0 * sup_phi**2 * 2.0**-depth, bool(getattr(phi, "bounded", True)))


# -- variance decay -------------------------------------------------------------------------------


@dataclass
class VarianceRow:
    n: int
    generation: int
    variance: float
    interval: Interval
    mean: float

    def to_dict(self) -> dict:
        out = dict(vars(self))
        out["interval"] = self.interval.to_dict()
        return out


def integrals_at_generation(kernel: KernelFamily, x0, k: int, phi, seed_hashes: np.ndarray,
                            workers: int = 1, cap: int = DEFAULT_FULL_TREE_CAP) -> np.ndarray:
    """``<Z_k, phi>`` for each independent tree."""
    seed_hashes = np.asarray(seed_hashes, dtype=np.uint64)

    def block(s: slice):
        states = full_tree_batch(kernel, x0, k, seed_hashes[s], cap=cap)
        return np.mean(np.asarray(phi(states), dtype=float), axis=1)

    return np.concatenate(_map_chunks(block, len(seed_hashes), workers))


def variance_decay(kernel: KernelFamily, x0, phi, t: float, n_list: Sequence[int], replicates: int,
                   policy: VertexRngPolicy, level: float = 0.99, resamples: int = 2000,
                   workers: int = 1, cap: int = DEFAULT_FULL_TREE_CAP) -> list[VarianceRow]:
    """Sample variance of ``<Z_{[nt]}, phi>`` over independent trees, per ``n``."""
    if replicates < 2:
        raise DiagnosticError("need at least two replicates")
    for n in n_list:
        if generations_for(n, t) > cap:
            raise DiagnosticError(f"generation {generations_for(n, t)} for n={n} exceeds the full-tree cap {cap}")
    rows = []
    for n in n_list:
        k = generations_for(n, t)
        label = f"variance/n={n}"
        vals = integrals_at_generation(kernel.rescaled(n), x0, k, phi,
                                       policy.replicate_hashes(label, replicates), workers, cap)
        ci = bootstrap_interval(sample_variance, [vals], policy.generator(label + "/bootstrap"), resamples, level)
        rows.append(VarianceRow(n, k, ci.estimate, ci, float(vals.mean())))
    return rows


# -- LLN verdict -------------------------------------------------------------------------------------


@dataclass
class LlnVerdict:
    family: str
    n: int
    t: float
    m: int
    generation: int
    distance_kind: str
    distance: float
    threshold: float
    passed: bool
    law: dict
    mean: float
    second_moment: float
    measure: EmpiricalMeasure | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = dict(vars(self))
        out.pop("measure")
        return out


MIN_LLN_SAMPLE = 1000


def lln_check(kernel: KernelFamily, x0, t: float, m: int, law: LimitLaw, threshold: float,
              policy: VertexRngPolicy) -> LlnVerdict:
    """Distance between ``m`` jointly sampled leaves of generation ``[nt]`` and ``law``.

    KS for real-valued families against a continuous law, total variation for
    integer-valued families; passes iff the distance is below ``threshold``.
    """
    if m < MIN_LLN_SAMPLE:
        raise DiagnosticError(f"lln_check needs m >= {MIN_LLN_SAMPLE}, got {m}")
    integer = kernel.state_kind == INTEGER
    if law.kind == "normal" and integer:
        raise DiagnosticError("a normal limit law needs a real-valued family")
    if law.kind == "poisson" and not integer:
        raise DiagnosticError("a poisson limit law needs an integer-valued family")
    depth = generations_for(kernel.n, t)
    words = random_leaf_words(policy.generator("lln/leaves"), m, depth)
    states = joint_leaf_states(kernel, x0, depth, words, np.array([policy.replicate_hashes("lln", 1)[0]]))
    Z = EmpiricalMeasure(states)
    if law.kind == "point_mass":
        kind, dist = "tv", float(np.mean(states != law.x0))
    elif integer:
        kind, dist = "tv", tv_distance_discrete(Z, law.pmf)
    else:
        kind, dist = "ks", ks_distance(Z, law.cdf)
    return LlnVerdict(kernel.family_id, kernel.n, t, m, depth, kind, dist, threshold, bool(dist < threshold),
                      law.to_dict(), integrate(Z, lambda x: x.astype(float)),
                      integrate(Z, lambda x: np.square(x, dtype=float)), Z)


# -- MRCA law ---------------------------------------------------------------------------------------


@dataclass
class MrcaReport:
    k: int
    pairs: int
    observed: list
    expected: list
    statistic: float
    dof: int
    p_value: float
    significance: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(vars(self))


def mrca_depth_test(k: int, pairs: int, rng: np.random.Generator, significance: float = 0.01) -> MrcaReport:
    """Chi-square goodness of fit of sampled MRCA depths against ``mrca_depth_pmf(k)``.

    Pairs are independent uniform leaves (coincidence allowed, depth ``k``).
    Trailing bins are pooled until every expected count is at least 5.
    """
    if k < 1:
        raise DiagnosticError("need k >= 1 for a nontrivial MRCA law")
    a = random_leaf_words(rng, pairs, k)
    b = random_leaf_words(rng, pairs, k)
    depths = common_prefix_words(a, b, k)
    observed = np.bincount(depths, minlength=k + 1).astype(float)
    expected = pairs * mrca_depth_pmf(k)
    while len(expected) > 2 and expected[-1] < 5:
        expected[-2] += expected[-1]
        observed[-2] += observed[-1]
        expected, observed = expected[:-1], observed[:-1]
    stat, p = stats.chisquare(observed, expected)
    return MrcaReport(k, pairs, [int(v) for v in observed], [float(v) for v in expected], float(stat),
                      len(expected) - 1, float(p), significance, bool(p >= significance))
