from fractions import Fraction

import numpy as np
import pytest

from treechain import oracle
from treechain.engine import full_tree_batch
from treechain.kernels import DonskerKernel, KernelError, MixtureTableKernel, PoissonKernel
from treechain.measures import identity, indicator, square
from treechain.rng import VertexRngPolicy

LATTICE = [DonskerKernel(1), PoissonKernel(8, 1.0)]
PHIS = [identity(), square(), indicator(1)]


def test_rademacher_generation_two():
    assert oracle.expected_integral(DonskerKernel(1), 0, 2, square()) == 2
    law = oracle.generation_law(DonskerKernel(1), 0, 2)
    assert sum(law.values()) == 1
    assert all(sum(x * x for x in s) / 4 == 2 for s in law)


def test_poisson_identity_mean():
    assert oracle.expected_integral(PoissonKernel(8), 0, 3, identity()) == Fraction(3, 8)


def test_generation_zero():
    assert oracle.expected_integral(DonskerKernel(1), Fraction(1, 2), 0, square()) == Fraction(1, 4)


@pytest.mark.parametrize("kernel", LATTICE + [MixtureTableKernel([(1, 0, Fraction(1, 3)), (-1, 2, Fraction(2, 3))])])
def test_enumeration_matches_walk_law(kernel):
    for k in range(5):
        for phi in PHIS:
            assert oracle.expected_integral(kernel, 0, k, phi) == oracle.walk_expectation(kernel, 0, k, phi)


@pytest.mark.parametrize("kernel", LATTICE)
def test_second_moment_decomposition(kernel):
    for k in range(4):
        for phi in PHIS:
            d = oracle.second_moment_decomposition(kernel, 0, k, phi)
            assert d.gap == 0
            if k:
                assert oracle.distinct_pair_moment_enumerated(kernel, 0, k, phi) == d.off_diagonal


def test_pair_covariance_exact_value():
    assert oracle.pair_covariance_exact(DonskerKernel(1), 0, 2, identity()) == Fraction(-2, 3)


def test_simulation_within_four_se():
    kernel = PoissonKernel(8)
    states = full_tree_batch(kernel, 0, 4, VertexRngPolicy(3).replicate_hashes("oracle", 20_000))
    vals = states.mean(axis=1)
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - float(oracle.expected_integral(kernel, 0, 4, identity()))) <= 4 * se


def test_oracle_limits():
    with pytest.raises(ValueError):
        oracle.generation_law(DonskerKernel(1), 0, 5)
    with pytest.raises(KernelError):
        oracle.generation_law(DonskerKernel(1, "gaussian"), 0, 2)
