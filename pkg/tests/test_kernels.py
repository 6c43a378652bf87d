import numpy as np
import pytest
from scipy import stats

from treechain.kernels import (
    DonskerKernel,
    IncrementLaw,
    KernelError,
    MixtureTableKernel,
    PoissonKernel,
    SamplerKernel,
    SymmetricProductKernel,
    apply_walk_operator,
    make_kernel,
    walk_step_expectation,
)
from treechain.measures import constant, identity, indicator, square


def draw_children(kernel, x, count, seed):
    parents = np.full(count, x, dtype=kernel.dtype)
    return kernel.children(parents, np.random.default_rng(seed).random((count, kernel.slots)))


def test_donsker_rademacher_children_at_zero():
    x0, x1 = draw_children(DonskerKernel(1), 0.0, 10_000, 1)
    pairs = set(zip(x0.tolist(), x1.tolist()))
    assert pairs == {(1.0, -1.0), (-1.0, 1.0)}
    assert abs(np.mean(x0 == 1.0) - 0.5) < 4 * 0.5 / 100


@pytest.mark.parametrize("inc", ["rademacher", "gaussian"])
def test_antithetic_identity(inc):
    x = np.random.default_rng(2).normal(size=5000)
    u = np.random.default_rng(3).random((5000, 4))
    c0, c1 = DonskerKernel(7, inc).children(x, u)
    assert np.array_equal(c0 + c1, 2 * x) or np.allclose(c0 + c1, 2 * x, rtol=0, atol=1e-15)


def test_poisson_left_child_copies_parent():
    x = np.arange(1000) % 7
    c0, c1 = PoissonKernel(10).children(x, np.random.default_rng(0).random((1000, 4)))
    assert np.array_equal(c0, x)
    assert np.all(c1 >= x) and np.all(c1 - x <= 1)


def test_symmetric_product_point_mass():
    k = SymmetricProductKernel(IncrementLaw("point_mass", value=0.5))
    c0, c1 = draw_children(k, 2.0, 10, 0)
    assert np.all(c0 == 2.5) and np.all(c1 == 2.5)
    assert k.sample_walk_step(2.0, np.random.default_rng(0)) == 2.5


def test_walk_step_rademacher_sign():
    rng = np.random.default_rng(4)
    steps = np.array([DonskerKernel(1).sample_walk_step(0.0, rng) for _ in range(20_000)])
    assert set(steps.tolist()) == {-1.0, 1.0}
    assert abs(steps.mean()) < 4 / np.sqrt(20_000)


def test_poisson_walk_jump_frequency():
    rng = np.random.default_rng(5)
    k = PoissonKernel(20, rate=1.0)
    steps = np.array([k.sample_walk_step(0, rng) for _ in range(40_000)])
    p = 1 / 20
    assert abs(np.mean(steps > 0) - p) < 4 * np.sqrt(p * (1 - p) / 40_000)


@pytest.mark.parametrize("kernel", [
    DonskerKernel(4), DonskerKernel(4, "gaussian"), PoissonKernel(10),
    SymmetricProductKernel(IncrementLaw("gaussian", sigma=0.5)),
    MixtureTableKernel([(0.0, 1.0, 0.3), (-1.0, 2.0, 0.7)]),
])
def test_marginal_consistency(kernel):
    m = 100_000
    x0, x1 = draw_children(kernel, 0, m, 10)
    mix = np.where(np.random.default_rng(11).random(m) < 0.5, x0, x1)
    rng = np.random.default_rng(12)
    walk = np.array([kernel.sample_walk_step(kernel.dtype(0), rng) for _ in range(20_000)])
    if kernel.state_kind == "integer" or len(np.unique(mix)) < 20:
        vals = np.union1d(np.unique(mix), np.unique(walk))
        table = np.array([[np.sum(mix == v) for v in vals], [np.sum(walk == v) for v in vals]])
        table = table[:, table.sum(axis=0) > 0]
        assert stats.chi2_contingency(table).pvalue > 0.01
    else:
        assert stats.ks_2samp(mix, walk).pvalue > 0.01


def test_walk_step_expectation_examples():
    assert walk_step_expectation(DonskerKernel(4), square(), 0.0).value == 0.25
    assert walk_step_expectation(PoissonKernel(10, 1.0), identity(), 0).value == pytest.approx(0.1, abs=1e-15)
    for k in (DonskerKernel(3), PoissonKernel(5), DonskerKernel(2, "gaussian")):
        assert walk_step_expectation(k, constant(2.5), 0).value == pytest.approx(2.5, abs=1e-12)


@pytest.mark.parametrize("kernel,phi,x", [
    (DonskerKernel(4), square(), 0.3),
    (DonskerKernel(9, "gaussian"), indicator(0.1), 0.0),
    (PoissonKernel(8), square(), 2),
])
def test_exact_operator_matches_monte_carlo(kernel, phi, x):
    exact = walk_step_expectation(kernel, phi, x).value
    mc_kernel = SamplerKernel(kernel.children, kernel.n, kernel.state_kind)
    mc = walk_step_expectation(mc_kernel, phi, x, budget=100_000, rng=np.random.default_rng(7))
    assert mc.stderr > 0
    assert abs(mc.value - exact) <= 4 * mc.stderr + 1e-12


def test_sampler_kernel_needs_budget():
    k = SamplerKernel(DonskerKernel(1).children)
    with pytest.raises(KernelError):
        walk_step_expectation(k, square(), 0.0)


def test_apply_walk_operator_vectorised():
    k = DonskerKernel(4)
    xs = np.linspace(-1, 1, 9)
    assert np.allclose(apply_walk_operator(k, square(), xs), xs**2 + 0.25, rtol=0, atol=1e-15)


def test_state_space_mismatch():
    with pytest.raises(KernelError):
        PoissonKernel(10).sample_children(-1, np.random.default_rng(0))
    with pytest.raises(KernelError):
        PoissonKernel(10).sample_children(0.5, np.random.default_rng(0))
    with pytest.raises(KernelError):
        DonskerKernel(1).sample_children(float("nan"), np.random.default_rng(0))


def test_poisson_requires_n_above_twice_rate():
    with pytest.raises(KernelError):
        PoissonKernel(2, rate=1.0)


def test_make_kernel_strict():
    assert make_kernel({"family": "donsker", "n": 4, "increment": "gaussian"}) == DonskerKernel(4, "gaussian")
    assert make_kernel({"family": "custom", "table": [[1, -1, 0.5], [-1, 1, 0.5]]}).walk_law() is not None
    with pytest.raises(KernelError):
        make_kernel({"family": "donsker", "rate": 2})
    with pytest.raises(KernelError):
        make_kernel({"family": "nope"})


def test_walk_law_steps_matches_convolution():
    k = DonskerKernel(4)
    closed = k.walk_law_steps(5)
    brute = super(DonskerKernel, k).walk_law_steps(5)
    assert dict(zip(closed.shifts, closed.probs)) == dict(zip(brute.shifts, brute.probs))
