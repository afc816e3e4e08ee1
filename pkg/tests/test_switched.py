import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from pdmplab import stats as st
from pdmplab.core import ModelError, RateMatrix, SwitchedSystem, linear_field, scalar_linear_field, \
    stationary_distribution
from pdmplab.switched import (PLANAR_M0, PLANAR_M1, PerronError, PlanarSwitched, PreconditionError,
                              average_criterion, averaged_field, averaged_ode_limit,
                              contraction_coefficient, critical_rate, derivative_check,
                              feynman_kac_monte_carlo, lotka_volterra_field, lyapunov_exponent,
                              moment_dichotomy, moment_feynman_kac, moment_growth_rate,
                              planar_closed_form, product_chain, switched_linear,
                              two_point_coupling)
from pdmplab.core import Box

SYM = RateMatrix.symmetric(2, 1.0)


def random_generator(gen, n):
    q = gen.uniform(0.1, 3.0, (n, n))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return RateMatrix(q)


# moments -----------------------------------------------------------------

def test_growth_rate_at_zero(gen):
    for n in (2, 3, 5):
        q = random_generator(gen, n)
        g = moment_growth_rate(q, gen.normal(size=n), 0.0)
        assert abs(g.value) < 1e-10
        assert np.allclose(g.left_vector, stationary_distribution(q), atol=1e-9)


@pytest.mark.parametrize("p", [0.5, 1.0, 3.0])
def test_growth_rate_closed_form(p):
    assert abs(moment_growth_rate(SYM, [1, -1], p).value - (-1 + math.sqrt(1 + p * p))) < 1e-10


def test_growth_rate_extinction_example():
    lam = moment_growth_rate(SYM, [-2, 1], 0.1).value
    assert abs(lam - (-2.1 + math.sqrt(4.09)) / 2) < 1e-12
    assert lam < 0


def test_growth_rate_reducible():
    with pytest.raises(PerronError):
        moment_growth_rate(RateMatrix([[0, 0], [1, -1]]), [1, 1], 1.0)


def test_feynman_kac_trivial_cases():
    assert moment_feynman_kac(SYM, [1, -1], 2.0, 0.0, [1, 0]) == 1.0
    one = RateMatrix([[0.0]])
    assert math.isclose(moment_feynman_kac(one, [0.3], 2.0, 1.5, [1.0]), math.exp(0.9), rel_tol=1e-12)


def test_feynman_kac_monte_carlo():
    exact = moment_feynman_kac(SYM, [1, -1], 1.0, 5.0, [1, 0])
    est = feynman_kac_monte_carlo(SYM, [1, -1], 1.0, 5.0, [1, 0], 100_000, 2)
    assert abs(st.z_score(est, exact)) <= 3


def test_dichotomy_verdicts():
    rep = moment_dichotomy(SYM, [-2, 1])
    assert math.isclose(rep.mean_rate, -0.5)
    assert rep.growth_at_p_star < 0
    assert rep.window[1] > 0.1
    assert moment_dichotomy(SYM, [1, -1]).regime == "critical, undetermined"
    assert moment_dichotomy(SYM, [0.5, 1]).regime == "all moments diverge"
    const = moment_dichotomy(SYM, [-0.7, -0.7])
    assert math.isclose(const.mean_rate, -0.7)
    assert math.isclose(moment_growth_rate(SYM, [-0.7, -0.7], 2.0).value, -1.4, abs_tol=1e-12)


@pytest.mark.parametrize("a, slope", [([1, -1], 0.0), ([-2, 1], -0.5), ([0.3, 0.3], 0.3)])
def test_derivative_examples(a, slope):
    assert derivative_check(SYM, a) <= 1e-6
    h = 1e-5
    d = (moment_growth_rate(SYM, a, h).value - moment_growth_rate(SYM, a, -h).value) / (2 * h)
    assert abs(d - slope) < 1e-6


@settings(max_examples=50, deadline=None)
@given(hs.integers(2, 5), hs.integers(0, 2**32 - 1))
def test_derivative_battery(n, seed):
    gen = np.random.default_rng(seed)
    q = random_generator(gen, n)
    assert derivative_check(q, gen.normal(size=n)) <= 1e-6


def test_jensen_monotonicity():
    # lambda_p < 0 at p = 0.1, so lower moments decay at large t
    a, q_order = [-2, 1], 0.05
    exact = [moment_feynman_kac(SYM, a, q_order, t, [0.5, 0.5]) for t in (5, 10, 20, 40)]
    assert all(x > y for x, y in zip(exact, exact[1:]))
    ests = [feynman_kac_monte_carlo(SYM, a, q_order, t, [0.5, 0.5], 20_000, 10 + k)
            for k, t in enumerate((5, 10, 20, 40))]
    assert st.non_increasing([e.mean for e in ests], [e.se for e in ests], k=3)


# planar ------------------------------------------------------------------

def test_planar_closed_form_examples():
    x, y = planar_closed_form(1.0, 0.0, math.pi / 2)
    assert math.isclose(math.hypot(x, y), 4 * math.exp(-math.pi / 2), rel_tol=1e-12)
    assert planar_closed_form(0.3, -0.2, 0.0) == (0.3, -0.2)
    x, y = planar_closed_form(0.0, 1.0, math.pi)
    assert abs(x) < 1e-15 and math.isclose(y, -math.exp(-math.pi), rel_tol=1e-12)


def test_planar_closed_form_solves_ode():
    h = 1e-6
    for t in np.linspace(0.1, 5.0, 25):
        x1 = np.array(planar_closed_form(0.4, -1.3, t + h))
        x0 = np.array(planar_closed_form(0.4, -1.3, t - h))
        here = np.array(planar_closed_form(0.4, -1.3, t))
        assert np.allclose((x1 - x0) / (2 * h), PLANAR_M1 @ here, atol=1e-6)


def test_planar_norm_curve():
    t = np.linspace(0, 10, 100)
    x, y = planar_closed_form(1.0, 0.0, t)
    assert np.allclose(np.hypot(x, y), np.exp(-t) * np.sqrt(1 + 15 * np.sin(t) ** 2), rtol=1e-12)


def test_lyapunov_single_environment():
    sys = SwitchedSystem([linear_field(-np.eye(2))], RateMatrix([[0.0]]))
    est = lyapunov_exponent(sys, 50.0, 0, n_rep=4)
    assert abs(est.chi + 1) < 1e-9
    m = np.array([[-0.5, 1.0], [0.0, -2.0]])
    est = lyapunov_exponent(SwitchedSystem([linear_field(m)], RateMatrix([[0.0]])), 400.0, 1, n_rep=8)
    half = max(est.ci[1] - est.ci[0], 1e-3)
    assert abs(est.chi + 0.5) <= 2 * half


def test_lyapunov_commuting_pair_is_average():
    sys = switched_linear([-np.eye(2), -3 * np.eye(2)], SYM)
    est = lyapunov_exponent(sys, 2000.0, 5, n_rep=16)
    assert est.ci[0] - 0.05 < -2 < est.ci[1] + 0.05


def test_lyapunov_dichotomy_signs():
    slow = lyapunov_exponent(PlanarSwitched(0.01).system(), 4000.0, 1, n_rep=16)
    fast = lyapunov_exponent(PlanarSwitched(50.0).system(), 200.0, 2, n_rep=16)
    assert slow.sign == -1 and fast.sign == 1


def test_lyapunov_needs_linear_fields():
    sys = SwitchedSystem([lotka_volterra_field(1, 1, 1, 1, 1, 1)], RateMatrix([[0.0]]))
    with pytest.raises(ModelError):
        lyapunov_exponent(sys, 10.0, 0, n_rep=2)


def test_critical_rate_preconditions():
    with pytest.raises(PreconditionError):
        critical_rate([PLANAR_M0, PLANAR_M1], bracket=(0.01, 0.05), horizon=200.0, n_rep=8)
    with pytest.raises(PreconditionError):
        critical_rate([-np.eye(2), -np.eye(2)], bracket=(0.01, 50.0), n_rep=4)


# contraction -------------------------------------------------------------

def test_contraction_examples():
    assert contraction_coefficient(linear_field(-np.eye(3))).rho == pytest.approx(1.0)
    assert contraction_coefficient(linear_field(PLANAR_M1)).rho == pytest.approx(-7 / 8)
    assert contraction_coefficient(linear_field(PLANAR_M0)).rho == pytest.approx(-7 / 8)


def test_sampled_contraction_convex_gradient():
    # F = -grad V with V = x^2 + x^4/4 + y^2: Hessian >= 2 I
    from pdmplab.core import VectorField
    f = VectorField(2, lambda z: -np.array([2 * z[0] + z[0] ** 3, 2 * z[1]]))
    box = Box(np.array([-2.0, -2.0]), np.array([2.0, 2.0]))
    c = contraction_coefficient(f, box, "sampled")
    assert c.label == "empirical" and c.rho >= 2 - 1e-9
    with pytest.raises(ModelError):
        contraction_coefficient(f, Box(np.zeros(2), np.array([1.0, 0.0])), "sampled")


def test_average_criterion_examples():
    assert average_criterion([1, 1], [0.3, 0.7]).verdict
    assert not average_criterion([-7 / 8, -7 / 8], [0.5, 0.5]).verdict
    r = average_criterion([2, -1], [0.25, 0.75])
    assert r.criterion == pytest.approx(-0.25) and not r.verdict and r.recheck()


@settings(max_examples=30)
@given(hs.lists(hs.floats(-5, 5), min_size=2, max_size=5), hs.randoms(use_true_random=False))
def test_average_criterion_permutation(rho, rnd):
    nu = np.arange(1, len(rho) + 1, dtype=float)
    nu /= nu.sum()
    perm = list(range(len(rho)))
    rnd.shuffle(perm)
    a = average_criterion(rho, nu)
    b = average_criterion(np.array(rho)[perm], nu[perm])
    assert a.verdict == b.verdict


def test_coupling_identical_start():
    sys = switched_linear([-np.eye(2), -2 * np.eye(2)], SYM)
    path = two_point_coupling(sys, [1.0, 1.0], [1.0, 1.0], 5.0, 0)
    assert np.all(path.distance == 0)


def test_coupling_scalar_bound():
    sys = SwitchedSystem([scalar_linear_field(-1), scalar_linear_field(-2)], SYM)
    path = two_point_coupling(sys, [1.0], [3.0], 5.0, 1)
    assert path.holds()
    assert path.distance[-1] < path.distance[0]
    # scalar linear fields attain the bound exactly
    assert np.allclose(path.distance, path.bound, rtol=1e-8)


def test_coupling_planar_bound_allows_growth():
    path = two_point_coupling(PlanarSwitched(1.0).system(), [1.0, 0.0], [0.0, 1.0], 10.0, 2)
    assert path.holds()
    assert path.bound[-1] > path.bound[0]


# averaged limit and product chain ----------------------------------------

def test_averaged_limit_examples():
    f = linear_field([[-1.0, 0.5], [0.0, -0.3]])
    sys = SwitchedSystem([f, f], SYM)
    assert np.allclose(averaged_ode_limit(sys, [0.4, 0.6], [1.0, 2.0], 2.0), f.closed_form([1.0, 2.0], 2.0))
    mal = SwitchedSystem([scalar_linear_field(1), scalar_linear_field(-1)], SYM)
    assert averaged_ode_limit(mal, [0.5, 0.5], [3.0], 4.0)[0] == pytest.approx(3.0, abs=1e-14)


def test_averaged_planar_matrix():
    sys = PlanarSwitched(1.0).system()
    m = averaged_field(sys, [0.5, 0.5]).matrix
    assert np.allclose(m, [[-1, 15 / 8], [15 / 8, -1]])
    assert max(np.linalg.eigvals(m).real) == pytest.approx(7 / 8)


def test_lotka_volterra_field():
    f = lotka_volterra_field(1.0, 2.0, 1.0, 0.5, 0.5, 1.0)
    assert np.allclose(f.eval(np.array([0.0, 0.0])), 0.0)
    assert np.allclose(f.eval(np.array([1.0, 0.0])), 0.0)
    # second component is beta y (1 - c x - d y)
    assert f.eval(np.array([0.5, 0.5]))[1] == pytest.approx(2.0 * 0.5 * (1 - 0.25 - 0.5))


def test_product_chain_examples():
    two = product_chain(lambda g, n: np.full(n, 2.0), 10, 0)
    assert np.allclose(two.y, 2.0 ** np.arange(11))
    assert two.criterion == pytest.approx(math.log(2)) and two.verdict == "growth"
    one = product_chain(lambda g, n: np.ones(n), 10, 0)
    assert np.all(one.y == 1.0) and one.criterion == 0.0
    ext = product_chain(lambda g, n: g.choice([0.25, 3.0], n), 20_000, 3)
    assert ext.verdict == "extinction"
    assert abs(ext.criterion - math.log(math.sqrt(0.75))) < 0.03
    grow = product_chain(lambda g, n: g.choice([0.5, 3.0], n), 20_000, 3)
    assert grow.verdict == "growth"
    with pytest.raises(ModelError):
        product_chain(lambda g, n: np.array([1.0, -1.0]), 2, 0)
