import math

import numpy as np
import pytest
from scipy import stats as sps

from pdmplab import stats as st
from pdmplab.core import (Box, IntegrationError, MajorantViolation, ModelError, PositiveOrthant,
                          RateMatrix, ReducibleChainError, StepControl, SwitchedSystem,
                          constant_field, hit_time, integrate_flow, linear_field,
                          occupation_integrals, replica_map, scalar_linear_field, simulate_ctmc,
                          simulate_pdmp, stationary_distribution, zero_field, VectorField)
from pdmplab.switched import MalthusModel, planar_closed_form, planar_field_1


# environment chain -------------------------------------------------------

def test_rate_matrix_validation():
    with pytest.raises(ModelError):
        RateMatrix([[-1, 1], [1, -2]])
    with pytest.raises(ModelError):
        RateMatrix([[1, -1], [1, -1]])
    with pytest.raises(ModelError):
        RateMatrix([[0, 0, 0]])


@pytest.mark.parametrize("q, nu", [
    (RateMatrix.symmetric(2, 3.0), [0.5, 0.5]),
    (RateMatrix([[-1, 1], [2, -2]]), [2 / 3, 1 / 3]),
    (RateMatrix([[-1, 1, 0], [0, -1, 1], [1, 0, -1]]), [1 / 3] * 3),
])
def test_stationary_examples(q, nu):
    got = stationary_distribution(q)
    assert np.allclose(got, nu, atol=1e-12)
    assert np.abs(got @ q.q).max() <= 1e-10


def test_reducible_chain_names_components():
    q = RateMatrix([[-1, 1, 0], [1, -1, 0], [0, 0, 0]])
    with pytest.raises(ReducibleChainError, match=r"\{2\}"):
        stationary_distribution(q)


def test_ctmc_absorbing_single_segment():
    path = simulate_ctmc(RateMatrix([[0, 0], [0, 0]]), 1, 5.0, 0)
    assert path.times.tolist() == [0.0] and path.states.tolist() == [1]
    assert path.ends.tolist() == [5.0]


def test_ctmc_invalid_initial_state():
    with pytest.raises(ModelError):
        simulate_ctmc(RateMatrix.symmetric(2, 1.0), 5, 1.0, 0)


def test_ctmc_occupation():
    q = RateMatrix([[-1, 1], [2, -2]])
    reps = [simulate_ctmc(q, 0, 1000.0, s).occupation([1.0, 0.0]) / 1000.0
            for s in range(100)]
    est = st.estimate(reps)
    assert abs(st.z_score(est, 2 / 3)) < 3


def test_ctmc_holding_times_exponential():
    q = RateMatrix.two_state(2.0, 5.0)
    path = simulate_ctmc(q, 0, 5000.0, 3)
    hold = np.diff(path.times)
    from0 = hold[path.states[:-1] == 0]
    assert sps.kstest(from0, sps.expon(scale=0.5).cdf).pvalue > 0.01
    assert np.all(path.states[1:] != path.states[:-1])


def test_ctmc_deterministic():
    q = RateMatrix.symmetric(3, 1.5)
    a = simulate_ctmc(q, 0, 50.0, 11)
    b = simulate_ctmc(q, 0, 50.0, 11)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.states, b.states)


def test_occupation_integrals_match_paths():
    q = RateMatrix([[-1, 1], [2, -2]])
    vals = occupation_integrals(q, np.zeros(20000, dtype=int), 2.0, [1.0, 0.0], 1)
    exact = 2 / 3 * 2 + (1 / 3) * (1 - math.exp(-6)) / 3
    assert abs(st.z_score(st.estimate(vals), exact)) < 4


# flows -------------------------------------------------------------------

def test_zero_and_scalar_flows():
    assert np.array_equal(integrate_flow(zero_field(2), [1.0, 2.0], 3.0), [1.0, 2.0])
    x = integrate_flow(scalar_linear_field(-0.7), [2.0], 3.0)
    assert abs(x[0] / (2 * math.exp(-2.1)) - 1) < 1e-8


def test_planar_closed_form_t1():
    x = integrate_flow(planar_field_1(), [1.0, 0.0], 1.0)
    ref = np.array(planar_closed_form(1.0, 0.0, 1.0))
    assert np.max(np.abs(x - ref) / np.abs(ref)) < 1e-8


@pytest.mark.parametrize("field", [planar_field_1(), linear_field([[0.1, 1.0], [-1.0, -0.3]]),
                                   scalar_linear_field(0.4), constant_field([1.0, -2.0])])
def test_closed_form_oracle(field):
    x0 = np.ones(field.dimension)
    ts = np.linspace(0.1, 10.0, 100)
    x, t_prev = x0, 0.0
    for t in ts:
        x = integrate_flow(field, x, t - t_prev)
        t_prev = t
        ref = field.closed_form(x0, t)
        assert np.max(np.abs(x - ref)) <= 1e-8 * max(1.0, np.max(np.abs(ref)))


def test_adaptive_steps_agree():
    f = planar_field_1()
    x = integrate_flow(f, [1.0, 0.0], 2.0, StepControl(h=0.01, adaptive=True))
    ref = np.array(planar_closed_form(1.0, 0.0, 2.0))
    assert np.allclose(x, ref, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("rate, x0, c, expected", [(1.0, 0.0, 1.0, 1.0), (2.0, 0.3, 1.0, 0.35)])
def test_hit_time_linear(rate, x0, c, expected):
    t = hit_time(constant_field([rate]), [x0], lambda x: x[0] - c, 5.0)
    assert abs(t - expected) < 1e-9


def test_hit_time_exponential():
    t = hit_time(scalar_linear_field(1.0), [1.0], lambda x: x[0] - math.e, 5.0)
    assert abs(t - 1.0) < 1e-9


def test_hit_time_none_and_grazing():
    assert hit_time(constant_field([1.0]), [0.0], lambda x: x[0] - 10, 1.0) is None
    # tangential contact without a sign change is not reported
    f = VectorField(1, lambda x: np.array([1.0]))
    assert hit_time(f, [-1.0], lambda x: -(x[0] ** 2), 2.0) is None


def test_region_exit_reports_time():
    with pytest.raises(IntegrationError) as err:
        integrate_flow(constant_field([-1.0]), [0.5], 2.0, region=PositiveOrthant(1))
    assert abs(err.value.exit_time - 0.5) < 1e-6


def test_box_sampling(gen):
    b = Box(np.array([0.0, -1.0]), np.array([1.0, 1.0]))
    pts = b.sample(gen, 100)
    assert all(b.contains(p) for p in pts)
    assert b.volume == 2.0


# PDMP engine -------------------------------------------------------------

def test_pdmp_without_jumps_is_pure_flow():
    f = planar_field_1()
    sys = SwitchedSystem([f], RateMatrix([[0.0]]))
    tr = simulate_pdmp(sys, [1.0, 0.0], 0, 2.0, 0)
    ref = np.array(planar_closed_form(1.0, 0.0, 2.0))
    assert np.allclose(tr.states()[-1], ref, rtol=1e-8)


def test_malthus_through_engine():
    model = MalthusModel(RateMatrix([[-1, 1], [2, -2]]), [0.5, -1.0], 2.0)
    for seed in range(5):
        tr = simulate_pdmp(model.system(), [2.0], 0, 5.0, seed)
        exact = model.exact(tr.env_path)
        assert abs(tr.states()[-1][0] / exact - 1) < 1e-8


def test_poisson_jump_counts():
    sys = SwitchedSystem([zero_field(1)], RateMatrix([[0.0]]))
    lam, T = 2.0, 3.0
    counts = []
    for s in range(10_000):
        tr = simulate_pdmp(sys, [0.0], 0, T, s, jump_rate=lambda x, y: lam, majorant=lam,
                           jump_kernel=lambda x, y, g: x + 1, use_closed_form=True)
        counts.append(int(tr.states()[-1][0]))
    counts = np.array(counts)
    ks = np.arange(0, 15)
    obs = np.array([np.sum(counts == k) for k in ks[:-1]] + [np.sum(counts >= ks[-1])])
    exp_ = sps.poisson.pmf(ks, lam * T)
    exp_[-1] = sps.poisson.sf(ks[-1] - 1, lam * T)
    assert sps.chisquare(obs, exp_ * counts.size).pvalue > 0.01


def test_thinning_intensity_state_dependent():
    # lambda(x) = x along x' = 1 from 0: jumps before t=1 ~ 1 - exp(-1/2)
    sys = SwitchedSystem([constant_field([1.0])], RateMatrix([[0.0]]))
    first = []
    for s in range(4000):
        tr = simulate_pdmp(sys, [0.0], 0, 1.0, s, jump_rate=lambda x, y: x[0], majorant=1.0,
                           jump_kernel=lambda x, y, g: x, use_closed_form=True)
        first.append(any(e.tag == "jump" for e in tr.events))
    est = st.estimate(np.array(first, float))
    assert abs(st.z_score(est, 1 - math.exp(-0.5))) < 3


def test_majorant_required_and_enforced():
    sys = SwitchedSystem([constant_field([1.0])], RateMatrix([[0.0]]))
    with pytest.raises(ModelError):
        simulate_pdmp(sys, [0.0], 0, 1.0, 0, jump_rate=lambda x, y: 1.0, jump_kernel=lambda x, y, g: x)
    with pytest.raises(MajorantViolation) as err:
        simulate_pdmp(sys, [0.0], 0, 50.0, 0, jump_rate=lambda x, y: 10 * x[0], majorant=1.0,
                      jump_kernel=lambda x, y, g: x)
    assert err.value.state is not None


def test_boundary_reset_ordering():
    sys = SwitchedSystem([constant_field([1.0]), constant_field([2.0])], RateMatrix.symmetric(2, 1.0))
    tr = simulate_pdmp(sys, [0.0], 0, 10.0, 4, boundary=lambda x: x[0] - 1.0,
                       reset=lambda x, y, g: np.array([g.uniform(0, 0.5)]))
    tr.check()
    hits = tr.event_times("boundary-hit")
    assert hits.size > 3
    assert np.array_equal(hits, tr.event_times("reset"))


def test_trajectory_deterministic():
    sys = SwitchedSystem([constant_field([1.0]), constant_field([2.0])], RateMatrix.symmetric(2, 1.0))
    kw = dict(boundary=lambda x: x[0] - 1.0, reset=lambda x, y, g: np.array([g.uniform(0, 0.5)]))
    a = list(simulate_pdmp(sys, [0.0], 0, 5.0, 8, **kw).rows())
    b = list(simulate_pdmp(sys, [0.0], 0, 5.0, 8, **kw).rows())
    assert a == b


def test_replica_map_order():
    out = replica_map(lambda s: s.generator().random(), 3, 6, workers=1)
    again = [s.generator().random() for s in reversed(__import__("pdmplab.rng", fromlist=["x"])
                                                        .RngStream(3).substreams(6))][::-1]
    assert out == again
