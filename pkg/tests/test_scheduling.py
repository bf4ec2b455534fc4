import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcell import scheduling as sch
from fedcell.errors import ConfigError


def _grid_oracle(p, u, m, step=1e-3):
    # two-device problem: search q1 on a grid over (0, m)
    q1 = np.arange(step, m, step)
    obj = p[0] / (u[0] * q1) + p[1] / (u[1] * (m - q1))
    i = int(np.argmin(obj))
    return q1[i], obj[i]


def test_two_device_example():
    prob = sch.SchedulingProblem(np.array([0.5, 0.5]), np.array([1.0, 0.25]), 1)
    q, obj = sch.solve_optimal_q(prob)
    q1_grid, obj_grid = _grid_oracle(prob.p, prob.u, 1)
    assert q == pytest.approx([1 / 3, 2 / 3], abs=1e-12)
    assert abs(q[0] - q1_grid) <= 1e-3
    assert obj == pytest.approx(4.5)
    assert obj <= obj_grid + 1e-12
    assert sch.objective(prob, np.array([0.5, 0.5])) == pytest.approx(5.0)
    assert np.max(np.abs(sch.verify_with_iterative_solver(prob, 1e-12) - [1 / 3, 2 / 3])) <= 1e-6


def test_symmetric_problem_uniform():
    prob = sch.SchedulingProblem(np.full(8, 1 / 8), np.full(8, 0.7), 3)
    q, _ = sch.solve_optimal_q(prob)
    assert np.allclose(q, 3 / 8)


def test_single_device():
    prob = sch.SchedulingProblem(np.array([1.0]), np.array([0.4]), 5)
    assert sch.solve_optimal_q(prob)[0].tolist() == [5.0]
    assert sch.verify_with_iterative_solver(prob).tolist() == [5.0]


def _random_problem(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 60))
    p = rng.dirichlet(np.ones(n))
    u = rng.uniform(0.05, 1.0, n)
    return sch.SchedulingProblem(p, u, int(rng.integers(1, n + 1)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_closed_form_properties(seed):
    prob = _random_problem(seed)
    q, obj = sch.solve_optimal_q(prob)
    assert q.sum() == pytest.approx(prob.m, rel=1e-12)
    assert obj == pytest.approx(sch.objective(prob, q), rel=1e-12)
    marg = prob.a / q**2
    assert (marg.max() - marg.min()) / marg.mean() <= 1e-8
    rng = np.random.default_rng(seed + 1)
    for _ in range(100):
        other = rng.dirichlet(np.ones(len(q))) * prob.m
        assert obj <= sch.objective(prob, other) * (1 + 1e-12)
    assert obj <= sch.objective(prob, np.full(len(q), prob.m / len(q))) * (1 + 1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(0.05, 1.0))
def test_scale_invariance(seed, c):
    prob = _random_problem(seed)
    scaled = sch.SchedulingProblem(prob.p, prob.u * c, prob.m)
    q1, o1 = sch.solve_optimal_q(prob)
    q2, o2 = sch.solve_optimal_q(scaled)
    assert np.allclose(q1, q2, rtol=1e-12)
    assert o2 == pytest.approx(o1 / c, rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_iterative_solver_agrees(seed):
    prob = _random_problem(seed, n=40)
    q, _ = sch.solve_optimal_q(prob)
    assert np.max(np.abs(sch.verify_with_iterative_solver(prob) - q)) <= 1e-6


def test_to_sampling_policy():
    pol = sch.to_sampling_policy(np.array([1 / 3, 2 / 3]), 1)
    assert pol.scheme == "II"
    assert np.allclose(pol.probs, [1 / 3, 2 / 3])
    uni = sch.to_sampling_policy(np.full(50, 20 / 50), 20)
    assert np.allclose(uni.probs, 1 / 50)
    prob = _random_problem(7, n=100)
    q, _ = sch.solve_optimal_q(prob)
    assert abs(sch.to_sampling_policy(q, prob.m).probs.sum() - 1) <= 1e-12
    with pytest.raises(ConfigError):
        sch.to_sampling_policy(np.array([0.2, 0.3]), 1)


def test_errors_and_warning():
    with pytest.raises(ConfigError):
        sch.SchedulingProblem(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 1)
    with pytest.raises(ConfigError):
        sch.SchedulingProblem(np.array([0.5, 0.5]), np.array([1.0, 1.0]), 0)
    with pytest.warns(RuntimeWarning, match="contrast"):
        sch.solve_optimal_q(sch.SchedulingProblem(np.array([0.5, 0.5]), np.array([1.0, 1e-9]), 1))
    with pytest.raises(ConfigError):
        sch.verify_with_iterative_solver(_random_problem(0), tol=0.0)
