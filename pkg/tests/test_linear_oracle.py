from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d3lab.linear_oracle import (
    CLOSED_FORM,
    EULER,
    _closed_form_theta,
    LinearFlowState,
    Trajectory,
    derivative_closed_form,
    integrate_flow,
    linear_dynamic_check,
    random_instance,
    sweep_monotone,
    verify_monotone,
)


def _scalar_state(c, y=None):
    Phi = np.ones((4, 1))
    y = np.zeros(4) if y is None else y
    return LinearFlowState(None, Phi, np.array([c]), np.array([0.0]), y)


def test_equal_members_stay_equal():
    st_ = random_instance(1)
    st_.theta2 = st_.theta1.copy()
    traj = integrate_flow(st_, 1.0)
    assert np.all(traj.D == 0.0)
    assert derivative_closed_form(st_) == 0.0


def test_scalar_case_decays_as_exp_minus_4t():
    c = 0.7
    traj = integrate_flow(_scalar_state(c, y=np.array([1.0, -2.0, 0.5, 3.0])), 1.5, n_samples=30)
    np.testing.assert_allclose(traj.D, c**2 * np.exp(-4 * traj.t), rtol=1e-12, atol=0)
    assert derivative_closed_form(_scalar_state(c)) == pytest.approx(-4 * c**2, rel=1e-15)


def test_closed_form_and_euler_agree():
    st_ = random_instance(3, P=10, N=50)
    cf = integrate_flow(st_, 1.0, CLOSED_FORM, n_samples=20)
    eu = integrate_flow(st_, 1.0, EULER, n_samples=20)
    np.testing.assert_allclose(eu.D, cf.D, rtol=1e-6, atol=1e-14)


def test_euler_rejects_unstable_step():
    st_ = random_instance(4, P=5, N=20)
    lam = np.linalg.eigvalsh(st_.gram)[-1]
    with pytest.raises(ValueError):
        integrate_flow(st_, 1.0, EULER, h=0.5 / lam)


def test_verify_monotone():
    assert verify_monotone(integrate_flow(random_instance(5), 2.0))[0]
    ok, viol = verify_monotone([1.0, 2.0])
    assert not ok and viol == 1.0


def _fd_derivative(state, t, h=1e-4):
    d = [integrate_flow(state, tt, n_samples=1).D[-1] for tt in (t - h, t + h)]
    return (d[1] - d[0]) / (2 * h)


def test_closed_form_derivative_matches_fd():
    st_ = random_instance(6, P=8, N=30)
    t = 0.3
    th1, th2 = _closed_form_theta(st_, t)
    exact = derivative_closed_form(replace(st_, theta1=th1, theta2=th2, t=t))
    assert exact <= 0
    assert abs(_fd_derivative(st_, t) - exact) <= 1e-7 * abs(exact)


def test_trajectory_ignores_target_noise():
    st_ = random_instance(8, P=12, N=40)
    base = integrate_flow(st_, 2.0)
    st_.y_noisy = st_.y_noisy + np.random.default_rng(0).normal(0, 5.0, st_.N)
    moved = integrate_flow(st_, 2.0)
    np.testing.assert_allclose(moved.D, base.D, rtol=0, atol=1e-10)


def test_rank_deficient_gram_is_constant_in_null_space():
    # duplicated feature column: one zero eigenvalue, whose component never moves
    x = np.linspace(-1, 1, 10)
    Phi = np.stack([x, x], axis=1)
    st_ = LinearFlowState(None, Phi, np.array([1.0, -1.0]), np.zeros(2), np.zeros(10))
    traj = integrate_flow(st_, 5.0)
    assert verify_monotone(traj)[0]
    np.testing.assert_allclose(traj.D, 0.0, atol=1e-30)  # difference lies in the null space


def test_sweep_counts_all_monotone():
    res = sweep_monotone(n_instances=20, seed=1)
    assert res["monotone"] == 20


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_any_random_instance_is_monotone(seed):
    st_ = random_instance(seed)
    assert st_.P <= 20 and st_.N <= 50
    assert verify_monotone(integrate_flow(st_, 3.0))[0]


def test_linear_dynamic_identity_and_zero():
    f0 = (np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0]))
    y = np.zeros(3)
    ok, dist = linear_dynamic_check(np.eye(3), f0, y, 1.0, n_samples=10)
    t = np.linspace(0, 1, 11)
    assert ok
    np.testing.assert_allclose(dist, dist[0] * np.exp(-2 * t), rtol=1e-12)
    ok, dist = linear_dynamic_check(np.zeros((3, 3)), f0, y, 1.0)
    assert ok and np.all(dist == dist[0])


def test_linear_dynamic_random_psd_sweep():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 31))
        A = rng.normal(size=(n, int(rng.integers(1, n + 1))))
        G = A @ A.T
        f0 = (rng.normal(size=n), rng.normal(size=n))
        ok, _ = linear_dynamic_check(G, f0, rng.normal(size=n) * 3, 2.0)
        assert ok


def test_linear_dynamic_rejects_bad_operator():
    with pytest.raises(ValueError):
        linear_dynamic_check(-np.eye(2), (np.zeros(2), np.ones(2)), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        linear_dynamic_check(np.array([[1.0, 2.0], [0.0, 1.0]]), (np.zeros(2), np.ones(2)), np.zeros(2), 1.0)


def test_trajectory_csv(tmp_path):
    traj = Trajectory(np.array([0.0, 0.5]), np.array([1.0, 0.25]), np.array([-4.0, -1.0]), CLOSED_FORM)
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["t,D_t,dDdt_closed_form", "0.0,1.0,-4.0", "0.5,0.25,-1.0"]


def test_state_validation():
    with pytest.raises(ValueError):
        LinearFlowState(None, np.zeros((3, 0)), [], [], np.zeros(3))
    with pytest.raises(ValueError):
        LinearFlowState(None, np.array([[np.nan]]), [0.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        integrate_flow(random_instance(0), 0.0)
