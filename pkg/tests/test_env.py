import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbmebe.env import (
    EnvError,
    EnvState,
    PointMass,
    TaskSpec,
    project,
    reg_reward,
    task_grid,
    task_reward,
)


def state(p=(0.0, 0.0), v=(0.0, 0.0), a_prev=(0.0, 0.0)):
    return EnvState(np.array([*p, *v, *a_prev], dtype=np.float32), np.array(0))


def test_reset_is_deterministic_with_zero_velocity():
    env = PointMass()
    a, b = env.reset(7, 32), env.reset(7, 32)
    assert np.array_equal(a.obs, b.obs)
    assert np.all(a.velocity == 0) and np.all(a.prev_action == 0)
    assert np.all(a.step == 0)


def test_reset_positions_centered():
    s = PointMass().reset(0, 10_000)
    assert np.all(np.abs(np.mean(s.position, axis=0)) < 0.05)
    assert np.all(np.abs(s.position) <= 1.0)


def test_step_example():
    nxt, done = PointMass().step(state(), np.array([1.0, 0.0]))
    np.testing.assert_allclose(nxt.velocity, [0.2, 0.0], atol=1e-7)
    np.testing.assert_allclose(nxt.position, [0.01, 0.0], atol=1e-7)
    np.testing.assert_array_equal(nxt.prev_action, [1.0, 0.0])
    assert not done


def test_zero_action_is_fixed_point():
    s = state(p=(1.5, -2.0))
    nxt, _ = PointMass().step(s, np.zeros(2))
    np.testing.assert_array_equal(nxt.position, s.position)


def test_constant_push_saturates_at_v_max():
    env = PointMass()
    s = state()
    for _ in range(400):
        s, _ = env.step(s, np.array([1.0, 0.0]))
    # unclipped fixed point is accel_scale / drag = 8, so the clip at 2 binds
    assert s.velocity[0] == pytest.approx(2.0)


def test_episode_ends_at_250_steps():
    env = PointMass()
    s = env.reset(0, 3)
    for t in range(250):
        s, done = env.step(s, np.zeros((3, 2)))
        assert done.all() == (t == 249)


def test_non_finite_action_rejected():
    with pytest.raises(EnvError):
        PointMass().step(state(), np.array([np.nan, 0.0]))


@given(st.integers(0, 2**31 - 1))
def test_bounds_hold_under_random_actions(seed):
    rng = np.random.default_rng(seed)
    env = PointMass()
    s = env.reset(rng, 4)
    for _ in range(300):
        s, _ = env.step(s, rng.uniform(-3, 3, size=(4, 2)))
        assert env.in_bounds(s.obs).all()


def test_step_is_deterministic():
    env = PointMass()
    s = state(p=(0.3, 0.1), v=(0.5, -0.2))
    a = np.array([0.3, -0.9])
    assert np.array_equal(env.step(s, a)[0].obs, env.step(s, a)[0].obs)


def test_project_returns_velocity():
    s = state(p=(1.0, 2.0), v=(0.3, -0.1))
    np.testing.assert_allclose(project(s.obs), [0.3, -0.1])
    assert np.all(project(PointMass().reset(0).obs) == 0)


@pytest.mark.parametrize("err,expected", [(0.0, 1.0), (0.3, np.exp(-1.0)), (0.6, np.exp(-4.0))])
def test_task_reward_examples(err, expected):
    task = TaskSpec((0.5, 0.0))
    obs = state(v=(0.5 + err, 0.0)).obs.astype(np.float64)
    assert task_reward(obs, task) == pytest.approx(expected, rel=1e-6)


def test_task_reward_known_values():
    assert np.exp(-1.0) == pytest.approx(0.36788, abs=1e-5)
    assert np.exp(-4.0) == pytest.approx(0.018316, abs=1e-6)


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_task_reward_in_unit_interval(vx, vy):
    r = task_reward(np.array([0, 0, vx, vy, 0, 0.0]), TaskSpec((0.8, -0.4)))
    assert 0 < r <= 1
    assert (r == 1) == (vx == 0.8 and vy == -0.4)


@pytest.mark.parametrize(
    "delta,expected", [((0.0, 0.0), 0.0), ((1.0, 0.0), -0.1), ((1.0, 1.0), -0.2)]
)
def test_reg_reward_examples(delta, expected):
    prev = np.array([0.2, -0.3])
    a = prev + np.array(delta)
    assert reg_reward(np.zeros(6), a, prev) == pytest.approx(expected)


@given(st.lists(st.integers(-100, 100), min_size=4, max_size=4))
def test_reg_reward_non_positive(vals):
    a, prev = np.array(vals[:2]) / 100, np.array(vals[2:]) / 100
    r = reg_reward(np.zeros(6), a, prev)
    assert r <= 0
    assert (r == 0) == np.array_equal(a, prev)


@pytest.mark.parametrize(
    "p,v,expected",
    [((0.0, 0.0), (1.0, 0.0), False), ((5.0, 0.0), (1.0, 0.0), True), ((5.0, 0.0), (-1.0, 0.0), False)],
)
def test_degenerate_examples(p, v, expected):
    assert bool(PointMass().is_degenerate(state(p=p, v=v).obs)) == expected


def test_task_grid_has_17_commands_within_envelope():
    tasks = task_grid()
    assert len(tasks) == 17
    speeds = sorted(round(t.speed, 6) for t in tasks)
    assert speeds == [0.0] + [0.4] * 4 + [0.8] * 4 + [1.2] * 4 + [1.6] * 4
    assert len({t.name for t in tasks}) == 17
    assert all("," not in t.name for t in tasks)
