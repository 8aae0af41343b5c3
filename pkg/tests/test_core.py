import numpy as np
import pytest

from pada.core import (
    DiscreteDistribution,
    InfiniteDivergenceError,
    RngStream,
    Trajectory,
    episodic_return,
    kl_divergence,
    rollout,
    tv_distance,
)

N_FUZZ = 1000


def random_simplex(gen, n):
    return gen.dirichlet(np.ones(n))


def test_tv_identity_and_disjoint():
    assert tv_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert tv_distance([0.5, 0.5], [0.75, 0.25]) == pytest.approx(0.25, abs=1e-15)


def test_tv_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        tv_distance([0.5, 0.5], [0.2, 0.3, 0.5])


def test_tv_symmetry_and_triangle_fuzz():
    gen = np.random.Generator(np.random.Philox(11))
    for _ in range(N_FUZZ):
        n = int(gen.integers(2, 6))
        p, q, r = (random_simplex(gen, n) for _ in range(3))
        assert tv_distance(p, q) == pytest.approx(tv_distance(q, p), abs=1e-15)
        assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12
        assert 0.0 <= tv_distance(p, q) <= 1.0


def test_kl_examples():
    gen = np.random.Generator(np.random.Philox(12))
    p = random_simplex(gen, 4)
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-12)
    with pytest.raises(InfiniteDivergenceError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_kl_nonnegative_and_pinsker_fuzz():
    gen = np.random.Generator(np.random.Philox(13))
    for _ in range(N_FUZZ):
        n = int(gen.integers(2, 6))
        p = random_simplex(gen, n) + 1e-3
        q = random_simplex(gen, n) + 1e-3
        p, q = p / p.sum(), q / q.sum()
        kl = kl_divergence(p, q)
        assert kl >= 0.0
        assert tv_distance(p, q) <= np.sqrt(kl / 2.0) + 1e-12


def test_discrete_distribution_validation():
    d = DiscreteDistribution(np.array([0.25, 0.75]))
    assert len(d) == 2
    with pytest.raises(ValueError):
        DiscreteDistribution(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        DiscreteDistribution(np.array([-0.1, 1.1]))


def test_rng_stream_contract():
    a = RngStream(42, "x")
    b = RngStream(42, "x")
    assert np.array_equal(a.gen.random(10), b.gen.random(10))
    c = RngStream(42, "y")
    assert not np.array_equal(RngStream(42, "x").gen.random(10), c.gen.random(10))
    # adding a consumer (new child) never perturbs an existing stream
    root = RngStream(7)
    before = root.child("consumer-a").gen.random(5)
    root.child("consumer-b").gen.random(5)
    after = root.child("consumer-a").gen.random(5)
    assert np.array_equal(before, after)


class LineEnv:
    """Deterministic 1-d integrator used to pin the rollout contract."""

    max_episode_steps = 100

    def reset(self, rng):
        return 0.0

    def step(self, state, action, rng):
        return state + float(action), False

    def reward(self, state):
        return float(state)

    def contains_action(self, action):
        return abs(float(action)) <= 1.0


def test_rollout_deterministic_and_horizon_zero():
    env = LineEnv()
    pol = lambda s: 0.5
    t1 = rollout(env, pol, 4, RngStream(1, "r"))
    t2 = rollout(env, pol, 4, RngStream(1, "r"))
    assert t1.states == t2.states and np.array_equal(t1.rewards, t2.rewards)
    assert t1.states == [0.0, 0.5, 1.0, 1.5, 2.0]
    t0 = rollout(env, pol, 0, RngStream(1, "r"))
    assert len(t0.states) == 1 and len(t0.actions) == 0


def test_rollout_rejects_out_of_space_action():
    with pytest.raises(ValueError):
        rollout(LineEnv(), lambda s: 2.0, 3, RngStream(1, "r"))


def test_rollout_respects_env_maximum():
    with pytest.raises(ValueError):
        rollout(LineEnv(), lambda s: 0.0, 101, RngStream(1, "r"))


def test_episodic_return():
    traj = Trajectory(states=[0, 1, 2, 3], actions=[0, 0, 0], rewards=[0.0, 0.0, 0.0])
    assert episodic_return(traj) == 0.0
    traj = Trajectory(states=[0, 1, 2, 3], actions=[0, 0, 0], rewards=[1.0, 2.0, 3.0])
    assert episodic_return(traj) == 6.0


def test_trajectory_shape_validation():
    with pytest.raises(ValueError):
        Trajectory(states=[0, 1], actions=[0, 0], rewards=[0.0, 0.0])
    with pytest.raises(ValueError):
        Trajectory(states=[0, 1, 2], actions=[0, 0], rewards=[0.0])
