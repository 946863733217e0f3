"""Navigation environment contracts and the ablation baseline policies."""

import numpy as np
import pytest

from phswarm.envs import (
    BaselineParams,
    NavConfig,
    NavEnv,
    baseline_act,
    baseline_forward,
    baseline_init,
    baseline_sigma,
)
from phswarm.errors import ConfigError, ContractError, DimensionError
from phswarm.policy import SIGMA_MIN


def make_env(seed=0, **kw):
    return NavEnv(NavConfig(**kw), rng=np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# reset
# ---------------------------------------------------------------------------


def test_reset_shapes_and_zero_velocity():
    env = make_env(n=1)
    x, adj = env.reset()
    assert x.shape == (1, 6) and adj.shape == (1, 1)
    np.testing.assert_array_equal(x[:, 2:4], 0.0)
    # goal-relative coordinate is goal − position
    np.testing.assert_allclose(x[0, 4:6], env._goals[0] - x[0, :2])


def test_spawns_never_overlap():
    for seed in range(20):
        env = make_env(seed=seed, n=8)
        x, _ = env.reset()
        p = x[:, :2]
        for i in range(8):
            for j in range(i + 1, 8):
                assert np.linalg.norm(p[i] - p[j]) > 2 * env.cfg.robot_radius
        assert np.all(np.abs(p) <= env.cfg.arena - env.cfg.robot_radius + 1e-12)


def test_reset_is_seed_reproducible():
    a, adj_a = make_env(seed=3, n=5).reset()
    b, adj_b = make_env(seed=3, n=5).reset()
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(adj_a, adj_b)


def test_impossible_packing_rejected():
    with pytest.raises(ConfigError):
        NavConfig(n=200)
    with pytest.raises(ConfigError):
        NavConfig(n=2, arena=0.1)


# ---------------------------------------------------------------------------
# step and reward
# ---------------------------------------------------------------------------


def test_reward_zero_when_all_at_goals():
    env = make_env(n=2)
    env.reset()
    # park both robots exactly on their goals, far apart, zero velocity
    env._goals = np.array([[0.5, 0.5], [-0.5, -0.5]])
    x = np.zeros((2, 6))
    x[:, :2] = env._goals
    env._x = x
    _, _, reward, _, info = env.step(np.zeros((2, 2)))
    assert abs(reward) < 1e-12
    assert info["collisions"] == 0


def test_one_contact_pair_costs_exactly_one_penalty():
    env = make_env(n=3)
    env.reset()
    x = np.zeros((3, 6))
    x[0, :2] = (0.0, 0.0)
    x[1, :2] = (0.2, 0.0)  # 0.2 < 2*0.15: contact
    x[2, :2] = (0.9, 0.9)
    env._x = x
    env._goals = x[:, :2].copy()  # zero distance term
    _, _, reward, _, info = env.step(np.zeros((3, 2)))
    assert info["collisions"] == 1
    assert abs(reward - env.cfg.collision_penalty) < 1e-9


def test_reward_is_permutation_invariant():
    env = make_env(seed=5, n=4)
    env.reset()
    x0 = env._x.copy()
    g0 = env._goals.copy()
    perm = np.array([2, 0, 3, 1])
    r_base = env.step(np.zeros((4, 2)))[2]

    env.reset()
    env._x = x0[perm]
    env._goals = g0[perm]
    env._t = 0
    r_perm = env.step(np.zeros((4, 2)))[2]
    assert abs(r_base - r_perm) < 1e-9


def test_dynamics_are_damped_double_integrator():
    env = make_env(seed=1, n=1)
    x, _ = env.reset()
    p0 = x[0, :2].copy()
    a = np.array([[1.0, -0.5]])
    x1, _, _, _, _ = env.step(a)
    # velocity integrates the applied force; position lags one step
    np.testing.assert_allclose(x1[0, 2:4], env.cfg.dt * a[0] * env.cfg.u_max,
                               atol=1e-12)
    np.testing.assert_allclose(x1[0, :2], p0, atol=1e-12)
    np.testing.assert_allclose(x1[0, 4:6], env._goals[0] - x1[0, :2], atol=1e-12)
    x2, _, _, _, _ = env.step(np.zeros((1, 2)))
    np.testing.assert_allclose(
        x2[0, :2], p0 + env.cfg.dt * x1[0, 2:4], atol=1e-12
    )
    np.testing.assert_allclose(
        x2[0, 2:4], (1 - env.cfg.dt * env.cfg.damping) * x1[0, 2:4], atol=1e-12
    )


def test_actions_clip_to_unit_box():
    env = make_env(seed=2, n=1)
    env.reset()
    big = env.step(np.array([[100.0, -100.0]]))[0]
    env = make_env(seed=2, n=1)
    env.reset()
    unit = env.step(np.array([[1.0, -1.0]]))[0]
    np.testing.assert_array_equal(big, unit)


def test_episode_ends_at_cap():
    env = make_env(seed=0, n=2, max_steps=5)
    env.reset()
    for t in range(1, 6):
        _, _, _, done, _ = env.step(np.zeros((2, 2)))
        assert done == (t == 5)


def test_replay_reproduces_trajectory_bit_exactly():
    env = make_env(seed=9, n=3)
    env.reset()
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, size=(7, 3, 2))
    states_a = [env.step(a)[0] for a in actions]

    env2 = make_env(seed=9, n=3)
    env2.reset()
    states_b = [env2.step(a)[0] for a in actions]
    for sa, sb in zip(states_a, states_b):
        np.testing.assert_array_equal(sa, sb)


def test_adjacency_tracks_positions():
    env = make_env(seed=0, n=2)
    env.reset()
    x = np.zeros((2, 6))
    x[0, :2] = (0.0, 0.0)
    x[1, :2] = (0.3, 0.0)  # within r_comm = 0.45
    env._x = x
    _, adj, _, _, _ = env.step(np.zeros((2, 2)))
    assert adj[0, 1] == 1.0
    env._x[1, :2] = (1.9, 0.0)  # move out of range (positions re-read at step)
    _, adj, _, _, _ = env.step(np.zeros((2, 2)))
    assert adj[0, 1] == 0.0


def test_trajectory_recording():
    env = NavEnv(NavConfig(n=2), rng=np.random.default_rng(1), record=True)
    env.reset()
    for _ in range(3):
        env.step(np.zeros((2, 2)))
    assert len(env.trajectory) == 3
    rec = env.trajectory[0]
    assert set(rec) == {"t", "positions", "velocities", "actions", "reward",
                        "adjacency"}


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def zero_weights(bp):
    for layers in (bp.mean_layers, bp.var_layers):
        if layers:
            for w, b in layers:
                w[:] = 0.0
                b[:] = 0.0
    return bp


def test_zero_weight_mlp_gives_zero_mean():
    bp = zero_weights(baseline_init(0, "mlp", n=3, n_x=6, n_u=2))
    x = np.random.default_rng(0).normal(size=(3, 6))
    np.testing.assert_array_equal(baseline_forward(bp, x), np.zeros((3, 2)))


def test_mlp_matches_dense_oracle():
    rng = np.random.default_rng(7)
    n, n_x, n_u = 3, 6, 2
    bp = baseline_init(rng, "mlp", n=n, n_x=n_x, n_u=n_u)
    x = rng.normal(size=(n, n_x))
    (w1, b1), (w2, b2) = bp.mean_layers
    h = w1 @ x.ravel() + b1
    h = h / (1.0 + np.exp(-h))
    expect = (w2 @ h + b2).reshape(n, n_u)
    np.testing.assert_allclose(baseline_forward(bp, x), expect, atol=1e-12)


def test_mlp_and_msa_refuse_other_team_sizes():
    rng = np.random.default_rng(1)
    for kind in ("mlp", "msa"):
        bp = baseline_init(rng, kind, n=4, n_x=6, n_u=2)
        ok = baseline_forward(bp, np.zeros((4, 6)),
                              adjacency=np.zeros((4, 4)))
        assert ok.shape == (4, 2)
        with pytest.raises(DimensionError):
            baseline_forward(bp, np.zeros((6, 6)), adjacency=np.zeros((6, 6)))
        with pytest.raises(DimensionError):
            baseline_sigma(bp, np.zeros((6, 6)), np.zeros((6, 2)))


def test_gsa_transfers_across_team_sizes_with_identical_bytes():
    rng = np.random.default_rng(2)
    bp = baseline_init(rng, "gsa", n=3, n_x=6, n_u=2)
    before = [arr.tobytes() for _, arr in bp.mean_stack.items()]
    ring3 = np.array(
        [[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float
    )
    out3 = baseline_forward(bp, rng.normal(size=(3, 6)), adjacency=ring3)
    assert out3.shape == (3, 2)
    adj6 = np.zeros((6, 6))
    for i in range(6):
        adj6[i, (i + 1) % 6] = adj6[(i + 1) % 6, i] = 1
    out6 = baseline_forward(bp, rng.normal(size=(6, 6)), adjacency=adj6)
    assert out6.shape == (6, 2)
    after = [arr.tobytes() for _, arr in bp.mean_stack.items()]
    assert before == after


def test_gsa_only_sees_its_neighborhood():
    rng = np.random.default_rng(3)
    bp = baseline_init(rng, "gsa", n=3, n_x=6, n_u=2)
    x = rng.normal(size=(3, 6))
    # robot 0 isolated: changing robot 2's state cannot change robot 0's action
    adj = np.zeros((3, 3))
    adj[1, 2] = adj[2, 1] = 1
    base = baseline_forward(bp, x, adjacency=adj)
    x2 = x.copy()
    x2[2] += 1.0
    moved = baseline_forward(bp, x2, adjacency=adj)
    np.testing.assert_array_equal(base[0], moved[0])
    assert not np.array_equal(base[1], moved[1])


def test_baseline_sampling_contract():
    rng = np.random.default_rng(4)
    bp = baseline_init(rng, "mlp", n=2, n_x=6, n_u=2)
    x = rng.normal(size=(2, 6))
    det = baseline_act(bp, x, deterministic=True)
    np.testing.assert_allclose(det, np.tanh(baseline_forward(bp, x)))
    stoch = baseline_act(bp, x, rng=rng, deterministic=False)
    assert stoch.shape == (2, 2)
    assert np.all(np.abs(stoch) < 1.0)
    sig = baseline_sigma(bp, x, baseline_forward(bp, x))
    assert np.all(sig >= SIGMA_MIN)


def test_unknown_baseline_kind_rejected():
    with pytest.raises(ContractError):
        baseline_init(0, "cnn", n=2, n_x=6, n_u=2)
