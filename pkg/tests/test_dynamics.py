import numpy as np
import pytest

from phswarm import dynamics as dyn
from phswarm.errors import ContractError, DimensionError, IntegrationError, StateError


def test_double_integrator_flow_pinned():
    m = dyn.compose([dyn.double_integrator(dim=1)])
    s = dyn.JointState(x=np.array([[0.0, 1.0]]))
    f = dyn.open_loop_flow(m, s, np.zeros((1, 1)))
    np.testing.assert_array_equal(f, [[1.0, 0.0]])
    f = dyn.open_loop_flow(m, s, np.array([[2.0]]))
    np.testing.assert_array_equal(f, [[1.0, 2.0]])


def test_lossless_flow_preserves_energy_rate():
    # with R = 0 and u = 0, dH/dt = dHᵀ J dH = 0 by skew-symmetry
    rng = np.random.default_rng(2)
    robot = dyn.spring_mass(dim=2, stiffness=1.3)
    m = dyn.compose([robot] * 3)
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        f = dyn.open_loop_flow(m, dyn.JointState(x=x), np.zeros((3, 2)))
        rate = sum(robot.dH(x[i]) @ f[i] for i in range(3))
        assert abs(rate) < 1e-12


def test_zoh_step_euler():
    m = dyn.compose([dyn.double_integrator(dim=1)])
    s = dyn.JointState(x=np.array([[0.5, 2.0]]))
    s1 = dyn.zoh_step(m, s, np.zeros((1, 1)), T=0.1)
    # position advances by exactly T * v
    np.testing.assert_allclose(s1.x, [[0.5 + 0.1 * 2.0, 2.0]])
    assert s1.t == pytest.approx(0.1)


def test_zoh_noise_deterministic_under_seed():
    robot = dyn.double_integrator(dim=2)
    m = dyn.compose([robot] * 2, L=0.1 * np.eye(4))

    def rollout(seed):
        rng = np.random.default_rng(seed)
        s = dyn.JointState(x=np.ones((2, 4)))
        for _ in range(20):
            s = dyn.zoh_step(m, s, np.zeros((2, 2)), T=0.05, rng=rng)
        return s.x

    np.testing.assert_array_equal(rollout(7), rollout(7))
    assert not np.array_equal(rollout(7), rollout(8))


def test_compose_block_structure():
    robot = dyn.double_integrator(dim=1)
    m = dyn.compose([robot, robot])
    J, R, F, _ = dyn.dense_terms(m, np.zeros((2, 2)))
    Jb = robot.J_const
    want = np.zeros((4, 4))
    want[:2, :2] = Jb
    want[2:, 2:] = Jb
    np.testing.assert_array_equal(J, want)
    np.testing.assert_array_equal(J, -J.T)
    assert F.shape == (4, 2)

    single = dyn.compose([robot])
    Js, _, Fs, _ = dyn.dense_terms(single, np.zeros((1, 2)))
    np.testing.assert_array_equal(Js, Jb)
    np.testing.assert_array_equal(Fs, robot.F_const)


def test_joint_hamiltonian_is_sum():
    rng = np.random.default_rng(3)
    robots = [dyn.spring_mass(dim=2, stiffness=s) for s in (1.0, 2.0, 0.5)]
    m = dyn.compose(robots)
    x = rng.normal(size=(3, 4))
    total = dyn.joint_hamiltonian(m, x)
    parts = sum(r.H(x[i]) for i, r in enumerate(robots))
    assert total == pytest.approx(parts, abs=1e-12)


def test_blockwise_flow_matches_dense_joint():
    rng = np.random.default_rng(4)
    robots = [dyn.spring_mass(dim=2, stiffness=s, damping=d)
              for s, d in ((1.0, 0.0), (2.0, 0.3), (0.7, 0.1))]
    m = dyn.compose(robots)
    for _ in range(10):
        x = rng.normal(size=(3, 4))
        u = rng.normal(size=(3, 2))
        blockwise = dyn.open_loop_flow(m, dyn.JointState(x=x), u)
        J, R, F, dH = dyn.dense_terms(m, x)
        dense = (J - R) @ dH + F @ u.ravel()
        np.testing.assert_allclose(blockwise.ravel(), dense, atol=1e-12)


def test_energy_drift_scales_quadratically():
    # lossless oscillator: Euler adds T^2 * H per step, so drift ratio is
    # (T1/T2)^2; the free double integrator drifts not at all
    robot = dyn.spring_mass(dim=2)
    m = dyn.compose([robot])
    x0 = np.array([[0.3, -0.4, 0.5, 0.2]])

    def drift(T):
        s = dyn.JointState(x=x0)
        h0 = dyn.joint_hamiltonian(m, s.x)
        s = dyn.zoh_step(m, s, np.zeros((1, 2)), T=T)
        return abs(dyn.joint_hamiltonian(m, s.x) - h0)

    d2, d3 = drift(1e-2), drift(1e-3)
    assert d2 / d3 == pytest.approx(100.0, rel=1e-3)
    h = dyn.joint_hamiltonian(m, x0)
    assert d2 <= 1.01 * h * 1e-4

    free = dyn.compose([dyn.double_integrator(dim=2)])
    sf = dyn.JointState(x=x0)
    h0 = dyn.joint_hamiltonian(free, sf.x)
    sf = dyn.zoh_step(free, sf, np.zeros((1, 2)), T=0.1)
    assert dyn.joint_hamiltonian(free, sf.x) == pytest.approx(h0, abs=1e-15)


def test_navigation_robot_error_coordinate():
    robot = dyn.navigation_robot(dim=2, damping=0.25)
    m = dyn.compose([robot])
    p, v, e = [0.1, 0.2], [0.5, -0.3], [0.4, 0.4]
    x = np.array([p + v + e])
    u = np.array([[0.7, 0.1]])
    f = dyn.open_loop_flow(m, dyn.JointState(x=x), u)[0]
    np.testing.assert_allclose(f[:2], v)
    np.testing.assert_allclose(f[2:4], -0.25 * np.asarray(v) + u[0])
    np.testing.assert_allclose(f[4:], np.negative(v))
    dyn.validate_structure(robot, x)


def test_structure_validation_catches_violations():
    for factory in (dyn.double_integrator, dyn.spring_mass, dyn.navigation_robot):
        robot = factory(dim=2)
        dyn.validate_structure(robot, np.random.default_rng(5).normal(size=(4, robot.n_x)))

    bad_J = dyn.RobotPhModel(2, 1, np.eye(2), np.zeros((2, 2)), np.ones((2, 1)),
                             lambda x: 0.0, lambda x: np.zeros(2))
    with pytest.raises(ContractError):
        dyn.validate_structure(bad_J, np.zeros((1, 2)))

    bad_R = dyn.RobotPhModel(2, 1, np.zeros((2, 2)), -np.eye(2), np.ones((2, 1)),
                             lambda x: 0.0, lambda x: np.zeros(2))
    with pytest.raises(ContractError):
        dyn.validate_structure(bad_R, np.zeros((1, 2)))


def test_dimension_and_state_errors():
    m = dyn.compose([dyn.double_integrator(dim=1)])
    with pytest.raises(DimensionError):
        dyn.open_loop_flow(m, dyn.JointState(x=np.zeros((1, 3))), np.zeros((1, 1)))
    with pytest.raises(DimensionError):
        dyn.open_loop_flow(m, dyn.JointState(x=np.zeros((1, 2))), np.zeros((2, 1)))
    with pytest.raises(ContractError):
        dyn.zoh_step(m, dyn.JointState(x=np.zeros((1, 2))), np.zeros((1, 1)), T=0.0)
    with pytest.raises(StateError):
        dyn.JointState(x=np.array([[np.nan, 0.0]]))
    with pytest.raises(DimensionError):
        dyn.compose([dyn.double_integrator(dim=1), dyn.double_integrator(dim=2)])

    exploding = dyn.RobotPhModel(1, 1, np.zeros((1, 1)), np.zeros((1, 1)),
                                 np.ones((1, 1)), lambda x: 0.0,
                                 lambda x: np.array([np.inf]))
    mm = dyn.compose([exploding])
    with pytest.raises(IntegrationError):
        dyn.zoh_step(mm, dyn.JointState(x=np.zeros((1, 1))), np.zeros((1, 1)), T=0.1)
