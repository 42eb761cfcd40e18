import json
import math

import numpy as np
import pytest

from cadp.cbf_constraints import affine_terms
from cadp.robot_world import (
    ObstacleMap,
    RobotParams,
    RobotState,
    ScenarioLimits,
    assemble_safe_set,
    drive_matrix,
    lifted_obstacle_barriers,
    load_scenario,
    obstacle_phi,
    robot_f,
    robot_f_jac,
    robot_g,
    velocity_barriers,
)

import oracles

P = RobotParams()


def limits_for(goal=(5.0, 0.0), **kw):
    return ScenarioLimits(goal=np.asarray(goal, dtype=float), **kw)


# ---------------------------------------------------------------------------
# parameters and dynamics


def test_damping_constants_from_primitives():
    c1 = 2 * P.k_b * P.k_m / (P.m * P.r * P.R_a) + 2 * P.eps3 / (P.m * P.r)
    c3 = P.k_b * P.k_m * P.l**2 / (P.I * P.r**2 * P.R_a) + P.l * P.eps3 / (P.I * P.r**2)
    assert P.c1 == pytest.approx(c1, abs=1e-12)
    assert P.c3 == pytest.approx(c3, abs=1e-12)
    assert P.c1 == pytest.approx(0.056074, abs=1e-6)


def test_drift_equilibrium_at_rest(rng):
    x = np.array([rng.normal(), rng.normal(), rng.normal(), 0.0, 0.0])
    np.testing.assert_allclose(robot_f(x, P), np.zeros(5), atol=1e-15)


def test_drift_at_unit_speed():
    x = np.array([0.0, 0.0, 0.0, 1.0, 0.0])
    f = robot_f(x, P)
    expected3 = -P.c1 - P.c2 * math.tanh(1.0 / 0.4)
    np.testing.assert_allclose(f, [1.0, 0.0, 0.0, expected3, 0.0], atol=1e-12)


def test_drift_damping_is_odd():
    xp = np.array([0.0, 0.0, 0.0, 0.7, 0.3])
    xm = np.array([0.0, 0.0, 0.0, -0.7, -0.3])
    fp, fm = robot_f(xp, P), robot_f(xm, P)
    assert fp[3] == pytest.approx(-fm[3])
    assert fp[4] == pytest.approx(-fm[4])


def test_drift_jacobian_matches_finite_differences(rng):
    for _ in range(10):
        x = rng.normal(size=5)
        J = robot_f_jac(x, P)
        J_fd = oracles.fd_jacobian(lambda s: robot_f(s, P), x)
        np.testing.assert_allclose(J, J_fd, rtol=1e-5, atol=1e-7)


def test_drift_batched_evaluation(rng):
    X = rng.normal(size=(7, 5))
    F = robot_f(X, P)
    J = robot_f_jac(X, P)
    for i in range(7):
        np.testing.assert_allclose(F[i], robot_f(X[i], P), atol=1e-14)
        np.testing.assert_allclose(J[i], robot_f_jac(X[i], P), atol=1e-14)


def test_input_matrix_values():
    g = robot_g(P)
    np.testing.assert_allclose(g[:3], np.zeros((3, 2)), atol=0)
    M = drive_matrix(P)
    scale = 0.1 / (0.1 * 0.27)
    np.testing.assert_allclose(M[0], [scale / 10.0, scale / 10.0], rtol=1e-12)
    assert M[0, 0] == pytest.approx(0.37037, abs=1e-4)
    assert M[1, 0] == pytest.approx(2.2311, abs=1e-3)
    assert M[1, 1] == pytest.approx(-2.2311, abs=1e-3)


def test_equal_voltages_produce_no_yaw_moment():
    M = drive_matrix(P)
    u = np.array([1.7, 1.7])
    assert (M @ u)[1] == pytest.approx(0.0, abs=1e-14)


def test_input_matrix_full_rank():
    assert np.linalg.matrix_rank(drive_matrix(P)) == 2


def test_robot_state_round_trip():
    s = RobotState(1.0, -2.0, 0.5, 0.3, -0.1)
    np.testing.assert_allclose(RobotState.from_array(s.as_array()).as_array(), s.as_array())
    with pytest.raises(ValueError):
        RobotState.from_array([np.nan, 0, 0, 0, 0])


# ---------------------------------------------------------------------------
# barriers


def test_obstacle_clearance_boundary_and_center():
    phi_b, _ = obstacle_phi([1.0, 0.0], 2.0, np.array([3.0, 0.0, 0.0, 0.0, 0.0]))
    assert phi_b == pytest.approx(0.0, abs=1e-14)
    phi_c, _ = obstacle_phi([1.0, 0.0], 2.0, np.array([1.0, 0.0, 0.0, 0.0, 0.0]))
    assert phi_c == pytest.approx(-4.0)


def test_obstacle_gradient_matches_finite_differences(rng):
    c, r = rng.normal(size=2), 1.3
    for _ in range(5):
        x = rng.normal(size=5)
        _, grad = obstacle_phi(c, r, x)
        fd = oracles.fd_jacobian(lambda s: np.array([obstacle_phi(c, r, s)[0]]), x)[0]
        np.testing.assert_allclose(grad, fd, atol=1e-6)


def test_velocity_barriers_at_limits():
    lim = limits_for()
    (h_s, _), (h_w, _) = velocity_barriers(np.array([0, 0, 0, 1.5, 0.0]), lim)
    assert h_s == pytest.approx(0.0, abs=1e-14)
    (h_s0, _), _ = velocity_barriers(np.zeros(5), lim)
    assert h_s0 == pytest.approx(2.25)
    _, (h_w0, _) = velocity_barriers(np.array([0, 0, 0, 0, -0.5]), lim)
    assert h_w0 == pytest.approx(0.0, abs=1e-14)


def test_lifted_obstacle_matches_hand_expansion(rng):
    # h = d/dt phi + zeta phi expanded through the drift field by hand
    omap = ObstacleMap(centers=np.array([[2.0, -1.0]]), radii=np.array([0.8]))
    zeta = 0.5
    for _ in range(10):
        x = rng.normal(size=5)
        vals, grads = lifted_obstacle_barriers(x, omap, zeta, P)
        phi, grad_phi = obstacle_phi(omap.centers[0], omap.radii[0], x)
        lf_phi = grad_phi @ robot_f(x, P)
        assert vals[0] == pytest.approx(lf_phi + zeta * phi, rel=1e-12, abs=1e-12)
        fd = oracles.fd_jacobian(
            lambda s: np.atleast_1d(lifted_obstacle_barriers(s, omap, zeta, P)[0]), x)[0]
        np.testing.assert_allclose(grads[0], fd, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# safe-set assembly


def demo_map(n_obs=2):
    centers = np.column_stack([np.linspace(2.0, 8.0, n_obs), np.full(n_obs, 0.5)])
    return ObstacleMap(centers=centers, radii=np.full(n_obs, 0.7))


def test_safe_set_interior_point_positive():
    ss = assemble_safe_set(demo_map(), limits_for(), P)
    x = np.array([-5.0, -5.0, 0.0, 0.1, 0.0])  # far away, slow
    assert ss.psi0(x) > 0


def test_safe_set_negative_inside_obstacle():
    omap = demo_map()
    ss = assemble_safe_set(omap, limits_for(), P)
    x = np.concatenate([omap.centers[0], [0.0, 0.0, 0.0]])
    assert ss.psi0(x) < 0


def test_safe_set_member_count_is_obstacles_plus_two(rng):
    centers = rng.uniform(-50, 50, size=(41, 2))
    omap = ObstacleMap(centers=centers, radii=np.full(41, 1.0))
    ss = assemble_safe_set(omap, limits_for(), P)
    assert ss.barrier.n_members == 43


def test_safe_set_fused_members_match_memberwise(rng):
    ss = assemble_safe_set(demo_map(3), limits_for(), P)
    X = rng.normal(size=(6, 5))
    fused_vals, fused_grads = ss.barrier.members_eval(X)
    plain_vals = np.stack([m.value(X) for m in ss.barrier.members], axis=-1)
    plain_grads = np.stack([m.grad(X) for m in ss.barrier.members], axis=1)
    np.testing.assert_allclose(fused_vals, plain_vals, atol=1e-13)
    np.testing.assert_allclose(fused_grads, plain_grads, atol=1e-13)


def test_safe_set_sandwich_on_map(rng):
    lim = limits_for()
    ss = assemble_safe_set(demo_map(4), lim, P)
    for _ in range(50):
        x = rng.uniform([-10, -10, -np.pi, -1.5, -0.5], [10, 10, np.pi, 1.5, 0.5])
        vals = ss.barrier.member_values(x)
        psi = ss.psi0(x)
        assert psi <= vals.min() + 1e-12
        assert vals.min() - psi <= math.log(ss.barrier.n_members) / lim.rho + 1e-12


def test_safe_set_constraint_matches_generic_chain(rng):
    ss = assemble_safe_set(demo_map(3), limits_for(), P)
    for _ in range(5):
        x = rng.uniform([-5, -5, -np.pi, -1, -0.4], [5, 5, np.pi, 1, 0.4])
        a_ref, b_ref = affine_terms(ss.chain, None, x)
        assert float(ss.constraint.a(x)) == pytest.approx(a_ref, rel=1e-12, abs=1e-12)
        np.testing.assert_allclose(ss.constraint.b(x), b_ref, atol=1e-12)
        # affine in the stacked control
        v, delta = rng.normal(size=2), rng.normal()
        grad = ss.barrier.grad(x)
        psi = ss.psi0(x)
        direct = (grad @ robot_f(x, P) + grad @ robot_g(P) @ v
                  + ss.limits.kappa * psi + psi * delta)
        assert a_ref + b_ref @ np.concatenate([v, [delta]]) == pytest.approx(direct, abs=1e-10)


def test_safe_set_contains_start_at_rest():
    ss = assemble_safe_set(demo_map(), limits_for(), P)
    assert ss.contains(np.array([-3.0, 0.0, 0.0, 0.0, 0.0]))
    assert not ss.contains(np.concatenate([demo_map().centers[0], [0, 0, 0]]))


# ---------------------------------------------------------------------------
# scenario files


def test_scenario_json_round_trip(tmp_path):
    doc = {
        "name": "round_trip",
        "obstacles": [{"c": [2.0, 0.5], "r": 0.7}, {"c": [4.0, -0.5], "r": 0.9}],
        "goal": [6.0, 0.0],
        "starts": [[0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, -0.2, 0.0, 0.0]],
        "limits": {"s_bar": 1.5, "omega_bar": 0.5, "zeta": 0.5, "rho": 750.0,
                   "d_tol": 0.25, "T_f": 120.0, "kappa": 1.0},
        "weights": {"q_diag": [1, 1, 0, 16, 160], "r_v_diag": [80, 80],
                    "omega_v": [0, 0], "r_delta": 2.0e9},
        "horizon": {"T": 8.0, "T_p": 0.1, "T_s": 0.1, "eta": 1.0},
        "sim": {"zoh_hz": 100.0, "substeps": 5},
    }
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    sc = load_scenario(path)
    assert sc.name == "round_trip"
    assert sc.omap.n_obstacles == 2
    np.testing.assert_allclose(sc.limits.goal, [6.0, 0.0])
    assert sc.starts.shape == (2, 5)
    assert sc.horizon.N == 80
    assert sc.horizon.r_delta == pytest.approx(2.0e9)
    np.testing.assert_allclose(sc.weights.q_diag, [1, 1, 0, 16, 160])
    np.testing.assert_allclose(sc.goal_state(), [6.0, 0.0, 0.0, 0.0, 0.0])


def test_obstacle_map_validation():
    with pytest.raises(ValueError):
        ObstacleMap(centers=np.zeros((1, 2)), radii=np.array([-1.0]))
    with pytest.raises(ValueError):
        ObstacleMap(centers=np.zeros((2, 2)), radii=np.array([1.0]))
