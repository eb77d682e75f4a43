import numpy as np
import pytest
from hypothesis import given, strategies as st

from metactrl import mpc as M
from metactrl import nssm as N
from oracles import dare_scipy, mpc_objective, quadratic_argmin, random_stable_system, scalar_box_argmin


# --------------------------------------------------------------------- DARE

def test_dare_zero_dynamics():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_array_equal(M.solve_dare(np.zeros((2, 2)), np.ones((2, 1)), Q, np.eye(1)), Q)


def test_dare_scalar_uncontrolled():
    assert M.solve_dare(0.5, 0.0, 1.0, 1.0)[0, 0] == pytest.approx(4 / 3, abs=1e-9)


def test_dare_scalar_golden_ratio():
    assert M.solve_dare(1.0, 1.0, 1.0, 1.0)[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_dare_random_residual_and_scipy(seed):
    rng = np.random.default_rng(seed)
    A, B, Q, R = random_stable_system(rng, 4, 2)
    P = M.solve_dare(A, B, Q, R, tol=1e-9)
    assert M.dare_residual(A, B, Q, R, P) <= 1e-9
    assert np.min(np.linalg.eigvalsh(P)) >= -1e-12
    np.testing.assert_allclose(P, dare_scipy(A, B, Q, R), rtol=1e-7, atol=1e-9)


def test_dare_errors():
    with pytest.raises(M.DareError):
        M.solve_dare(1.0, 1.0, 1.0, 0.0)
    with pytest.raises(M.DareError):
        M.solve_dare(2.0, 0.0, 1.0, 1.0)  # unstable and uncontrollable


def test_terminal_weight_fallback_flag():
    C = np.eye(1)
    P, fb = M.terminal_weight_latent(np.array([[2.0]]), np.zeros((1, 1)), C, np.eye(1), np.eye(1))
    assert fb and np.array_equal(P, C.T @ C)
    P, fb = M.terminal_weight_latent(np.array([[0.5]]), np.zeros((1, 1)), C, np.eye(1), np.eye(1))
    assert not fb and P[0, 0] == pytest.approx(4 / 3)


# ---------------------------------------------------------------------- QP

def random_problem(rng, n=3, p=2, m=2, N=4):
    A, B, _, _ = random_stable_system(rng, n, p)
    C = rng.standard_normal((m, n))
    s0 = rng.standard_normal(n)
    ref = rng.standard_normal((N + 1, m))
    u_prev = rng.standard_normal(p)
    Pm = rng.standard_normal((n, n))
    P = Pm @ Pm.T
    s_ref = rng.standard_normal(n)
    return A, B, C, s0, ref, u_prev, P, s_ref


@pytest.mark.parametrize("seed", range(6))
def test_unconstrained_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n, p, m, Nh = 3, 2, 2, 4
    A, B, C, s0, ref, u_prev, P, s_ref = random_problem(rng, n, p, m, Nh)
    Qw, Rw = np.diag([1.0, 2.0]), np.diag([0.3, 0.1])
    cfg = M.MpcConfig(N=Nh, Qw=Qw, Rw=Rw)
    sol = M.solve_mpc(M.MpcProblem(A, B, s0, ref, u_prev, P_term=P, s_term_ref=s_ref, C_out=C), cfg)
    J = lambda U: mpc_objective(A, B, C, s0, ref, u_prev, U.reshape(Nh, p), Qw, Rw, P, s_ref)
    U_or = quadratic_argmin(J, Nh * p)
    assert abs(sol.objective - J(U_or)) <= 1e-6
    assert sol.objective == pytest.approx(J(sol.U), abs=1e-9)
    np.testing.assert_allclose(sol.U, U_or, atol=1e-6)


def test_scalar_horizon_two_normal_equations():
    # s+ = a s + b u; J = (s0-r0)^2 + (s1-r1)^2 + (s2-r2)^2 + r*du^2
    a, b, r = 0.8, 0.5, 0.2
    ref = np.array([[0.0], [1.0], [1.0]])
    prob = M.MpcProblem([[a]], [[b]], [0.3], ref, [0.0], C_out=np.eye(1))
    sol = M.solve_mpc(prob, M.MpcConfig(N=2, Qw=1.0, Rw=r))
    s0 = 0.3
    # residual vector linear in U: [s1 - 1, s2 - 1, sqrt(r) du0, sqrt(r) du1]
    G = np.array([[b, 0], [a * b, b], [np.sqrt(r), 0], [-np.sqrt(r), np.sqrt(r)]])
    h = np.array([a * s0 - 1, a * a * s0 - 1, 0, 0])
    U = np.linalg.lstsq(G, -h, rcond=None)[0]
    np.testing.assert_allclose(sol.U, U, atol=1e-10)


def test_active_input_bound():
    # unconstrained optimum u = 7 with u_prev = 7
    prob = M.MpcProblem([[0.0]], [[1.0]], [0.0], [[0.0], [7.0]], [7.0], C_out=np.eye(1))
    free = M.solve_mpc(prob, M.MpcConfig(N=1, Qw=1.0, Rw=0.1))
    assert free.u0[0] == pytest.approx(7.0, abs=1e-12)
    cfg = M.MpcConfig(N=1, Qw=1.0, Rw=0.1, u_low=-5.0, u_high=5.0)
    sol = M.solve_mpc(prob, cfg)
    J = lambda u: (u - 7.0) ** 2 + 0.1 * (u - 7.0) ** 2
    assert sol.u0[0] == pytest.approx(scalar_box_argmin(J, -5.0, 5.0), abs=1e-6)
    assert sol.u0[0] == pytest.approx(5.0, abs=1e-9)
    assert sol.kkt <= 1e-6


def constrained_instance(seed):
    rng = np.random.default_rng(seed)
    A, B, C, s0, ref, u_prev, P, s_ref = random_problem(rng)
    ref = 5 * ref
    prob = M.MpcProblem(A, B, s0, ref, u_prev, P_term=P, s_term_ref=s_ref, C_out=C)
    return prob, dict(N=4, Qw=np.eye(2), Rw=0.1 * np.eye(2), u_low=-0.2, u_high=0.2)


@pytest.mark.parametrize("seed", range(5))
def test_objective_monotone_across_iterations(seed):
    prob, kw = constrained_instance(seed)
    sol = M.solve_mpc(prob, M.MpcConfig(**kw), record=True)
    h = np.array(sol.history)
    assert np.all(np.diff(h) <= 1e-12)
    assert np.all(sol.U >= -0.2 - 1e-15) and np.all(sol.U <= 0.2 + 1e-15)


@pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
def test_weight_scaling_invariance(c):
    prob, kw = constrained_instance(11)
    base = M.solve_mpc(prob, M.MpcConfig(**kw, tol=1e-12, max_iter=20000))
    prob_c = M.MpcProblem(prob.A, prob.B, prob.s0, prob.reference, prob.u_prev, P_term=c * prob.P_term,
                          s_term_ref=prob.s_term_ref, C_out=prob.C_out)
    kw_c = dict(kw, Qw=c * kw["Qw"], Rw=c * kw["Rw"])
    scaled = M.solve_mpc(prob_c, M.MpcConfig(**kw_c, tol=1e-12, max_iter=20000))
    assert np.max(np.abs(base.U - scaled.U)) <= 1e-8
    assert scaled.objective == pytest.approx(c * base.objective, rel=1e-9)


@given(st.integers(0, 10 ** 6))
def test_zero_reference_zero_state(seed):
    rng = np.random.default_rng(seed)
    A, B, _, _ = random_stable_system(rng, 3, 2)
    prob = M.MpcProblem(A, B, np.zeros(3), np.zeros((4, 2)), np.zeros(2))
    sol = M.solve_mpc(prob, M.MpcConfig(N=3, Qw=np.eye(2), Rw=np.eye(2), u_low=-1, u_high=1))
    np.testing.assert_array_equal(sol.U, 0.0)


def test_steady_state_without_actuation_holds_input():
    prob = M.MpcProblem(np.eye(2), np.zeros((2, 1)), [0.4, -0.1], np.tile([0.4, -0.1], (6, 1)), [0.7],
                        C_out=np.eye(2))
    sol = M.solve_mpc(prob, M.MpcConfig(N=5, Qw=np.eye(2), Rw=1.0))
    np.testing.assert_allclose(sol.U, 0.7, atol=1e-12)


def test_saturates_on_infeasible_step():
    prob = M.MpcProblem([[0.9]], [[0.1]], [0.0], np.full((6, 1), 100.0), [0.0], C_out=np.eye(1))
    sol = M.solve_mpc(prob, M.MpcConfig(N=5, Qw=1.0, Rw=0.01, u_low=-1, u_high=1, y_low=-2, y_high=2))
    np.testing.assert_allclose(sol.U, 1.0, atol=1e-9)


def test_soft_output_bound_reduces_violation():
    args = ([[1.0]], [[1.0]], [0.0], np.full((4, 1), 3.0), [0.0])
    free = M.solve_mpc(M.MpcProblem(*args, C_out=np.eye(1)), M.MpcConfig(N=3, Qw=1.0, Rw=0.01))
    soft = M.solve_mpc(M.MpcProblem(*args, C_out=np.eye(1)),
                       M.MpcConfig(N=3, Qw=1.0, Rw=0.01, y_high=1.0, max_iter=5000))
    y_free = np.cumsum(free.U)
    y_soft = np.cumsum(soft.U)
    assert y_soft.max() < y_free.max() and y_soft.max() <= 1.01


def test_nonfinite_model_raises():
    with pytest.raises(M.MpcSolverError):
        M.solve_mpc(M.MpcProblem([[np.nan]], [[1.0]], [0.0], np.zeros((2, 1)), [0.0], C_out=np.eye(1)),
                    M.MpcConfig(N=1))


def test_config_validation():
    with pytest.raises(ValueError):
        M.MpcConfig(N=0)
    with pytest.raises(ValueError):
        M.MpcConfig(Rw=0.0)
    with pytest.raises(ValueError):
        M.MpcConfig(Qw=-1.0)


# --------------------------------------------------------- receding horizon

def perfect_nssm(A, B, H=2, eps=1e-4):
    n, p = B.shape
    cfg = N.NssmConfig(p, n, H=H, n_z=n, T=2, hidden=(n,))
    n_in = H * (p + n)
    W0 = np.zeros((n, n_in))
    W0[:, n_in - n:] = eps * np.eye(n)
    parts = {"enc_W0": W0, "enc_b0": np.zeros(n), "enc_W1": np.eye(n) / eps, "enc_b1": np.zeros(n),
             "A_z": A, "B_z": B, "C_z": np.eye(n)}
    return N.NssmParams(cfg, cfg.layout.flatten(parts))


def linear_plant():
    A = np.array([[0.9, 0.2], [-0.1, 0.8]])
    B = np.array([[0.5, 0.0], [0.1, 0.4]])
    return A, B


def test_closed_loop_converges_on_perfect_model():
    A, B = linear_plant()
    params = perfect_nssm(A, B)
    Nh = 8
    ctrl = M.MpcController(params, M.MpcConfig(N=Nh, Qw=np.eye(2), Rw=0.01 * np.eye(2)))
    assert not ctrl.dare_fallback
    target = np.array([0.6, -0.4])
    U, Y = [np.zeros(2), np.zeros(2)], [np.zeros(2), np.zeros(2)]
    for _ in range(100):
        u = M.receding_horizon_step(ctrl, np.array(U), np.array(Y), np.tile(target, (Nh + 1, 1)))
        Y.append(A @ Y[-1] + B @ u)
        U.append(u)
    assert np.linalg.norm(Y[-1] - target) <= 0.02 * np.linalg.norm(target)


def test_controller_is_pure_given_state():
    A, B = linear_plant()
    cfg = M.MpcConfig(N=5, Qw=np.eye(2), Rw=0.1 * np.eye(2), u_low=-1, u_high=1)
    pu, py = np.zeros((2, 2)), np.array([[0.1, 0.2], [0.3, 0.1]])
    ref = np.ones((6, 2))
    c1, c2 = M.MpcController(perfect_nssm(A, B), cfg), M.MpcController(perfect_nssm(A, B), cfg)
    a = c1.step(pu, py, ref, u_prev=np.zeros(2))
    b = c1.step(pu, py, ref, u_prev=np.zeros(2))
    c = c2.step(pu, py, ref)
    assert np.array_equal(a, b) and np.array_equal(a, c)
    np.testing.assert_array_equal(c1.u_prev, a)


def test_missing_history():
    A, B = linear_plant()
    ctrl = M.MpcController(perfect_nssm(A, B, H=3), M.MpcConfig(N=2, Qw=np.eye(2), Rw=np.eye(2)))
    with pytest.raises(M.MissingHistoryError):
        ctrl.step(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))
