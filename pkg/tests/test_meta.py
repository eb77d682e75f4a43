import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from metactrl import meta as Mt
from metactrl.diffnum import NonFiniteLossError, ScalarLossFn, ShapeMismatchError
from oracles import bilevel_fd_grad, exact_inner, random_spd


def _zero(psi):
    return 0.0 * jnp.sum(psi)


def _linear(psi):
    return jnp.sum(psi)


def _blowup(psi):
    return jnp.sum(jnp.exp(1e3 * psi))


ZERO, LINEAR = ScalarLossFn(_zero), ScalarLossFn(_linear)


# -------------------------------------------------------------------- inner

def test_inner_zero_loss_stays_put():
    omega = np.array([0.4, -1.0])
    np.testing.assert_array_equal(Mt.inner_adapt(ZERO, omega, Mt.MetaConfig(beta_in=0.3)), omega)


def test_inner_scalar_quadratic_converges():
    f = Mt.make_quadratic([[1.0]], [0.0])
    psi = Mt.inner_adapt(f, [2.0], Mt.MetaConfig(reg_strength=1.0, beta_in=0.3), steps=200)
    assert psi[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("beta", [0.1, 0.3, 0.45])
def test_inner_contraction_ratio(beta):
    f = Mt.make_quadratic([[1.0]], [0.0])
    cfg = Mt.MetaConfig(reg_strength=1.0, beta_in=beta, backtrack=False)
    prev = np.array([2.0])
    for k in range(1, 8):
        psi = Mt.inner_adapt(f, [2.0], cfg, steps=k)
        assert abs(psi[0] - 1.0) == pytest.approx(abs(1 - beta * 2) * abs(prev[0] - 1.0), rel=1e-12)
        prev = psi


def test_inner_nonfinite_reports_step():
    cfg = Mt.MetaConfig(beta_in=1.0, backtrack=False)
    with pytest.raises(Mt.InnerLoopError) as err:
        Mt.inner_adapt(ScalarLossFn(_blowup), [0.5], cfg, steps=3)
    assert isinstance(err.value, NonFiniteLossError) and err.value.step >= 0


def test_inner_backtracking_is_monotone():
    rng = np.random.default_rng(0)
    A = random_spd(rng, 6, 0.1, 10.0)
    f = Mt.make_quadratic(A, rng.standard_normal(6))
    rec = []
    Mt.inner_adapt(f, np.zeros(6), Mt.MetaConfig(reg_strength=0.5, beta_in=1.0), steps=20, record=rec)
    assert np.all(np.diff(rec) <= 1e-12)


# ----------------------------------------------------------------------- CG

def test_cg_identity_one_iteration():
    P = np.array([1.0, -2.0, 0.5])
    g, info = Mt.cg_solve(lambda v: 0 * v, P, 1.0, full_output=True)
    np.testing.assert_array_equal(g, P)
    assert info.iterations == 1


def test_cg_diagonal_example():
    g = Mt.cg_solve(lambda v: np.diag([1.0, 3.0]) @ v, np.array([2.0, 8.0]), 1.0)
    np.testing.assert_allclose(g, [1.0, 2.0], atol=1e-14)


def test_cg_random_50():
    rng = np.random.default_rng(0)
    Hm = random_spd(rng, 50, 0.01, 3.0)
    P = rng.standard_normal(50)
    g, info = Mt.cg_solve(lambda v: Hm @ v, P, 0.7, iters=50, full_output=True)
    direct = np.linalg.solve(np.eye(50) + Hm / 0.7, P)
    assert np.linalg.norm(g - direct) <= 1e-8 * np.linalg.norm(direct)
    assert info.iterations <= 50


@given(st.integers(2, 12), st.integers(0, 10 ** 6), st.floats(0.1, 10))
def test_cg_residual_contract(n, seed, gamma):
    rng = np.random.default_rng(seed)
    Hm = random_spd(rng, n, 0.0, 5.0)
    P = rng.standard_normal(n)
    g, info = Mt.cg_solve(lambda v: Hm @ v, P, gamma, iters=200, tol=1e-10, full_output=True)
    Qm = np.eye(n) + Hm / gamma
    assert np.linalg.norm(Qm @ g - P) <= 1e-10 * np.linalg.norm(P) * 1.0001
    assert info.iterations <= n + 2


def test_cg_indefinite_raises():
    with pytest.raises(Mt.IndefiniteCurvatureError, match="assumption"):
        Mt.cg_solve(lambda v: -3.0 * v, np.array([1.0, 1.0]), 1.0)


# --------------------------------------------------------- implicit gradient

def test_implicit_scalar_closed_form():
    tr = Mt.make_quadratic([[1.0]], [0.0])
    g = Mt.implicit_grad(tr, LINEAR, [1.0], Mt.MetaConfig(reg_strength=1.0))
    assert g[0] == pytest.approx(0.5, abs=1e-15)


def test_implicit_zero_test_loss():
    tr = Mt.make_quadratic(np.eye(3), np.ones(3))
    np.testing.assert_array_equal(Mt.implicit_grad(tr, ZERO, np.zeros(3), Mt.MetaConfig()), 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_implicit_matches_bilevel_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, reg = 5, 2.0
    tasks = [(random_spd(rng, n), rng.standard_normal(n), random_spd(rng, n), rng.standard_normal(n)) for _ in range(3)]
    omega = rng.standard_normal(n)
    cfg = Mt.MetaConfig(reg_strength=reg, cg_iters=50, cg_tol=1e-12)
    grads = []
    for A_tr, c_tr, A_te, c_te in tasks:
        psi = exact_inner(A_tr, c_tr, omega, reg)
        grads.append(Mt.implicit_grad(Mt.make_quadratic(A_tr, c_tr), Mt.make_quadratic(A_te, c_te), psi, cfg))
    g = np.mean(grads, axis=0)
    fd = bilevel_fd_grad(tasks, omega, reg)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_quadratic_family_exact_meta_grad_matches_fd():
    rng = np.random.default_rng(5)
    tasks = [Mt.QuadraticTask(random_spd(rng, 4), rng.standard_normal(4), random_spd(rng, 4), rng.standard_normal(4))
             for _ in range(2)]
    fam = Mt.QuadraticFamily(tasks)
    omega = rng.standard_normal(4)
    fd = bilevel_fd_grad([(t.train_hess, t.train_center, t.test_hess, t.test_center) for t in tasks], omega, 1.5)
    np.testing.assert_allclose(fam.exact_meta_grad(omega, 1.5), fd, rtol=1e-6, atol=1e-9)


# ------------------------------------------------------------------- outer

def test_outer_step_examples():
    np.testing.assert_array_equal(Mt.outer_step([1.0, 2.0], [np.zeros(2), np.zeros(2)], 0.1), [1.0, 2.0])
    np.testing.assert_allclose(Mt.outer_step([0.0], [np.array([1.0]), np.array([3.0])], 0.1), [-0.2])
    with pytest.raises(ShapeMismatchError):
        Mt.outer_step([0.0], [np.zeros(2)], 0.1)


@given(st.permutations(list(range(5))))
def test_outer_step_order_invariant(perm):
    gs = [np.array([float(i), float(i) ** 2]) for i in range(5)]
    a = Mt.outer_step([0.0, 0.0], gs, 0.3)
    b = Mt.outer_step([0.0, 0.0], [gs[i] for i in perm], 0.3)
    np.testing.assert_allclose(a, b, rtol=1e-15, atol=1e-15)


# -------------------------------------------------------------------- MAML

def test_maml_zero_loss_gives_zero():
    np.testing.assert_array_equal(Mt.maml_outer_grad(ZERO, ZERO, [1.0, 2.0], Mt.MetaConfig(beta_in=0.1)), 0.0)


def test_maml_no_inner_steps_is_plain_gradient():
    te = Mt.make_quadratic(np.diag([1.0, 2.0]), [1.0, -1.0])
    tr = Mt.make_quadratic(np.eye(2), [0.0, 0.0])
    g = Mt.maml_outer_grad(tr, te, [0.5, 0.5], Mt.MetaConfig(inner_steps=0))
    np.testing.assert_allclose(g, [-0.5, 3.0])


def test_maml_differs_from_implicit_by_q_inverse():
    h, reg = 3.0, 2.0
    tr = Mt.make_quadratic([[h]], [0.0])
    te = Mt.make_quadratic([[1.0]], [4.0])
    omega = np.array([1.5])
    cfg = Mt.MetaConfig(reg_strength=reg, inner_steps=0)
    g_maml = Mt.maml_outer_grad(tr, te, omega, cfg)
    g_imp = Mt.implicit_grad(tr, te, omega, cfg)
    assert g_imp[0] == pytest.approx(g_maml[0] / (1 + h / reg), rel=1e-14)


# -------------------------------------------------------------- meta_train

def small_family(seed=0, n=3, tasks=3):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(n)
    ts = []
    for _ in range(tasks):
        ct = c + 0.3 * rng.standard_normal(n)
        ts.append(Mt.QuadraticTask(random_spd(rng, n), ct, random_spd(rng, n), ct + 0.05 * rng.standard_normal(n)))
    return Mt.QuadraticFamily(ts)


def test_meta_train_zero_iterations():
    fam = small_family()
    omega0 = np.array([0.3, 0.2, 0.1])
    st_ = Mt.meta_train(fam.dataset(), fam, Mt.MetaConfig(K_train=0), np.random.default_rng(0), omega0=omega0)
    np.testing.assert_array_equal(st_.omega, omega0)
    assert st_.iteration == 0


def test_meta_train_single_task_is_regularised_training():
    fam = small_family(tasks=1)
    cfg = Mt.MetaConfig(reg_strength=2.0, beta_in=0.2, inner_steps=3, batch_size=1, K_train=1, beta_out=0.5)
    omega0 = np.zeros(3)
    st_ = Mt.meta_train(fam.dataset(), fam, cfg, np.random.default_rng(0), omega0=omega0)
    tr, te = fam.tasks[0].losses()
    psi = Mt.inner_adapt(tr, omega0, cfg)
    np.testing.assert_allclose(st_.omega, omega0 - 0.5 * Mt.implicit_grad(tr, te, psi, cfg), atol=1e-14)


def test_meta_train_deterministic_and_logged(tmp_path):
    fam = small_family()
    cfg = Mt.MetaConfig(reg_strength=1.0, beta_out=0.1, batch_size=2, K_train=15, converge_rtol=0.0)
    runs = [Mt.meta_train(fam.dataset(), fam, cfg, np.random.default_rng(4), log_path=tmp_path / f"log{i}.csv")
            for i in range(2)]
    assert np.array_equal(runs[0].omega, runs[1].omega)
    assert runs[0].loss_history == runs[1].loss_history
    lines = (tmp_path / "log0.csv").read_text().splitlines()
    assert lines[0] == "iter,outer_loss,grad_norm,wall_time" and len(lines) == 16


def test_meta_train_convergence_window_stops_early():
    fam = small_family()
    cfg = Mt.MetaConfig(reg_strength=1.0, beta_out=0.5, batch_size=3, K_train=5000, converge_rtol=1e-4)
    st_ = Mt.meta_train(fam.dataset(), fam, cfg, np.random.default_rng(0))
    assert st_.converged and st_.iteration < 5000


def test_meta_train_maml_variant_runs():
    fam = small_family()
    cfg = Mt.MetaConfig(algorithm="maml", reg_strength=0.0, beta_out=0.1, batch_size=2, K_train=30, converge_rtol=0.0)
    st_ = Mt.meta_train(fam.dataset(), fam, cfg, np.random.default_rng(0))
    assert st_.loss_history[-1] < st_.loss_history[0]


def test_config_validation():
    with pytest.raises(ValueError):
        Mt.MetaConfig(algorithm="reptile")
    with pytest.raises(ValueError):
        Mt.MetaConfig(reg_strength=0.0)
    with pytest.raises(ValueError):
        Mt.MetaConfig(K_adapt=-1)


# ------------------------------------------------------------------ adapt

def test_meta_adapt_zero_steps():
    omega = np.array([1.0, 2.0])
    np.testing.assert_array_equal(Mt.meta_adapt(omega, ZERO, Mt.MetaConfig(K_adapt=0)), omega)


def test_meta_adapt_on_a_source_task_helps():
    fam = small_family(seed=2)
    cfg = Mt.MetaConfig(reg_strength=1.0, beta_out=0.3, batch_size=3, K_train=60, K_adapt=10, converge_rtol=0.0)
    omega = Mt.meta_train(fam.dataset(), fam, cfg, np.random.default_rng(0)).omega
    for t in fam.tasks:
        tr, te = t.losses()
        assert te(Mt.meta_adapt(omega, tr, cfg)) <= te(omega)


# ----------------------------------------------------------------- probes

def test_probe_inner_rate_example():
    rng = np.random.default_rng(0)
    tasks = []
    for _ in range(3):
        Qm, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        A = Qm @ np.diag([0.5, 1.0, 1.5, 2.0]) @ Qm.T
        tasks.append(Mt.QuadraticTask(A, rng.standard_normal(4), A, rng.standard_normal(4)))
    pr = Mt.probe_rates(Mt.QuadraticFamily(tasks, omega0=np.ones(4)), Mt.MetaConfig(reg_strength=4.0))
    assert pr.contraction_rate == pytest.approx(2 / 3)
    assert pr.max_inner_ratio <= 2 / 3 + 0.05 and not pr.violation


def test_probe_assumption_violation_surfaces():
    A = np.diag([-3.0, 1.0])
    fam = Mt.QuadraticFamily([Mt.QuadraticTask(A, np.zeros(2), np.eye(2), np.ones(2))], omega0=np.ones(2))
    with pytest.raises(Mt.IndefiniteCurvatureError):
        Mt.probe_rates(fam, Mt.MetaConfig(reg_strength=1.0))


def test_regularisation_bias_exact():
    res = Mt.adaptation_probe(np.diag([0.5, 1.0, 2.0]), [1.0, 2.0, 3.0], np.zeros(3), 4.0, 20)
    assert res["rho"] == pytest.approx(np.sqrt(14.0))
    assert res["regularization_bias"] == pytest.approx(res["predicted_bias"], rel=1e-14)
    assert res["predicted_bias"] == pytest.approx(28.0)


@pytest.mark.parametrize("K", [5, 10, 20])
def test_adaptation_error_decay_matches_rate(K):
    rng = np.random.default_rng(K)
    A = random_spd(rng, 5, 0.5, 2.0)
    res = Mt.adaptation_probe(A, rng.standard_normal(5), rng.standard_normal(5), 4.0, K)
    ratio = res["errors"][-1] / res["errors"][0]
    assert ratio <= 2 * res["rate"] ** K
    # the slowest mode contracts at exactly the predicted rate
    w, V = np.linalg.eigh(A)
    res = Mt.adaptation_probe(A, np.zeros(5), V[:, 0], 4.0, 5)
    assert res["measured_rate"] == pytest.approx(res["rate"], rel=1e-6)


def test_outer_rate_is_one_over_k():
    n, reg = 40, 4.0
    lam = np.geomspace(1e-5, 1.0, n)
    tasks = [Mt.QuadraticTask(np.diag(lam), np.zeros(n), np.diag(lam), np.zeros(n)) for _ in range(2)]
    h = reg ** 2 * lam / (lam + reg) ** 2  # outer Hessian eigenvalues at the exact inner solution
    fam = Mt.QuadraticFamily(tasks, omega0=1 / np.sqrt(h))
    pr = Mt.probe_rates(fam, Mt.MetaConfig(reg_strength=reg, beta_out=1 / h.max(), inner_steps=30), K=200)
    assert -1.2 <= pr.outer_slope <= -0.8
    assert not pr.violation


def test_outer_loss_monotone_after_warmup():
    fam = small_family(seed=7)
    cfg = Mt.MetaConfig(reg_strength=1.0, beta_out=0.2, batch_size=3, K_train=40, converge_rtol=0.0, inner_steps=30)
    st_ = Mt.meta_train(fam.dataset(), fam, cfg, np.random.default_rng(0))
    assert np.all(np.diff(st_.loss_history[5:]) <= 1e-12)
