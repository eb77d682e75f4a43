"""Reference-tracking MPC on the stacked latent model.

The horizon-N problem is condensed over the input sequence and solved with a
monotone projected fast-gradient method under the input box. Output bounds
enter as a quadratic penalty on violations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from metactrl import nssm as nssm_mod

log = logging.getLogger(__name__)


class DareError(ArithmeticError):
    pass


class MpcSolverError(ArithmeticError):
    def __init__(self, message: str, iterate: np.ndarray | None = None, history: list | None = None):
        super().__init__(message)
        self.iterate = iterate
        self.history = history


class MissingHistoryError(ValueError):
    pass


# ------------------------------------------------------------------------ DARE

def riccati_map(A, B, Q, R, P):
    BtP = B.T @ P
    return A.T @ P @ A - (A.T @ P @ B) @ np.linalg.solve(R + BtP @ B, BtP @ A) + Q


def dare_residual(A, B, Q, R, P) -> float:
    return float(np.linalg.norm(P - riccati_map(A, B, Q, R, P)))


def solve_dare(A, B, Q, R, tol: float = 1e-9, max_iter: int = 20000) -> np.ndarray:
    """Fixed-point Riccati iteration from ``P = Q``; raises :class:`DareError` if it stalls or blows up."""
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=np.float64)) for M in (A, B, Q, R))
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise DareError("R must be positive definite")
    P = Q.copy()
    for it in range(max_iter):
        P_next = riccati_map(A, B, Q, R, P)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.linalg.norm(P_next) > 1e12:
            raise DareError(f"Riccati iteration diverged after {it} steps")
        step = np.linalg.norm(P_next - P)
        P = P_next
        if step <= 0.1 * tol and dare_residual(A, B, Q, R, P) <= tol:
            return P
    res = dare_residual(A, B, Q, R, P)
    if res <= tol:
        return P
    raise DareError(f"no convergence in {max_iter} iterations (residual {res:.3e})")


def terminal_weight_latent(A_z, B_z, C_z, Qw, Rw, tol=1e-9, max_iter=20000) -> tuple[np.ndarray, bool]:
    """DARE on the latent pair with Q = C_z^T Qw C_z; falls back to that Q (flagged) on failure."""
    Qt = C_z.T @ Qw @ C_z
    try:
        return solve_dare(A_z, B_z, Qt, Rw, tol, max_iter), False
    except (DareError, np.linalg.LinAlgError) as exc:
        log.warning("DARE failed (%s); terminal weight falls back to C^T Q C", exc)
        return Qt, True


# ---------------------------------------------------------------- QP problem

@dataclass
class MpcConfig:
    N: int = 10
    Qw: np.ndarray = field(default_factory=lambda: np.eye(1))
    Rw: np.ndarray = field(default_factory=lambda: np.eye(1))
    u_low: np.ndarray | None = None
    u_high: np.ndarray | None = None
    y_low: np.ndarray | None = None
    y_high: np.ndarray | None = None
    soft_factor: float = 1e3
    max_iter: int = 500
    tol: float = 1e-8
    dare_tol: float = 1e-9
    dare_max_iter: int = 20000

    def __post_init__(self):
        self.Qw = np.atleast_2d(np.asarray(self.Qw, dtype=np.float64))
        self.Rw = np.atleast_2d(np.asarray(self.Rw, dtype=np.float64))
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if np.any(np.linalg.eigvalsh(0.5 * (self.Qw + self.Qw.T)) < -1e-12):
            raise ValueError("Qw must be positive semidefinite")
        if np.any(np.linalg.eigvalsh(0.5 * (self.Rw + self.Rw.T)) <= 0):
            raise ValueError("Rw must be positive definite")
        for k in ("u_low", "u_high", "y_low", "y_high"):
            v = getattr(self, k)
            if v is not None:
                setattr(self, k, np.atleast_1d(np.asarray(v, dtype=np.float64)))

    @property
    def soft_weight(self) -> float:
        return self.soft_factor * float(np.linalg.norm(self.Qw, 2))


@dataclass
class MpcProblem:
    """Stacked model ``s+ = A s + B u``, outputs ``C_out s``, terminal cost on ``s_N``."""

    A: np.ndarray
    B: np.ndarray
    s0: np.ndarray
    reference: np.ndarray  # (N+1, m): y_bar_t .. y_bar_{t+N}
    u_prev: np.ndarray
    P_term: np.ndarray | None = None  # on s; default: lift of Qw on the output block
    s_term_ref: np.ndarray | None = None  # default: [0; y_bar_N]
    C_out: np.ndarray | None = None  # default: select the last m entries of s

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.asarray(self.B, dtype=np.float64).reshape(self.A.shape[0], -1)
        self.s0 = np.asarray(self.s0, dtype=np.float64).ravel()
        self.reference = np.asarray(self.reference, dtype=np.float64)
        if self.reference.ndim == 1:
            self.reference = self.reference[:, None]
        self.u_prev = np.asarray(self.u_prev, dtype=np.float64).ravel()
        n_s, m = self.A.shape[0], self.reference.shape[1]
        if self.C_out is None:
            self.C_out = np.hstack([np.zeros((m, n_s - m)), np.eye(m)])
        if self.s0.size != n_s or self.u_prev.size != self.B.shape[1]:
            raise ValueError("problem dimensions are inconsistent")


@dataclass
class CondensedQP:
    """``J(U) = 0.5 U^T H U + f^T U + c`` plus optional soft output bounds."""

    H: np.ndarray
    f: np.ndarray
    c: float
    out_map: np.ndarray  # predicted outputs k=1..N as out_map @ U + out_off
    out_off: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    y_low: np.ndarray | None
    y_high: np.ndarray | None
    soft_weight: float


def _prediction_matrices(A, B, N):
    n_s, p = B.shape
    Phi = np.zeros((N, n_s, n_s))
    Gam = np.zeros((N, n_s, N * p))
    Ak = np.eye(n_s)
    for k in range(N):  # row k is s_{k+1}
        Gam[k] = A @ Gam[k - 1] if k else 0.0
        Gam[k][:, k * p:(k + 1) * p] = B
        Ak = A @ Ak
        Phi[k] = Ak
    return Phi, Gam


def _diff_operator(N, p):
    D = np.eye(N * p)
    for k in range(1, N):
        D[k * p:(k + 1) * p, (k - 1) * p:k * p] = -np.eye(p)
    return D


def condense(problem: MpcProblem, config: MpcConfig, prediction=None) -> CondensedQP:
    A, B, N = problem.A, problem.B, config.N
    n_s, p = B.shape
    C = problem.C_out
    m = C.shape[0]
    ref = problem.reference
    if ref.shape != (N + 1, m):
        raise ValueError(f"reference must have shape {(N + 1, m)}, got {ref.shape}")
    Phi, Gam = prediction if prediction is not None else _prediction_matrices(A, B, N)
    Qw, Rw = config.Qw, config.Rw
    P = problem.P_term
    if P is None:
        P = C.T @ Qw @ C
    s_ref = problem.s_term_ref if problem.s_term_ref is not None else C.T @ np.linalg.lstsq(C @ C.T, ref[N], rcond=None)[0]

    H = np.zeros((N * p, N * p))
    f = np.zeros(N * p)
    c = 0.0
    y0 = C @ problem.s0 - ref[0]
    c += float(y0 @ Qw @ y0)
    out_map = np.zeros((N * m, N * p))
    out_off = np.zeros(N * m)
    for k in range(N):  # s_{k+1}
        E = C @ Gam[k]
        e = C @ (Phi[k] @ problem.s0)
        out_map[k * m:(k + 1) * m] = E
        out_off[k * m:(k + 1) * m] = e
        if k < N - 1:
            r = e - ref[k + 1]
            H += 2 * E.T @ Qw @ E
            f += 2 * E.T @ Qw @ r
            c += float(r @ Qw @ r)
    GN = Gam[N - 1]
    rN = Phi[N - 1] @ problem.s0 - s_ref
    H += 2 * GN.T @ P @ GN
    f += 2 * GN.T @ P @ rN
    c += float(rN @ P @ rN)
    D = _diff_operator(N, p)
    Rbar = np.kron(np.eye(N), Rw)
    d = np.zeros(N * p)
    d[:p] = problem.u_prev
    H += 2 * D.T @ Rbar @ D
    f += -2 * D.T @ Rbar @ d
    c += float(d @ Rbar @ d)
    H = 0.5 * (H + H.T)
    def tiled(v, n, fill):
        return np.full(N * n, fill) if v is None else np.tile(np.broadcast_to(v, (n,)), N)

    lo, hi = tiled(config.u_low, p, -np.inf), tiled(config.u_high, p, np.inf)
    return CondensedQP(H, f, c, out_map, out_off, lo, hi,
                       None if config.y_low is None else tiled(config.y_low, m, 0.0),
                       None if config.y_high is None else tiled(config.y_high, m, 0.0),
                       config.soft_weight)


def qp_objective(qp: CondensedQP, U) -> float:
    U = np.asarray(U, dtype=np.float64)
    val = 0.5 * U @ qp.H @ U + qp.f @ U + qp.c
    if qp.y_low is not None or qp.y_high is not None:
        y = qp.out_map @ U + qp.out_off
        if qp.y_high is not None:
            val += qp.soft_weight * np.sum(np.maximum(y - qp.y_high, 0.0) ** 2)
        if qp.y_low is not None:
            val += qp.soft_weight * np.sum(np.maximum(qp.y_low - y, 0.0) ** 2)
    return float(val)


def _qp_grad(qp: CondensedQP, U):
    g = qp.H @ U + qp.f
    if qp.y_low is not None or qp.y_high is not None:
        y = qp.out_map @ U + qp.out_off
        viol = np.zeros_like(y)
        if qp.y_high is not None:
            viol += np.maximum(y - qp.y_high, 0.0)
        if qp.y_low is not None:
            viol -= np.maximum(qp.y_low - y, 0.0)
        g = g + 2 * qp.soft_weight * qp.out_map.T @ viol
    return g


def kkt_residual(qp: CondensedQP, U) -> float:
    """Norm of the projected-gradient map; zero exactly at box-constrained optima."""
    return float(np.linalg.norm(U - np.clip(U - _qp_grad(qp, U), qp.lo, qp.hi)))


@dataclass
class MpcSolution:
    U: np.ndarray
    u0: np.ndarray
    objective: float
    iterations: int
    converged: bool
    kkt: float
    history: list[float]


def solve_qp(qp: CondensedQP, max_iter: int = 500, tol: float = 1e-8, U0=None, record: bool = False) -> MpcSolution:
    soft = qp.y_low is not None or qp.y_high is not None
    history: list[float] = []
    if not soft:
        try:
            U_star = -np.linalg.solve(qp.H, qp.f)
        except np.linalg.LinAlgError:
            U_star = None
        if U_star is not None and np.all(U_star >= qp.lo) and np.all(U_star <= qp.hi):
            obj = qp_objective(qp, U_star)
            return MpcSolution(U_star, U_star, obj, 0, True, kkt_residual(qp, U_star), [obj] if record else [])
        start = np.clip(U_star if U_star is not None else np.zeros_like(qp.f), qp.lo, qp.hi)
    else:
        start = np.clip(np.zeros_like(qp.f), qp.lo, qp.hi)
    if U0 is not None:
        start = np.clip(np.asarray(U0, dtype=np.float64), qp.lo, qp.hi)

    L = float(np.linalg.eigvalsh(qp.H)[-1])
    if soft:
        L += 2 * qp.soft_weight * float(np.linalg.norm(qp.out_map, 2) ** 2)
    L = max(L, 1e-12)
    x = start
    fx = qp_objective(qp, x)
    y, t = x.copy(), 1.0
    if record:
        history.append(fx)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = np.clip(y - _qp_grad(qp, y) / L, qp.lo, qp.hi)
        fz = qp_objective(qp, z)
        if not np.isfinite(fz):
            raise MpcSolverError(f"objective became non-finite at iteration {it}", z, history)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        x_next, f_next = (z, fz) if fz <= fx else (x, fx)
        y = x_next + (t / t_next) * (z - x_next) + ((t - 1.0) / t_next) * (x_next - x)
        x, fx, t = x_next, f_next, t_next
        if record:
            history.append(fx)
        if kkt_residual(qp, x) <= tol * max(1.0, float(np.linalg.norm(x))):
            converged = True
            break
    if not np.all(np.isfinite(x)):
        raise MpcSolverError("solver diverged", x, history)
    return MpcSolution(x, x.copy(), fx, it, converged, kkt_residual(qp, x), history)


def solve_mpc(problem: MpcProblem, config: MpcConfig, record: bool = False) -> MpcSolution:
    """Minimise the tracking objective; ``solution.u0`` is the input to apply now."""
    if not (np.all(np.isfinite(problem.A)) and np.all(np.isfinite(problem.B)) and np.all(np.isfinite(problem.reference))):
        raise MpcSolverError("model or reference contains non-finite values")
    qp = condense(problem, config)
    sol = solve_qp(qp, config.max_iter, config.tol, record=record)
    p = problem.B.shape[1]
    sol.u0 = sol.U[:p].copy()
    return sol


# --------------------------------------------------------- receding horizon

class MpcController:
    """Receding-horizon controller on an NSSM; holds the previous input between calls."""

    def __init__(self, params: nssm_mod.NssmParams, config: MpcConfig):
        self.params = params
        self.config = config
        A_z, B_z, C_z = nssm_mod.latent_matrices(params)
        self.A, self.B = nssm_mod.compact_model(params)
        P_z, self.dare_fallback = terminal_weight_latent(A_z, B_z, C_z, config.Qw, config.Rw,
                                                         config.dare_tol, config.dare_max_iter)
        n_z, m = A_z.shape[0], C_z.shape[0]
        self.P_term = np.zeros((n_z + m, n_z + m))
        self.P_term[:n_z, :n_z] = P_z
        self._C_pinv = np.linalg.pinv(C_z)
        self._n_z = n_z
        self._prediction = _prediction_matrices(self.A, self.B, config.N)
        self.u_prev = np.zeros(B_z.shape[1])

    def reset(self):
        self.u_prev = np.zeros_like(self.u_prev)

    def problem(self, past_u, past_y, reference, u_prev=None) -> MpcProblem:
        cfg = self.params.config
        if len(past_u) < cfg.H or len(past_y) < cfg.H:
            raise MissingHistoryError(f"need {cfg.H} past pairs, have {min(len(past_u), len(past_y))}")
        z = nssm_mod.encode(self.params, np.asarray(past_u)[-cfg.H:], np.asarray(past_y)[-cfg.H:])
        C_z = self.params.parts["C_z"]
        s0 = np.concatenate([z, np.asarray(C_z) @ z])
        ref = np.asarray(reference, dtype=np.float64).reshape(self.config.N + 1, -1)
        s_ref = np.concatenate([self._C_pinv @ ref[-1], ref[-1]])
        return MpcProblem(self.A, self.B, s0, ref, self.u_prev if u_prev is None else u_prev,
                          P_term=self.P_term, s_term_ref=s_ref)

    def step(self, past_u, past_y, reference, u_prev=None) -> np.ndarray:
        prob = self.problem(past_u, past_y, reference, u_prev)
        qp = condense(prob, self.config, self._prediction)
        sol = solve_qp(qp, self.config.max_iter, self.config.tol)
        p = self.B.shape[1]
        u = sol.U[:p].copy()
        self.u_prev = u
        return u


def receding_horizon_step(controller: MpcController, u_history, y_history, reference, u_prev=None) -> np.ndarray:
    """Encode the latest H pairs, solve the horizon problem, return the first input."""
    return controller.step(u_history, y_history, reference, u_prev)
