"""Regularized soft-margin linear SVM and its KKT system.

The problem solved is

    min  0.5 a'a + (rho/2)(b^2 + xi'xi) + theta 1'xi
    s.t. y_i (a'x_i + b) >= 1 - xi_i,  xi_i >= 0.

Strict convexity (rho > 0) makes the solution unique. With the slack
eliminated, xi_i = max(0, 1 - y_i (a'x_i + b)), the problem lives in the
(p+1)-dimensional (a, b) space and is piecewise quadratic. Each sample sits
in one of three pieces: strictly outside the margin (omega_i = 0), on the
margin (0 <= omega_i <= theta, xi_i = 0) or violating it
(omega_i = theta + rho xi_i). Given the partition, the optimality system is
linear, so once a solver has identified it the solution is polished by one
exact linear solve.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from scipy.linalg import qr_delete, solve_triangular
from scipy.optimize import lsq_linear, minimize

from .core import Dataset


@dataclass(frozen=True)
class SvmConfig:
    theta: float = 1.0
    rho: float = 1e-2
    tolerance: float = 1e-8
    max_iterations: int = 10_000

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be a positive integer")


@dataclass(frozen=True)
class SvmSolution:
    alpha: np.ndarray
    beta: float
    xi: np.ndarray
    omega: np.ndarray
    sigma_mult: np.ndarray
    kkt_residual: float
    iterations: int = 0
    method: str = ""

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.alpha + self.beta

    def vector(self) -> np.ndarray:
        """Concatenated (alpha, beta, xi)."""
        return np.concatenate([self.alpha, [self.beta], self.xi])


class SvmConvergenceError(RuntimeError):
    """Raised when the KKT tolerance is not met; carries the best iterate found."""

    def __init__(self, message, best: Optional[SvmSolution] = None):
        super().__init__(message)
        self.best = best
        self.residual = None if best is None else best.kkt_residual


def svm_objective(alpha, beta, xi, config: SvmConfig) -> float:
    alpha, xi = np.asarray(alpha), np.asarray(xi)
    return float(
        0.5 * alpha @ alpha + 0.5 * config.rho * (beta**2 + xi @ xi) + config.theta * xi.sum()
    )


def hinge_objective(alpha, xi, theta: float) -> float:
    """Objective of the unregularized soft-margin problem, 0.5 a'a + theta 1'xi."""
    alpha, xi = np.asarray(alpha), np.asarray(xi)
    return float(0.5 * alpha @ alpha + theta * xi.sum())


def slack(data: Dataset, alpha, beta) -> np.ndarray:
    m = data.labels * (data.features @ alpha + beta)
    return np.maximum(0.0, 1.0 - m)


def kkt_residual(data: Dataset, config: SvmConfig, candidate: SvmSolution) -> float:
    """Max-norm violation over all KKT equations of the regularized problem.

    Stationarity is measured in the unscaled form rho*b = sum omega_i y_i so
    that small rho does not amplify round-off.
    """
    X, y = data.features, data.labels
    a = np.asarray(candidate.alpha, dtype=float)
    b = float(candidate.beta)
    xi = np.asarray(candidate.xi, dtype=float)
    om = np.asarray(candidate.omega, dtype=float)
    vs = np.asarray(candidate.sigma_mult, dtype=float)
    q, p = X.shape
    if a.shape != (p,) or xi.shape != (q,) or om.shape != (q,) or vs.shape != (q,):
        raise ValueError("candidate dimensions do not match the dataset")
    wy = om * y
    margin = y * (X @ a + b) - 1.0 + xi
    parts = [
        np.abs(a - X.T @ wy),
        [abs(config.rho * b - wy.sum())],
        np.abs(config.rho * xi + config.theta - om - vs),
        np.maximum(0.0, -margin),
        np.maximum(0.0, -xi),
        np.maximum(0.0, -om),
        np.maximum(0.0, -vs),
        np.abs(om * margin),
        np.abs(xi * vs),
    ]
    return float(max(np.max(part) if len(part) else 0.0 for part in parts))


def _assemble(data, config, w, omega, iterations, method) -> SvmSolution:
    p = data.p
    alpha, beta = w[:p].copy(), float(w[p])
    xi = slack(data, alpha, beta)
    omega = np.maximum(omega, 0.0)
    sigma = np.maximum(0.0, config.rho * xi + config.theta - omega)
    sol = SvmSolution(alpha, beta, xi, omega, sigma, 0.0, iterations, method)
    return replace(sol, kkt_residual=kkt_residual(data, config, sol))


def _solve_partition(Z, config, margin_idx, viol_idx):
    """Solve the linear optimality system for a fixed partition.

    Unknowns are w = (alpha, beta) and the on-margin multipliers. When the
    on-margin rows are linearly dependent the multipliers are not unique, so
    a bounded least-squares solve keeps them inside [0, theta].
    """
    n = Z.shape[1]
    rho, theta = config.rho, config.theta
    D = np.ones(n)
    D[-1] = rho
    Zu = Z[viol_idx]
    K = np.diag(D) + rho * Zu.T @ Zu
    rhs_w = (theta + rho) * Zu.sum(axis=0)
    Zm = Z[margin_idx]
    k = len(margin_idx)
    A = np.zeros((n + k, n + k))
    A[:n, :n] = K
    A[:n, n:] = -Zm.T
    A[n:, :n] = Zm
    rhs = np.concatenate([rhs_w, np.ones(k)])
    sol = None
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        pass
    if sol is None or not np.all(np.isfinite(sol)) or (k and (sol[n:].min() < 0 or sol[n:].max() > theta)):
        lo = np.r_[np.full(n, -np.inf), np.zeros(k)]
        hi = np.r_[np.full(n, np.inf), np.full(k, theta)]
        sol = lsq_linear(A, rhs, bounds=(lo, hi), method="bvls", tol=1e-15).x
    return sol[:n], sol[n:]


def _multipliers(Z, config, w, margin_idx, omega_margin):
    q = Z.shape[0]
    t = 1.0 - Z @ w
    omega = np.zeros(q)
    viol = t > 0
    omega[viol] = config.theta + config.rho * t[viol]
    omega[margin_idx] = omega_margin
    return omega


def _dual_descent(data, config, omega0):
    """L-BFGS-B on the slack-eliminated dual from a given starting point.

    The dual is min 0.5 w'Qw - 1'w + sum max(0, w_i - theta)^2 / (2 rho)
    over w >= 0 with Q_ij = y_i y_j (x_i'x_j + 1/rho). It is only C^1, so
    the result is approximate and gets polished afterwards.
    """
    X, y = data.features, data.labels
    theta, rho = config.theta, config.rho
    Q = np.outer(y, y) * (X @ X.T + 1.0 / rho)

    def fun(om):
        excess = np.maximum(0.0, om - theta)
        return 0.5 * om @ Q @ om - om.sum() + excess @ excess / (2 * rho), Q @ om - 1.0 + excess / rho

    res = minimize(fun, np.maximum(omega0, 0.0), jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * data.q,
                   options={"maxiter": config.max_iterations, "ftol": 0.0, "gtol": 1e-13, "maxcor": 30})
    omega = res.x
    w = np.concatenate([X.T @ (omega * y), [(omega * y).sum() / rho]])
    return w, omega, int(res.nit)


def _householder_update(J, d, k):
    """Rotate columns k: of J so that J' n has a single nonzero entry at k."""
    v = d[k:].copy()
    nrm = np.linalg.norm(v)
    if nrm == 0.0:
        return 0.0
    gamma = -nrm if v[0] >= 0 else nrm
    v[0] -= gamma
    vv = v @ v
    if vv > 0:
        J[:, k:] -= np.outer(J[:, k:] @ v, v) * (2.0 / vv)
    return gamma


def _drop_column(J, R, nact, k):
    """Remove active column k and restore triangularity with Givens rotations,
    applying the same rotations to the columns of J."""
    J1, R1 = qr_delete(J, R[:, :nact], k, 1, which="col", check_finite=False)
    J[:] = J1
    R[:, : nact - 1] = R1
    R[:, nact - 1] = 0.0


class _IterationLimit(Exception):
    def __init__(self, x, u, active, iterations):
        super().__init__(f"dual active-set QP hit the iteration limit after {iterations} steps")
        self.state = (x, u, active, iterations)


def dual_active_set_qp(g_diag, a, C, b, max_iter=10_000, tol=1e-12):
    """Goldfarb-Idnani dual active-set method for a strictly convex QP.

    Minimizes 0.5 x'Gx + a'x subject to C'x >= b with G = diag(g_diag).
    Returns (x, multipliers, active_index_list, iterations).
    """
    g_diag = np.asarray(g_diag, dtype=float)
    n, m = C.shape
    J = np.diag(1.0 / np.sqrt(g_diag))
    R = np.zeros((n, n))
    x = -a / g_diag
    active: list = []
    u = np.zeros(0)
    scale = 1.0 + np.abs(b)
    it = 0
    while it < max_iter:
        s = (C.T @ x - b) / scale
        if active:
            s[active] = np.inf
        pidx = int(np.argmin(s))
        if s[pidx] >= -tol:
            return x, u, active, it
        npl = C[:, pidx]
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                break
            nact = len(active)
            d = J.T @ npl
            z = J[:, nact:] @ d[nact:]
            r = solve_triangular(R[:nact, :nact], d[:nact]) if nact else np.zeros(0)
            t1, k = np.inf, -1
            pos = np.flatnonzero(r > 1e-14)
            if pos.size:
                ratios = u_plus[pos] / r[pos]
                j = int(np.argmin(ratios))
                t1, k = float(ratios[j]), int(pos[j])
            zn = float(z @ npl)
            t2 = np.inf if abs(zn) <= 1e-14 * (1.0 + npl @ npl) else -(npl @ x - b[pidx]) / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                raise SvmConvergenceError("QP is infeasible")
            if not np.isfinite(t2):
                u_plus[:nact] -= t * r
                u_plus[nact] += t
                u_plus = np.delete(u_plus, k)
                _drop_column(J, R, nact, k)
                del active[k]
                continue
            x = x + t * z
            u_plus[:nact] -= t * r
            u_plus[nact] += t
            if t2 <= t1:
                gamma = _householder_update(J, d, nact)
                R[:nact, nact] = d[:nact]
                R[nact, nact] = gamma
                active.append(pidx)
                u = u_plus
                break
            u_plus = np.delete(u_plus, k)
            _drop_column(J, R, nact, k)
            del active[k]
    raise _IterationLimit(x, u, list(active), it)


def _qp_data(data: Dataset, config: SvmConfig):
    q, p = data.q, data.p
    n = p + 1 + q
    g = np.ones(n)
    g[p:] = config.rho
    a = np.zeros(n)
    a[p + 1 :] = config.theta
    C = np.zeros((n, 2 * q))
    C[:p, :q] = (data.labels[:, None] * data.features).T
    C[p, :q] = data.labels
    C[p + 1 :, :q] = np.eye(q)
    C[p + 1 :, q:] = np.eye(q)
    b = np.concatenate([np.ones(q), np.zeros(q)])
    return g, a, C, b


def _solve_qp(data, config):
    g, a, C, b = _qp_data(data, config)
    try:
        x, u, active, iters = dual_active_set_qp(g, a, C, b, max_iter=config.max_iterations)
    except _IterationLimit as exc:
        x, u, active, iters = exc.state
        omega = np.zeros(data.q)
        for idx, val in zip(active, u):
            if idx < data.q:
                omega[idx] = val
        best = _assemble(data, config, x[: data.p + 1], omega, iters, "active-set")
        raise SvmConvergenceError(str(exc), best) from None
    omega = np.zeros(data.q)
    for idx, val in zip(active, u):
        if idx < data.q:
            omega[idx] = val
    return x[: data.p + 1], omega, iters


def _polish(data, config, sol: SvmSolution) -> SvmSolution:
    """Re-solve the linear system on the partition read off ``sol``.

    The partition is first read from the margins at a tolerance-sized band.
    If that misses the tolerance, wider and narrower bands on both the
    margins and the multipliers are tried and the best candidate kept.
    """
    Z = data.labels[:, None] * np.hstack([data.features, np.ones((data.q, 1))])
    w = np.concatenate([sol.alpha, [sol.beta]])
    t = 1.0 - Z @ w
    band = 10 * config.tolerance * (1.0 + np.abs(Z).sum(axis=1) * (1.0 + np.abs(w).max()))
    partitions = [(np.flatnonzero(np.abs(t) <= band), np.flatnonzero(t > band))]
    best = sol
    for eps in np.r_[np.inf, 10.0 ** -np.arange(2, 12)]:
        if np.isfinite(eps):
            cut = config.theta + eps * config.rho
            partitions = [(np.flatnonzero(np.abs(t) <= eps), np.flatnonzero(t > eps)),
                          (np.flatnonzero((sol.omega > eps) & (sol.omega <= cut)), np.flatnonzero(sol.omega > cut))]
        for margin_idx, viol_idx in partitions:
            w2, om_m = _solve_partition(Z, config, margin_idx, viol_idx)
            omega = _multipliers(Z, config, w2, margin_idx, om_m)
            cand = _assemble(data, config, w2, omega, sol.iterations, sol.method + "+polish")
            if cand.kkt_residual < best.kkt_residual:
                best = cand
        if best.kkt_residual <= config.tolerance:
            break
    return best


def train_svm(data: Dataset, config: SvmConfig = SvmConfig(), init=None) -> SvmSolution:
    """Solve the regularized soft-margin SVM to the configured KKT tolerance.

    By default the dual active-set QP is used, which terminates finitely.
    Passing ``init`` (a length-q vector of starting margin multipliers)
    switches to L-BFGS-B on the dual from that point; both routes finish
    with an exact linear solve on the identified partition.
    """
    data.require_binary()
    if init is None:
        w, omega, iters = _solve_qp(data, config)
        best = _polish(data, config, _assemble(data, config, w, omega, iters, "active-set"))
    else:
        omega = np.asarray(init, dtype=float).ravel()
        if omega.shape != (data.q,):
            raise ValueError(f"init must hold {data.q} multipliers")
        best, iters = None, 0
        for _ in range(5):
            w, omega, n = _dual_descent(data, config, omega)
            iters += n
            cand = _polish(data, config, _assemble(data, config, w, omega, iters, "dual-descent"))
            if best is None or cand.kkt_residual < best.kkt_residual:
                best = cand
            if best.kkt_residual <= config.tolerance:
                break
    if best.kkt_residual > config.tolerance:
        raise SvmConvergenceError(
            f"KKT residual {best.kkt_residual:.3e} above tolerance {config.tolerance:.1e}", best
        )
    return best


def verify_rho_limit(data: Dataset, config: SvmConfig, rho_sequence: Sequence[float],
                     reference: Optional[float] = None) -> np.ndarray:
    """Gap between the unregularized objective at each rho's solution and a reference.

    Without ``reference`` the smallest objective seen over the sequence is
    used, so the last entry is typically zero.
    """
    rhos = np.asarray(rho_sequence, dtype=float)
    if rhos.ndim != 1 or rhos.size == 0 or np.any(rhos <= 0):
        raise ValueError("rho_sequence must be a non-empty sequence of positive reals")
    if np.any(np.diff(rhos) >= 0):
        raise ValueError("rho_sequence must be strictly decreasing")
    objs = []
    for rho in rhos:
        sol = train_svm(data, replace(config, rho=float(rho)))
        objs.append(hinge_objective(sol.alpha, sol.xi, config.theta))
    objs = np.array(objs)
    ref = objs.min() if reference is None else float(reference)
    return objs - ref


def save_model(path, solution: SvmSolution, config: SvmConfig, feature_names=None, label_map=None):
    doc = {
        "kind": "linear_svm",
        "alpha": [float(v) for v in solution.alpha],
        "beta": float(solution.beta),
        "theta": float(config.theta),
        "rho": float(config.rho),
        "kkt_residual": float(solution.kkt_residual),
    }
    if feature_names:
        doc["feature_names"] = list(feature_names)
    if label_map:
        doc["label_map"] = {str(k): float(v) for k, v in label_map.items()}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_model(path) -> dict:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict) or doc.get("kind") != "linear_svm":
        raise ValueError(f"{path}: not a linear SVM model file")
    doc["alpha"] = np.asarray(doc["alpha"], dtype=float)
    return doc
