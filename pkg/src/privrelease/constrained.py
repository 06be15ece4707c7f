"""Optimal noise restricted to a box.

With a diagonal weighting diag(theta_j) and a box support, the optimal density
factorizes over coordinates. In the scaled coordinate s = sqrt(theta) n each
factor is u(s)^2, where u is the ground state of

    -u'' + (lam / (4 theta)) s^2 u = mu u,   u = 0 on the scaled box ends,

and the density in the original coordinate is sqrt(theta) u(sqrt(theta) n)^2.
The ground state is found on a uniform grid with second-order differences,
which gives a symmetric tridiagonal eigenproblem.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline
from scipy.linalg import eigh_tridiagonal

from .core import RandomStream
from .densities import Density1D, ProductMechanism
from .privacy import FisherInfo

MIN_GRID = 64


class EigenSolverError(RuntimeError):
    def __init__(self, message, achieved=None):
        super().__init__(message if achieved is None else f"{message} (achieved {achieved:.3g})")
        self.achieved = achieved


@dataclass(frozen=True)
class BoxConstraint:
    lower: np.ndarray
    upper: np.ndarray
    theta_diag: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        th = np.atleast_1d(np.asarray(self.theta_diag, dtype=float))
        if not (lo.shape == hi.shape == th.shape) or lo.ndim != 1:
            raise ValueError("lower, upper and theta_diag must be equal-length vectors")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("box bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError("each lower bound must be below its upper bound")
        if np.any(th <= 0):
            raise ValueError("theta_diag entries must be positive")
        for name, v in (("lower", lo), ("upper", hi), ("theta_diag", th)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def p(self) -> int:
        return self.lower.shape[0]


@dataclass(frozen=True)
class EigenSolution1D:
    """Ground state on a grid of the scaled coordinate, endpoints included."""

    grid: np.ndarray
    u_values: np.ndarray
    mu: float
    ode_residual: float
    normalization_error: float
    lam: float = 0.0
    theta: float = 1.0

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def potential(self, s) -> np.ndarray:
        return self.lam / (4.0 * self.theta) * np.asarray(s) ** 2

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "u"])
            for s, u in zip(self.grid, self.u_values):
                w.writerow([repr(float(s)), repr(float(u))])


def _tridiagonal(lam, theta, lower, upper, grid_points):
    grid = np.linspace(lower, upper, grid_points)
    h = grid[1] - grid[0]
    inner = grid[1:-1]
    diag = 2.0 / h**2 + lam / (4.0 * theta) * inner**2
    off = np.full(inner.size - 1, -1.0 / h**2)
    return grid, h, diag, off


def _ground_pair(lam, theta, lower, upper, grid_points):
    grid, h, diag, off = _tridiagonal(lam, theta, lower, upper, grid_points)
    evals, evecs = eigh_tridiagonal(diag, off, select="i", select_range=(0, 0), lapack_driver="stebz")
    return grid, h, diag, off, float(evals[0]), evecs[:, 0]


def solve_ground_state(
    lam: float,
    theta: float,
    lower: float,
    upper: float,
    grid_points: int = 1025,
    tolerance: Optional[float] = None,
) -> EigenSolution1D:
    """Smallest eigenpair of -u'' + (lam/(4 theta)) s^2 u on [lower, upper], u = 0 at the ends.

    ``lower``/``upper`` are in the coordinate of the equation. When
    ``tolerance`` is given the eigenvalue's discretization error is estimated
    by comparison with the half-resolution grid and the solve is refused if
    it exceeds the target.
    """
    if not lam >= 0 or not math.isfinite(lam):
        raise ValueError("lambda must be finite and nonnegative")
    if not theta > 0:
        raise ValueError("theta must be positive")
    if not lower < upper:
        raise ValueError("lower must be below upper")
    grid_points = int(grid_points)
    if grid_points < MIN_GRID:
        raise ValueError(f"need at least {MIN_GRID} grid points")
    grid, h, diag, off, mu, v = _ground_pair(lam, theta, lower, upper, grid_points)
    if mu <= 0:
        raise EigenSolverError("computed ground eigenvalue is not positive", mu)
    v = v if v.sum() >= 0 else -v
    if np.any(v <= 0):
        raise EigenSolverError("ground state has interior sign changes", float(v.min()))
    u = np.concatenate(([0.0], v, [0.0]))
    u /= math.sqrt(h * np.sum(u * u))
    norm_err = float(abs(h * np.sum(u * u) - 1.0))
    lap = (u[2:] - 2 * u[1:-1] + u[:-2]) / h**2
    residual = float(np.max(np.abs(lap + (mu - lam / (4 * theta) * grid[1:-1] ** 2) * u[1:-1])))
    if tolerance is not None:
        coarse = (grid_points + 1) // 2
        if coarse >= 8:
            mu_coarse = _ground_pair(lam, theta, lower, upper, coarse)[4]
            ratio = ((grid_points - 1) / (coarse - 1)) ** 2
            estimate = float(abs(mu - mu_coarse) / (ratio - 1.0))
            if estimate > tolerance:
                raise EigenSolverError("grid too coarse for the requested eigenvalue tolerance", estimate)
    return EigenSolution1D(
        grid=grid,
        u_values=u,
        mu=mu,
        ode_residual=residual,
        normalization_error=norm_err,
        lam=float(lam),
        theta=float(theta),
    )


def verify_fixed_point(solution: EigenSolution1D) -> float:
    """Re-solve the discrete equation with mu held fixed and compare.

    Shoots from each boundary toward the peak (stable in both the classically
    allowed and forbidden regions), splices, renormalizes and returns the
    sup-norm distance to the stored ground state.
    """
    s, u_ref, mu = solution.grid, solution.u_values, solution.mu
    h = solution.spacing
    coef = 2.0 + h * h * (solution.potential(s) - mu)
    n = s.size
    k = int(np.argmax(u_ref))
    left = np.zeros(n)
    left[1] = 1.0
    for i in range(1, k):
        left[i + 1] = coef[i] * left[i] - left[i - 1]
    right = np.zeros(n)
    right[n - 2] = 1.0
    for i in range(n - 2, k, -1):
        right[i - 1] = coef[i] * right[i] - right[i + 1]
    out = np.empty(n)
    out[: k + 1] = left[: k + 1] / left[k]
    out[k:] = right[k:] / right[k]
    out /= math.sqrt(h * np.sum(out * out))
    return float(np.max(np.abs(out - u_ref)))


class EigenDensity1D(Density1D):
    """sqrt(theta) u(sqrt(theta) n)^2 on [lower, upper] in the original coordinate."""

    def __init__(self, solution: EigenSolution1D):
        self.solution = solution
        self.root = math.sqrt(solution.theta)
        self.lower = float(solution.grid[0] / self.root)
        self.upper = float(solution.grid[-1] / self.root)
        self._spline = CubicSpline(solution.grid, solution.u_values)
        self._nodes = solution.grid / self.root
        dens = self.root * solution.u_values**2
        h = self._nodes[1] - self._nodes[0]
        cdf = np.concatenate(([0.0], np.cumsum(0.5 * h * (dens[1:] + dens[:-1]))))
        self._dens = dens
        self._cdf = cdf / cdf[-1]

    def breakpoints(self):
        return []

    def _inside(self, n):
        return (n > self.lower) & (n < self.upper)

    def pdf(self, n):
        n = np.asarray(n, dtype=float)
        u = self._spline(np.clip(n, self.lower, self.upper) * self.root)
        return np.where(self._inside(n), self.root * u * u, 0.0)

    def score(self, n):
        n = np.asarray(n, dtype=float)
        s = np.clip(n, self.lower, self.upper) * self.root
        u = self._spline(s)
        du = self._spline(s, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self._inside(n), 2.0 * self.root * du / u, 0.0)

    def fisher(self):
        """theta * 4 * integral u'(s)^2 ds.

        The spline derivative is piecewise quadratic, so 3-point Gauss-Legendre
        per cell integrates its square exactly; the reported error is the gap
        to the finite-difference value of the same integral.
        """
        sol = self.solution
        s = sol.grid
        nodes, weights = np.polynomial.legendre.leggauss(3)
        mid = 0.5 * (s[1:] + s[:-1])
        half = 0.5 * (s[1:] - s[:-1])
        pts = mid[:, None] + half[:, None] * nodes[None, :]
        du = self._spline(pts, 1)
        spline_val = float(np.sum(half[:, None] * weights[None, :] * du * du))
        fd_val = float(np.sum(np.diff(sol.u_values) ** 2) / sol.spacing)
        scale = 4.0 * sol.theta
        return scale * spline_val, scale * abs(spline_val - fd_val)

    def ppf(self, u):
        """Inverse CDF of the piecewise-linear density interpolant, strictly inside the box."""
        u = np.asarray(u, dtype=float)
        idx = np.clip(np.searchsorted(self._cdf, u, side="right") - 1, 0, self._cdf.size - 2)
        x0 = self._nodes[idx]
        h = self._nodes[1] - self._nodes[0]
        f0 = self._dens[idx]
        slope = (self._dens[idx + 1] - f0) / h
        need = (u - self._cdf[idx]) * self._total
        # solve f0 t + slope t^2 / 2 = need for t in [0, h]
        disc = np.sqrt(np.maximum(f0 * f0 + 2.0 * slope * need, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(slope) > 1e-300, 2.0 * need / (f0 + disc), need / f0)
        t = np.where(np.isfinite(t), t, 0.5 * h)
        x = x0 + np.clip(t, 0.0, h)
        lo = np.nextafter(self.lower, self.upper)
        hi = np.nextafter(self.upper, self.lower)
        return np.clip(x, lo, hi)

    @property
    def _total(self):
        h = self._nodes[1] - self._nodes[0]
        return float(np.sum(0.5 * h * (self._dens[1:] + self._dens[:-1])))

    def cdf(self, n):
        """CDF of the piecewise-linear interpolant used by the sampler."""
        n = np.clip(np.asarray(n, dtype=float), self.lower, self.upper)
        idx = np.clip(np.searchsorted(self._nodes, n, side="right") - 1, 0, self._nodes.size - 2)
        h = self._nodes[1] - self._nodes[0]
        t = n - self._nodes[idx]
        f0 = self._dens[idx]
        slope = (self._dens[idx + 1] - f0) / h
        return self._cdf[idx] + (f0 * t + 0.5 * slope * t * t) / self._total

    def mean(self):
        return self._moment(1)

    def second_moment(self):
        return self._moment(2)

    def _moment(self, k):
        return float(simpson(self._nodes**k * self._dens, x=self._nodes))


class ConstrainedMechanism(ProductMechanism):
    kind = "constrained"

    def __init__(self, constraint: BoxConstraint, lam: float, solutions):
        super().__init__([EigenDensity1D(s) for s in solutions])
        self.constraint = constraint
        self.lam = float(lam)
        self.solutions = tuple(solutions)

    def fisher_information(self) -> FisherInfo:
        vals, errs = zip(*(f.fisher() for f in self.factors))
        return FisherInfo(np.diag(vals), quadrature_error=float(sum(errs)))

    def objective(self) -> float:
        """Weighted Fisher trace plus lam times total variance, equal to 4 * sum(mu)
        up to discretization error."""
        info = np.diag(self.fisher_information().matrix)
        var = np.diag(self.second_moment())
        return float(np.sum(info / self.constraint.theta_diag) + self.lam * np.sum(var))

    def mass(self, lower, upper) -> float:
        """Probability of the product rectangle [lower, upper]."""
        out = 1.0
        for f, a, b in zip(self.factors, np.atleast_1d(lower), np.atleast_1d(upper)):
            out *= float(f.cdf(b) - f.cdf(a))
        return out

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "lambda": self.lam,
            "lower": self.constraint.lower.tolist(),
            "upper": self.constraint.upper.tolist(),
            "theta_diag": self.constraint.theta_diag.tolist(),
            "grid_points": int(self.solutions[0].grid.size),
            "mu": [s.mu for s in self.solutions],
            "ode_residual": [s.ode_residual for s in self.solutions],
        }


def constrained_mechanism(constraint: BoxConstraint, lam: float, grid_points: int = 1025) -> ConstrainedMechanism:
    sols = []
    for lo, hi, th in zip(constraint.lower, constraint.upper, constraint.theta_diag):
        r = math.sqrt(th)
        sols.append(solve_ground_state(lam, th, lo * r, hi * r, grid_points))
    return ConstrainedMechanism(constraint, lam, sols)


def sample_constrained(mechanism: ConstrainedMechanism, count: int, stream: RandomStream) -> np.ndarray:
    if int(count) < 1:
        raise ValueError("count must be positive")
    return mechanism.sample(int(count), stream)
