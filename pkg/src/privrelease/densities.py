"""One-dimensional noise densities and product-form mechanisms built from them.

Each factor knows its pdf, score (d/dn log pdf) and inverse CDF; Fisher
information and second moments are integrated by adaptive quadrature so the
same code path covers factors with no closed form.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import integrate, stats

from .core import RandomStream
from .privacy import FisherInfo

NORMALIZATION_TOL = 1e-6
QUAD_TOL = 1e-8


class QuadratureError(RuntimeError):
    def __init__(self, message, achieved):
        super().__init__(f"{message} (achieved error estimate {achieved:.3g})")
        self.achieved = achieved


class Density1D:
    """Base class for a smooth zero-location density on an interval."""

    lower = -math.inf
    upper = math.inf
    flags: tuple = ()

    def pdf(self, n):
        raise NotImplementedError

    def score(self, n):
        raise NotImplementedError

    def ppf(self, u):
        raise NotImplementedError

    def breakpoints(self) -> list:
        return [0.0]

    def _integrate(self, f):
        pieces = [self.lower, *[b for b in self.breakpoints() if self.lower < b < self.upper], self.upper]
        total, err = 0.0, 0.0
        for a, b in zip(pieces[:-1], pieces[1:]):
            val, e = integrate.quad(f, a, b, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
            total += val
            err += e
        return total, err

    def check_normalized(self):
        mass, err = self._integrate(self.pdf)
        if abs(mass - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"{type(self).__name__} integrates to {mass:.9g}, not 1")
        return mass, err

    def fisher_quadrature(self):
        """(integral of pdf * score^2, error estimate)."""
        self.check_normalized()
        val, err = self._integrate(lambda n: self.pdf(n) * self.score(n) ** 2)
        if not math.isfinite(val) or err > 1e-6 * max(1.0, abs(val)):
            raise QuadratureError(f"Fisher quadrature failed for {type(self).__name__}", err)
        return val, err

    def fisher(self):
        return self.fisher_quadrature()

    def mean(self) -> float:
        return self._integrate(lambda n: n * self.pdf(n))[0]

    def second_moment(self) -> float:
        return self._integrate(lambda n: n * n * self.pdf(n))[0]


class Gaussian1D(Density1D):
    def __init__(self, std: float):
        if not std > 0:
            raise ValueError("std must be positive")
        self.std = float(std)

    def pdf(self, n):
        return stats.norm.pdf(n, scale=self.std)

    def score(self, n):
        return -np.asarray(n) / self.std**2

    def ppf(self, u):
        return stats.norm.ppf(u, scale=self.std)

    def second_moment(self):
        return self.std**2


class Logistic1D(Density1D):
    def __init__(self, scale: float):
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)

    def pdf(self, n):
        return stats.logistic.pdf(n, scale=self.scale)

    def score(self, n):
        return -np.tanh(np.asarray(n) / (2 * self.scale)) / self.scale

    def ppf(self, u):
        return stats.logistic.ppf(u, scale=self.scale)

    def second_moment(self):
        return (math.pi * self.scale) ** 2 / 3


class StudentT1D(Density1D):
    def __init__(self, dof: float, scale: float = 1.0):
        if not dof > 2:
            raise ValueError("Student-t needs dof > 2 for a finite second moment")
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.dof = float(dof)
        self.scale = float(scale)

    def pdf(self, n):
        return stats.t.pdf(n, self.dof, scale=self.scale)

    def score(self, n):
        n = np.asarray(n)
        return -(self.dof + 1) * n / (self.dof * self.scale**2 + n * n)

    def ppf(self, u):
        return stats.t.ppf(u, self.dof, scale=self.scale)

    def second_moment(self):
        return self.scale**2 * self.dof / (self.dof - 2)


class Laplace1D(Density1D):
    """Laplace factor. Its pdf has a kink at 0, so the Fisher value 1/b^2 is
    the analytic limit and flagged as such."""

    flags = ("analytic-limit",)

    def __init__(self, scale: float):
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)

    def pdf(self, n):
        return stats.laplace.pdf(n, scale=self.scale)

    def score(self, n):
        return -np.sign(n) / self.scale

    def ppf(self, u):
        return stats.laplace.ppf(u, scale=self.scale)

    def fisher(self):
        return 1.0 / self.scale**2, 0.0

    def second_moment(self):
        return 2.0 * self.scale**2


class ProductMechanism:
    """Noise with independent coordinates, one 1-D factor per feature."""

    kind = "product"

    def __init__(self, factors: Sequence[Density1D]):
        if not factors:
            raise ValueError("need at least one factor")
        self.factors = tuple(factors)

    @property
    def dim(self) -> int:
        return len(self.factors)

    def fisher_information(self) -> FisherInfo:
        vals, errs, flags = [], 0.0, []
        for f in self.factors:
            v, e = f.fisher()
            vals.append(v)
            errs += e
            flags.extend(fl for fl in f.flags if fl not in flags)
        return FisherInfo(np.diag(vals), quadrature_error=errs, flags=tuple(flags))

    def second_moment(self) -> np.ndarray:
        means = np.array([f.mean() for f in self.factors])
        out = np.outer(means, means)
        np.fill_diagonal(out, [f.second_moment() for f in self.factors])
        return out

    def pdf(self, n) -> np.ndarray:
        n = np.atleast_2d(n)
        out = np.ones(n.shape[0])
        for j, f in enumerate(self.factors):
            out = out * f.pdf(n[:, j])
        return out

    def sample(self, count: int, stream: RandomStream) -> np.ndarray:
        u = stream.uniform_open((int(count), self.dim))
        return np.column_stack([f.ppf(u[:, j]) for j, f in enumerate(self.factors)])
