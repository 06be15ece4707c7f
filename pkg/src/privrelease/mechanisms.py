"""I.i.d. additive noise: the optimal Gaussian for the privacy/variance trade-off
and a Laplace baseline calibrated to the same Cramer-Rao floor."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy import special

from .core import Dataset, RandomStream, ScalingMatrix
from .densities import Laplace1D, ProductMechanism
from .privacy import FisherInfo

LAMBDA_CAP = 1e12


class GaussianMechanism:
    """Zero-mean Gaussian noise with an SPD covariance."""

    kind = "gaussian"

    def __init__(self, covariance, lam: Optional[float] = None, scaling: Optional[ScalingMatrix] = None, information=None):
        cov = ScalingMatrix(covariance)  # reuses the SPD validation and eigendecomposition
        self._cov = cov
        self.covariance = cov.pi
        self.lam = lam
        self.scaling = scaling
        self._information = None if information is None else np.asarray(information, dtype=float)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def fisher_information(self) -> FisherInfo:
        if self._information is not None:
            return FisherInfo(self._information)
        return FisherInfo(self._cov.inverse())

    def second_moment(self) -> np.ndarray:
        return self.covariance.copy()

    def root(self) -> np.ndarray:
        """Symmetric square root of the covariance."""
        return self._cov.sqrt()

    def pdf(self, n) -> np.ndarray:
        n = np.atleast_2d(n)
        inv = self._cov.inverse()
        quad = np.einsum("ij,jk,ik->i", n, inv, n)
        logdet = np.sum(np.log(self._cov.eigenvalues))
        return np.exp(-0.5 * quad - 0.5 * (self.dim * math.log(2 * math.pi) + logdet))

    def sample(self, count: int, stream: RandomStream) -> np.ndarray:
        z = special.ndtri(stream.uniform_open((int(count), self.dim)))
        return z @ self.root()

    def describe(self) -> dict:
        out = {"kind": self.kind, "covariance": self.covariance.tolist()}
        if self.lam is not None:
            out["lambda"] = float(self.lam)
        return out


class LaplaceMechanism(ProductMechanism):
    """Independent Laplace noise with per-coordinate scales."""

    kind = "laplace"

    def __init__(self, scales, flags=()):
        scales = np.asarray(scales, dtype=float).ravel()
        if scales.size == 0 or not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise ValueError("Laplace scales must be finite and positive")
        super().__init__([Laplace1D(b) for b in scales])
        self.scales = scales
        self.flags = tuple(flags)

    def fisher_information(self) -> FisherInfo:
        return FisherInfo(np.diag(self.scales**-2.0), flags=("analytic-limit",) + self.flags)

    def second_moment(self) -> np.ndarray:
        return np.diag(2.0 * self.scales**2)

    def sample(self, count: int, stream: RandomStream) -> np.ndarray:
        u = stream.uniform_open((int(count), self.dim))
        # inverse CDF of the unit Laplace; same uniforms as the Gaussian sampler
        t = u - 0.5
        return -np.sign(t) * np.log1p(-2.0 * np.abs(t)) * self.scales

    def describe(self) -> dict:
        return {"kind": self.kind, "scales": self.scales.tolist(), "flags": list(self.flags)}


def optimal_iid_mechanism(lam: float, scaling: ScalingMatrix) -> GaussianMechanism:
    """Minimizer of Tr(Pi^-1 I) + lam Tr(V): Gaussian with covariance Pi^(-1/2)/sqrt(lam)."""
    if not lam > 0 or not math.isfinite(lam):
        raise ValueError("lambda must be positive and finite")
    lam = min(float(lam), LAMBDA_CAP)
    root_lam = math.sqrt(lam)
    return GaussianMechanism(
        scaling.inv_sqrt() / root_lam,
        lam=lam,
        scaling=scaling,
        information=root_lam * scaling.sqrt(),
    )


def sample_iid(mechanism, count: int, stream: RandomStream) -> np.ndarray:
    if int(count) < 1:
        raise ValueError("count must be positive")
    return mechanism.sample(int(count), stream)


def p_lambda_objective(density, lam: float, scaling: ScalingMatrix) -> float:
    """Tr(Pi^-1 I) + lam Tr(V_nn) for any mechanism exposing both."""
    info = density.fisher_information().matrix
    if info.shape != scaling.pi.shape:
        raise ValueError(f"mechanism has dimension {info.shape[0]}, scaling matrix {scaling.p}")
    return float(np.trace(scaling.inverse() @ info) + lam * np.trace(density.second_moment()))


def matched_laplace_baseline(mechanism: GaussianMechanism, scaling: Optional[ScalingMatrix] = None) -> LaplaceMechanism:
    """Laplace noise whose Cramer-Rao floor Tr(Pi diag(b^2)) equals the Gaussian's Tr(Pi Sigma).

    With diagonal Pi each coordinate is matched (b_j^2 = Sigma_jj); otherwise a
    single scale b^2 = Tr(Pi Sigma)/Tr(Pi) is used and the result is flagged.
    """
    scaling = scaling or mechanism.scaling or ScalingMatrix.identity(mechanism.dim)
    if scaling.p != mechanism.dim:
        raise ValueError("scaling matrix and mechanism dimensions differ")
    sigma = mechanism.covariance
    if scaling.is_diagonal:
        return LaplaceMechanism(np.sqrt(np.diag(sigma)))
    b2 = np.trace(scaling.pi @ sigma) / np.trace(scaling.pi)
    return LaplaceMechanism(np.full(mechanism.dim, math.sqrt(b2)), flags=("trace-matched",))


def obfuscate(data: Dataset, mechanism, stream: RandomStream) -> Dataset:
    """Release x_i + n_i for every row; labels are passed through untouched."""
    if mechanism.dim != data.p:
        raise ValueError(f"mechanism has dimension {mechanism.dim}, data has {data.p} features")
    noise = sample_iid(mechanism, data.q, stream)
    return Dataset(data.features + noise, data.labels, data.feature_names)
