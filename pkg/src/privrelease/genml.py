"""Learners trained on released data, and utility certificates.

A utility certificate bounds how far the learned parameters move when the
features are perturbed by noise with second moment V:

    P{ ||phi(noisy) - phi|| <= eps } >= 1 - K c^2 Tr(V) / eps^2

with K = q when c is a Lipschitz constant against the Frobenius norm of the
feature perturbation (``svm_q``) and K = q^2 when it is a constant against the
sum of per-row norms (``general_q_squared``). The constant c is existential
in theory; here it is estimated from random perturbations and inflated by a
safety factor, so the certificate is an estimate, not a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .core import Dataset, RandomStream
from .svm import SvmConfig, slack, train_svm

SAFETY_FACTOR = 1.5
MAX_CONDITION = 1e12
MIN_TRIALS = 30
BOUND_KINDS = ("svm_q", "general_q_squared")


class SensitivityError(RuntimeError):
    pass


@runtime_checkable
class Learner(Protocol):
    bound_kind: str

    def fit(self, data: Dataset) -> np.ndarray: ...

    def loss(self, phi: np.ndarray, data: Dataset) -> float: ...


def fit_ridge(data: Dataset, sigma: float) -> np.ndarray:
    """argmin sigma phi'phi + sum_i (y_i - phi'x_i)^2 / q, in closed form."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    X, y = data.features, data.labels
    A = sigma * data.q * np.eye(data.p) + X.T @ X
    return np.linalg.solve(A, X.T @ y)


@dataclass(frozen=True)
class RidgeLearner:
    sigma: float = 1e-5
    bound_kind: str = "general_q_squared"

    def fit(self, data: Dataset) -> np.ndarray:
        return fit_ridge(data, self.sigma)

    def loss(self, phi, data: Dataset) -> float:
        r = data.labels - data.features @ phi
        return float(self.sigma * phi @ phi + r @ r / data.q)

    def gradient(self, phi, data: Dataset) -> np.ndarray:
        r = data.labels - data.features @ phi
        return 2.0 * self.sigma * phi - 2.0 / data.q * data.features.T @ r

    def hessian(self, phi, data: Dataset) -> np.ndarray:
        return 2.0 * self.sigma * np.eye(data.p) + 2.0 / data.q * data.features.T @ data.features

    def sensitivity_bound(self, data: Dataset) -> float:
        """max_i ||d phi / d x_i||_2 at the fit, from implicit differentiation."""
        phi = self.fit(data)
        A = self.sigma * data.q * np.eye(data.p) + data.features.T @ data.features
        Ainv = np.linalg.inv(A)
        best = 0.0
        for x, y in zip(data.features, data.labels):
            J = Ainv @ ((x @ phi - y) * np.eye(data.p) + np.outer(x, phi))
            best = max(best, float(np.linalg.norm(J, 2)))
        return best


@dataclass(frozen=True)
class SvmLearner:
    """Soft-margin SVM with parameters phi = (alpha, beta, xi)."""

    config: SvmConfig = field(default_factory=SvmConfig)
    bound_kind: str = "svm_q"

    def fit(self, data: Dataset) -> np.ndarray:
        return train_svm(data, self.config).vector()

    def loss(self, phi, data: Dataset) -> float:
        alpha, beta = np.asarray(phi[: data.p]), float(phi[data.p])
        xi = slack(data, alpha, beta)
        c = self.config
        return float(0.5 * alpha @ alpha + 0.5 * c.rho * (beta**2 + xi @ xi) + c.theta * xi.sum())

    def hessian(self, phi, data: Dataset) -> np.ndarray:
        """Hessian in (alpha, beta) of the slack-eliminated objective, away from kinks."""
        alpha, beta = np.asarray(phi[: data.p]), float(phi[data.p])
        Z = data.labels[:, None] * np.column_stack([data.features, np.ones(data.q)])
        active = slack(data, alpha, beta) > 0
        H = np.diag(np.r_[np.ones(data.p), self.config.rho])
        return H + self.config.rho * Z[active].T @ Z[active]


def _denominator(kind: str, delta: np.ndarray) -> float:
    if kind == "svm_q":
        return float(np.linalg.norm(delta))
    return float(np.linalg.norm(delta, axis=1).sum())


@dataclass
class UtilityCertificate:
    c_estimate: float
    epsilon_0_estimate: float
    bound_kind: str
    q: int
    raw_ratio: float = 0.0
    trials: int = 0

    def __post_init__(self):
        if self.bound_kind not in BOUND_KINDS:
            raise ValueError(f"bound_kind must be one of {BOUND_KINDS}")
        if not self.c_estimate >= 1:
            raise ValueError("c_estimate must be at least 1")

    def probability_floor(self, trace_v: float, epsilon: float) -> float:
        if trace_v < 0:
            raise ValueError("Tr(V) must be nonnegative")
        k = self.q if self.bound_kind == "svm_q" else self.q**2
        return float(min(1.0, max(0.0, 1.0 - k * self.c_estimate**2 * trace_v / epsilon**2)))

    def to_dict(self) -> dict:
        return {
            "c_estimate": self.c_estimate,
            "epsilon_0_estimate": self.epsilon_0_estimate,
            "bound_kind": self.bound_kind,
            "q": self.q,
            "raw_ratio": self.raw_ratio,
            "trials": self.trials,
            "safety_factor": SAFETY_FACTOR,
        }


def estimate_sensitivity(
    learner,
    data: Dataset,
    trials: int,
    perturbation_scale: float,
    stream: RandomStream,
    levels: int = 6,
) -> UtilityCertificate:
    """Empirical Lipschitz constant of fit(.) around ``data``.

    Each trial draws a random perturbation direction and refits at
    magnitudes perturbation_scale * 2^-k, k = 0..levels-1. The ratio
    ||d phi|| / ||d X|| at the smallest magnitude is the local slope; a
    magnitude is stable when its ratio stays within 2x of that slope.
    c is the largest ratio seen over stable magnitudes, times the safety
    factor, floored at 1. The validity radius (in parameter space) is c
    times the largest magnitude that was stable in every trial.
    """
    if int(trials) < MIN_TRIALS:
        raise ValueError(f"need at least {MIN_TRIALS} trials")
    if not perturbation_scale > 0:
        raise ValueError("perturbation_scale must be positive")
    kind = learner.bound_kind
    phi = np.asarray(learner.fit(data))
    hess = getattr(learner, "hessian", None)
    if hess is not None:
        cond = np.linalg.cond(hess(phi, data))
        if not cond <= MAX_CONDITION:
            raise SensitivityError(f"Hessian at the fit is ill-conditioned (condition number {cond:.3g})")
    mags = perturbation_scale * 2.0 ** -np.arange(levels)[::-1]
    ratio_max = 0.0
    stable_mag = math.inf
    for t in range(int(trials)):
        g = stream.fork(t).generator().standard_normal((data.q, data.p))
        g /= _denominator(kind, g)
        ratios = []
        for s in mags:
            moved = np.asarray(learner.fit(data.with_features(data.features + s * g)))
            ratios.append(np.linalg.norm(moved - phi) / s)
        ratios = np.array(ratios)
        base = ratios[0]
        ok = (ratios <= 2 * base) & (ratios >= 0.5 * base) if base > 0 else ratios == 0
        # largest magnitude up to which every level was stable
        n_ok = int(np.argmin(ok)) if not ok.all() else ok.size
        stable_mag = min(stable_mag, mags[n_ok - 1] if n_ok else 0.0)
        ratio_max = max(ratio_max, float(ratios[:max(n_ok, 1)].max()))
    c = max(1.0, SAFETY_FACTOR * ratio_max)
    if stable_mag <= 0:
        raise SensitivityError("no perturbation magnitude gave a stable ratio; lower perturbation_scale")
    return UtilityCertificate(
        c_estimate=c,
        epsilon_0_estimate=c * stable_mag,
        bound_kind=kind,
        q=data.q,
        raw_ratio=ratio_max,
        trials=int(trials),
    )


def utility_floor(certificate: UtilityCertificate, mechanism, epsilon: float, q: Optional[int] = None) -> float:
    """Lower bound on P{ ||d phi|| <= epsilon } under the mechanism's noise."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if epsilon >= certificate.epsilon_0_estimate:
        raise ValueError(
            f"epsilon {epsilon} is outside the estimated validity radius {certificate.epsilon_0_estimate:.3g}"
        )
    if q is not None and q != certificate.q:
        certificate = UtilityCertificate(
            certificate.c_estimate, certificate.epsilon_0_estimate, certificate.bound_kind, q
        )
    trace_v = float(np.trace(mechanism.second_moment()))
    return certificate.probability_floor(trace_v, epsilon)
