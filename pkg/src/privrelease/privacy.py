"""Fisher information, Cramer-Rao privacy floors and (epsilon, delta) certification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ScalingMatrix, induced_inf_to_2_norm


@dataclass(frozen=True)
class FisherInfo:
    matrix: np.ndarray
    quadrature_error: float = 0.0
    flags: tuple = ()

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ValueError("Fisher information must be square")
        if np.abs(m - m.T).max(initial=0.0) > 1e-9 * max(1.0, np.abs(m).max()):
            raise ValueError("Fisher information must be symmetric")
        m = 0.5 * (m + m.T)
        if np.linalg.eigvalsh(m)[0] < -1e-10 * max(1.0, np.abs(m).max()):
            raise ValueError("Fisher information must be positive semidefinite")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass
class PrivacyCertificate:
    """Privacy floors attached to a release.

    ``crb_floor`` is Tr(Pi I^-1), the Cramer-Rao floor on E[e' Pi e] for any
    unbiased reconstruction error e of one row; ``weak_floor`` is
    1/Tr(Pi^-1 I), which never exceeds it.
    """

    crb_floor: float
    weak_floor: float
    dp_pairs: list = field(default_factory=list)
    adversary_floors: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    row_floor: Optional[float] = None

    def to_dict(self) -> dict:
        out = {
            "crb_floor": _num(self.crb_floor),
            "weak_floor": _num(self.weak_floor),
        }
        if self.row_floor is not None:
            out["row_floor"] = _num(self.row_floor)
        out["dp_pairs"] = [{"epsilon": _num(e), "delta": _num(d)} for e, d in self.dp_pairs]
        out["adversary_floors"] = [_num(v) for v in self.adversary_floors]
        out["flags"] = list(self.flags)
        return out


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def fisher_information(mechanism) -> FisherInfo:
    """Fisher information of a noise mechanism's density.

    Gaussian mechanisms return the inverse covariance exactly; product-form
    densities integrate each factor by adaptive quadrature.
    """
    try:
        compute = mechanism.fisher_information
    except AttributeError:
        raise TypeError(f"{type(mechanism).__name__} does not expose a Fisher information") from None
    return compute()


def crb_bounds(info: FisherInfo, scaling: ScalingMatrix) -> PrivacyCertificate:
    I = info.matrix
    if I.shape != scaling.pi.shape:
        raise ValueError(f"Fisher information is {I.shape}, scaling matrix is {scaling.pi.shape}")
    weak_den = float(np.trace(scaling.inverse() @ I))
    weak = 1.0 / weak_den if weak_den > 0 else math.inf
    evals = np.linalg.eigvalsh(I)
    if evals[0] <= 1e-14 * max(1.0, evals[-1]):
        crb = math.inf
    else:
        crb = float(np.trace(scaling.pi @ np.linalg.inv(I)))
    return PrivacyCertificate(crb_floor=crb, weak_floor=weak, flags=list(info.flags))


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def dp_certify(lam: float, scaling: ScalingMatrix, delta: float) -> float:
    """Smallest epsilon certified for the optimal Gaussian at this trade-off weight.

    eps_min = lam^(1/4) ||Pi^(1/4)||_{inf,2} (1 + sqrt(2 ln(1/delta))).
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    _check_delta(delta)
    norm = induced_inf_to_2_norm(scaling.quarter())
    return lam**0.25 * norm * (1.0 + math.sqrt(2.0 * math.log(1.0 / delta)))


def adversary_floor(epsilon: float, delta: float, scaling: ScalingMatrix) -> float:
    """Reconstruction-error floor implied by an (epsilon, delta) Gaussian release.

    Tr(Pi^(1/2)) ||Pi^(1/4)||^2_{inf,2} (1 + sqrt(2 ln(1/delta)))^2 / epsilon^2
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    _check_delta(delta)
    norm = induced_inf_to_2_norm(scaling.quarter())
    tail = 1.0 + math.sqrt(2.0 * math.log(1.0 / delta))
    return float(np.trace(scaling.sqrt())) * norm**2 * tail**2 / epsilon**2


def certify_gaussian(lam: float, scaling: ScalingMatrix, deltas: Sequence[float] = ()) -> PrivacyCertificate:
    """Floors plus one certified (epsilon, delta) pair per requested delta."""
    info = FisherInfo(np.sqrt(lam) * scaling.sqrt())
    cert = crb_bounds(info, scaling)
    for delta in deltas:
        eps = dp_certify(lam, scaling, delta)
        cert.dp_pairs.append((eps, float(delta)))
        cert.adversary_floors.append(adversary_floor(eps, delta, scaling))
    return cert
