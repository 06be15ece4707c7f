"""Correlated noise that leaves a trained SVM unchanged.

A perturbation w of the stacked features keeps the KKT point of the training
problem intact when it preserves sum_i omega_i y_i x_i and every margin
alpha' x_i. Those linear conditions form the operator

    Omega = [ (omega * y)' kron I_p ;  I_q kron alpha' ]

and the released noise is an isotropic Gaussian on null(Omega). This is a
curator-side mechanism: Omega needs the model trained on the original data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .core import Dataset, RandomStream, ScalingMatrix
from .privacy import PrivacyCertificate
from .svm import SvmSolution

RANK_RTOL = 1e-10
MAX_DENSE_BASIS = 6000


class TrivialNullSpaceError(ValueError):
    pass


def invariance_matrix(omega, labels, alpha) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    alpha = np.asarray(alpha, dtype=float).ravel()
    if omega.shape != labels.shape:
        raise ValueError("omega and labels must have the same length")
    q, p = omega.size, alpha.size
    top = np.kron((omega * labels)[None, :], np.eye(p))
    bottom = np.kron(np.eye(q), alpha[None, :])
    return np.vstack([top, bottom])


@dataclass(frozen=True)
class InvarianceOperator:
    """Omega together with an orthonormal basis of its row space.

    The null-space basis ``psi`` is the orthogonal complement of
    ``row_basis``; it is formed on demand because it has qp rows and
    qp - rank columns.
    """

    omega: np.ndarray
    rank: int
    row_basis: np.ndarray
    q: int
    p: int

    @property
    def d(self) -> int:
        return self.q * self.p - self.rank

    @property
    def psi(self) -> np.ndarray:
        n = self.q * self.p
        if n > MAX_DENSE_BASIS:
            raise MemoryError(f"dense null-space basis would be {n} x {self.d}; use project() instead")
        if self.rank == 0:
            return np.eye(n)
        full, _ = scipy.linalg.qr(self.row_basis, mode="full")
        return full[:, self.rank :]

    def project(self, v) -> np.ndarray:
        """Orthogonal projection onto null(Omega), applied to vectors or row-stacked batches."""
        v = np.asarray(v, dtype=float)
        return v - (v @ self.row_basis) @ self.row_basis.T

    def block_traces(self, weight: Optional[np.ndarray] = None) -> np.ndarray:
        """Tr(W P_ii) for each row block P_ii of the null-space projector."""
        w = np.eye(self.p) if weight is None else np.asarray(weight, dtype=float)
        blocks = self.row_basis.reshape(self.q, self.p, self.rank)
        return np.trace(w) - np.einsum("ijr,jk,ikr->i", blocks, w, blocks)


def operator_from_kkt(omega, labels, alpha) -> InvarianceOperator:
    mat = invariance_matrix(omega, labels, alpha)
    q, p = np.size(omega), np.size(alpha)
    _, sv, vt = scipy.linalg.svd(mat, full_matrices=False, lapack_driver="gesdd")
    smax = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > RANK_RTOL * smax)) if smax > 0 else 0
    if rank == q * p:
        raise TrivialNullSpaceError(
            "the invariance operator has a trivial null space; use more rows or fewer features"
        )
    return InvarianceOperator(omega=mat, rank=rank, row_basis=vt[:rank].T.copy(), q=q, p=p)


def build_invariance_operator(solution: SvmSolution, data: Dataset) -> InvarianceOperator:
    if solution.omega.size != data.q or solution.alpha.size != data.p:
        raise ValueError("solution dimensions do not match the dataset")
    if not solution.kkt_residual <= 1e-6:
        raise ValueError(f"solution KKT residual {solution.kkt_residual:.3g} exceeds 1e-6")
    return operator_from_kkt(solution.omega, data.labels, solution.alpha)


class CorrelatedMechanism:
    """Gaussian w with covariance m * Psi Psi' (variance cap m on null(Omega))."""

    kind = "correlated"

    def __init__(self, operator: InvarianceOperator, m: float):
        if not m >= 0 or not math.isfinite(m):
            raise ValueError("variance cap m must be finite and nonnegative")
        self.operator = operator
        self.m = float(m)

    @property
    def covariance_implied(self) -> np.ndarray:
        psi = self.operator.psi
        return self.m * psi @ psi.T

    def sample(self, stream: RandomStream, count: Optional[int] = None) -> np.ndarray:
        """w = Psi wbar with wbar ~ N(0, m I_d).

        Drawn as sqrt(m) P g with g standard normal and P = Psi Psi' the
        projector, which is the same vector with wbar = sqrt(m) Psi' g.
        """
        n = self.operator.q * self.operator.p
        shape = (n,) if count is None else (int(count), n)
        if self.m == 0.0:
            return np.zeros(shape)
        g = stream.generator().standard_normal(shape)
        return math.sqrt(self.m) * self.operator.project(g)

    def certificate(self, scaling: Optional[ScalingMatrix] = None) -> PrivacyCertificate:
        op = self.operator
        scaling = scaling or ScalingMatrix.identity(op.p)
        inv_traces = op.block_traces(scaling.inverse())
        den = float(np.sum(inv_traces))
        weak = self.m / den if den > 0 else math.inf
        row = self.m * float(np.min(op.block_traces(scaling.pi)))
        return PrivacyCertificate(
            crb_floor=math.inf,
            weak_floor=weak,
            row_floor=row,
            flags=["singular-information"],
        )

    def describe(self) -> dict:
        op = self.operator
        return {"kind": self.kind, "m": self.m, "rank": op.rank, "d": op.d, "q": op.q, "p": op.p}


def sample_correlated(mechanism: CorrelatedMechanism, stream: RandomStream) -> np.ndarray:
    return mechanism.sample(stream)


def correlated_obfuscate(
    data: Dataset,
    solution: SvmSolution,
    m: float,
    stream: RandomStream,
    scaling: Optional[ScalingMatrix] = None,
):
    """Release x + w with w on null(Omega); returns (dataset, certificate).

    The certificate carries the trace floor m / Tr((I kron Pi^-1) Psi Psi') as
    ``weak_floor`` and the per-row floor m * min_i Tr(Pi P_ii) as ``row_floor``.
    """
    op = build_invariance_operator(solution, data)
    mech = CorrelatedMechanism(op, m)
    w = mech.sample(stream)
    released = data.with_features(data.features + w.reshape(data.q, data.p))
    return released, mech.certificate(scaling)
