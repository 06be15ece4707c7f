"""scikit-learn compatible wrappers around the solvers and noise mechanisms."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .constrained import BoxConstraint, constrained_mechanism
from .core import Dataset, RandomStream, ScalingMatrix
from .correlated import CorrelatedMechanism, build_invariance_operator
from .genml import fit_ridge
from .mechanisms import matched_laplace_baseline, optimal_iid_mechanism
from .privacy import certify_gaussian, crb_bounds
from .svm import SvmConfig, train_svm


def _as_scaling(scaling, p) -> ScalingMatrix:
    if scaling is None:
        return ScalingMatrix.identity(p)
    if isinstance(scaling, ScalingMatrix):
        s = scaling
    elif isinstance(scaling, str):
        s = ScalingMatrix.from_string(scaling)
    else:
        s = ScalingMatrix(scaling)
    if s.p != p:
        raise ValueError(f"scaling matrix is {s.p}x{s.p}, data has {p} features")
    return s


def _binary_targets(y):
    classes = np.unique(y)
    if classes.size != 2:
        raise ValueError(f"need exactly two classes, got {classes.size}")
    return classes, np.where(y == classes[1], 1.0, -1.0)


class LinearSVM(ClassifierMixin, BaseEstimator):
    """Regularized soft-margin linear SVM solved to a KKT tolerance.

    The larger of the two classes in sort order is encoded as +1.
    """

    def __init__(self, theta=1.0, rho=1e-2, tolerance=1e-8, max_iterations=10_000):
        self.theta = theta
        self.rho = rho
        self.tolerance = tolerance
        self.max_iterations = max_iterations

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, signed = _binary_targets(y)
        config = SvmConfig(self.theta, self.rho, self.tolerance, self.max_iterations)
        sol = train_svm(Dataset(X, signed), config)
        self.solution_ = sol
        self.coef_ = sol.alpha.copy()
        self.intercept_ = float(sol.beta)
        self.dual_coef_ = sol.omega.copy()
        self.slack_ = sol.xi.copy()
        self.kkt_residual_ = sol.kkt_residual
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, self.classes_[1], self.classes_[0])


class RidgeRegressor(RegressorMixin, BaseEstimator):
    """Least squares with penalty sigma * ||phi||^2 and loss averaged over rows; no intercept."""

    def __init__(self, sigma=1e-5):
        self.sigma = sigma

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.coef_ = fit_ridge(Dataset(X, y), self.sigma)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_


class _NoiseRelease(TransformerMixin, BaseEstimator):
    """Shared transform: X + noise drawn from RandomStream(seed, stream_id).

    The same (seed, stream_id) and shape always give the same noise; change
    ``stream_id`` for a fresh release.
    """

    def _build(self, p):
        raise NotImplementedError

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.scaling_ = _as_scaling(self.scaling, X.shape[1])
        self.mechanism_, self.certificate_ = self._build(X.shape[1])
        return self

    def transform(self, X):
        check_is_fitted(self, "mechanism_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        noise = self.mechanism_.sample(X.shape[0], RandomStream(self.seed, self.stream_id))
        return X + noise


class GaussianNoiseRelease(_NoiseRelease):
    """Optimal Gaussian noise for trade-off weight ``lam``."""

    def __init__(self, lam=1.0, scaling=None, deltas=(), seed=0, stream_id=0):
        self.lam = lam
        self.scaling = scaling
        self.deltas = deltas
        self.seed = seed
        self.stream_id = stream_id

    def _build(self, p):
        mech = optimal_iid_mechanism(self.lam, self.scaling_)
        return mech, certify_gaussian(mech.lam, self.scaling_, self.deltas)


class LaplaceNoiseRelease(_NoiseRelease):
    """Laplace noise with the same Cramer-Rao floor as the optimal Gaussian at ``lam``."""

    def __init__(self, lam=1.0, scaling=None, seed=0, stream_id=0):
        self.lam = lam
        self.scaling = scaling
        self.seed = seed
        self.stream_id = stream_id

    def _build(self, p):
        mech = matched_laplace_baseline(optimal_iid_mechanism(self.lam, self.scaling_), self.scaling_)
        cert = crb_bounds(mech.fisher_information(), self.scaling_)
        cert.flags += list(mech.flags)
        return mech, cert


class ConstrainedNoiseRelease(_NoiseRelease):
    """Optimal noise supported on the box [lower, upper]^p (diagonal scaling only)."""

    def __init__(self, lam=1.0, lower=-5.0, upper=5.0, scaling=None, grid_points=1025, seed=0, stream_id=0):
        self.lam = lam
        self.lower = lower
        self.upper = upper
        self.scaling = scaling
        self.grid_points = grid_points
        self.seed = seed
        self.stream_id = stream_id

    def _build(self, p):
        if not self.scaling_.is_diagonal:
            raise ValueError("box-constrained noise needs a diagonal scaling matrix")
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (p,))
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (p,))
        mech = constrained_mechanism(BoxConstraint(lo, hi, np.diag(self.scaling_.pi)), self.lam, self.grid_points)
        return mech, crb_bounds(mech.fisher_information(), self.scaling_)


class CorrelatedNoiseRelease(TransformerMixin, BaseEstimator):
    """Noise that leaves the SVM trained on (X, y) unchanged.

    ``fit`` trains the SVM; ``transform`` only accepts that same X, because
    the noise is defined jointly over all rows.
    """

    def __init__(self, m=1.0, theta=1.0, rho=1e-2, scaling=None, seed=0, stream_id=0):
        self.m = m
        self.theta = theta
        self.rho = rho
        self.scaling = scaling
        self.seed = seed
        self.stream_id = stream_id

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, signed = _binary_targets(y)
        data = Dataset(X, signed)
        self.solution_ = train_svm(data, SvmConfig(theta=self.theta, rho=self.rho))
        self.mechanism_ = CorrelatedMechanism(build_invariance_operator(self.solution_, data), self.m)
        self.certificate_ = self.mechanism_.certificate(_as_scaling(self.scaling, X.shape[1]))
        self._fit_X = X.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mechanism_")
        X = check_array(X)
        if X.shape != self._fit_X.shape or not np.array_equal(X, self._fit_X):
            raise ValueError("correlated noise can only be applied to the data it was fitted on")
        w = self.mechanism_.sample(RandomStream(self.seed, self.stream_id))
        return X + w.reshape(X.shape)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X)
