"""Experiment orchestration: release, retrain, score against the original data.

Every trial draws its noise from ``RandomStream(seed).fork(lambda_index, trial)``
so Gaussian and Laplace releases at the same (lambda, trial) share their
uniforms, and results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .constrained import BoxConstraint, constrained_mechanism
from .core import Dataset, RandomStream, ScalingMatrix, read_csv
from .correlated import CorrelatedMechanism, build_invariance_operator
from .genml import RidgeLearner
from .mechanisms import matched_laplace_baseline, optimal_iid_mechanism
from .privacy import crb_bounds
from .svm import SvmConfig, SvmConvergenceError, train_svm

MECHANISMS = ("optimal_gaussian", "laplace_matched", "constrained", "correlated")
LEARNERS = ("svm", "ridge")
CSV_COLUMNS = ("mechanism", "lambda", "metric", "value", "stderr", "privacy_floor", "trials")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, message, trial=None):
        super().__init__(message if trial is None else f"trial {trial}: {message}")
        self.trial = trial


@dataclass
class ExperimentConfig:
    dataset: dict
    mechanisms: list = field(default_factory=lambda: ["optimal_gaussian", "laplace_matched"])
    lambda_grid: list = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1, 1.0])
    m: float = 100.0
    trials: int = 100
    seed: int = 0
    learner: str = "svm"
    theta: float = 1.0
    rho: float = 1e-2
    sigma: float = 1e-5
    scaling: str = ""
    box: Optional[list] = None
    grid_points: int = 513
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.dataset, dict) or "kind" not in self.dataset:
            raise ConfigError("dataset must be a mapping with a 'kind' key")
        if isinstance(self.mechanisms, str):
            self.mechanisms = [self.mechanisms]
        bad = [mm for mm in self.mechanisms if mm not in MECHANISMS]
        if bad or not self.mechanisms:
            raise ConfigError(f"unknown mechanism(s) {bad}; choose from {MECHANISMS}")
        if self.learner not in LEARNERS:
            raise ConfigError(f"learner must be one of {LEARNERS}")
        try:
            self.lambda_grid = [float(v) for v in self.lambda_grid]
            self.trials = int(self.trials)
            self.seed = int(self.seed)
            self.workers = int(self.workers)
            self.m = float(self.m)
            self.theta, self.rho, self.sigma = float(self.theta), float(self.rho), float(self.sigma)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        iid = set(self.mechanisms) - {"correlated"}
        if iid and not self.lambda_grid:
            raise ConfigError("lambda_grid must be nonempty for i.i.d. mechanisms")
        if any(not v > 0 for v in self.lambda_grid):
            raise ConfigError("lambda values must be positive")
        if "correlated" in self.mechanisms and self.learner != "svm":
            raise ConfigError("the correlated mechanism is defined for the svm learner only")
        if "constrained" in self.mechanisms and not self.box:
            raise ConfigError("the constrained mechanism needs box: [lower, upper]")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**raw)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = cls.from_dict(raw)
        src = cfg.dataset.get("path")
        if src and not Path(src).is_absolute():
            cfg.dataset = dict(cfg.dataset, path=str(Path(path).parent / src))
        return cfg


@dataclass(frozen=True)
class MetricsRecord:
    mechanism: str
    lam: Optional[float]
    metric: str
    value: float
    stderr: float
    privacy_floor: float
    trials: int

    def row(self) -> list:
        lam = "" if self.lam is None else repr(float(self.lam))
        return [self.mechanism, lam, self.metric, repr(float(self.value)), repr(float(self.stderr)),
                repr(float(self.privacy_floor)), str(self.trials)]


@dataclass(frozen=True)
class PairedRecord:
    lam: float
    optimal: MetricsRecord
    laplace: MetricsRecord
    difference: float
    paired_stderr: float


def make_blobs(centers, counts, stream: RandomStream, std: float = 1.0) -> Dataset:
    """Gaussian blobs; the first blob is labelled -1, the rest +1."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    counts = [int(c) for c in counts]
    if len(counts) != centers.shape[0]:
        raise ConfigError("need one count per blob center")
    g = stream.generator()
    X = np.vstack([c + std * g.standard_normal((k, centers.shape[1])) for c, k in zip(centers, counts)])
    y = np.concatenate([np.full(k, -1.0 if j == 0 else 1.0) for j, k in enumerate(counts)])
    return Dataset(X, y)


def make_linear(q: int, weights, noise: float, stream: RandomStream) -> Dataset:
    w = np.asarray(weights, dtype=float)
    g = stream.generator()
    X = g.standard_normal((int(q), w.size))
    return Dataset(X, X @ w + noise * g.standard_normal(int(q)))


def load_dataset(source: dict, learner: str, seed: int) -> Dataset:
    kind = source["kind"]
    stream = RandomStream(seed).fork(2**32 - 1)
    if kind == "blobs":
        return make_blobs(source.get("centers", [[0, 0], [0, 5]]), source.get("counts", [50, 50]), stream,
                          float(source.get("std", 1.0)))
    if kind == "linear":
        return make_linear(source.get("q", 100), source.get("weights", [1.0, -2.0]), float(source.get("noise", 0.1)), stream)
    if kind == "csv":
        if "path" not in source or "label" not in source:
            raise ConfigError("csv dataset needs 'path' and 'label'")
        table = read_csv(source["path"], source["label"], label_map=source.get("label_map"),
                         binary=(learner == "svm"), standardize=bool(source.get("standardize", False)))
        drop = [table.feature_columns.index(c) for c in source.get("drop", [])]
        data = table.dataset
        if drop:
            keep = [j for j in range(data.p) if j not in drop]
            names = [data.feature_names[j] for j in keep]
            data = Dataset(data.features[:, keep], data.labels, names)
        return data
    raise ConfigError(f"unknown dataset kind {kind!r}")


class _Context:
    """Everything a trial needs; plain data so it pickles to worker processes."""

    def __init__(self, config: ExperimentConfig, build_mechanisms: bool = True):
        self.config = config
        self.data = load_dataset(config.dataset, config.learner, config.seed)
        p = self.data.p
        self.scaling = ScalingMatrix.from_string(config.scaling) if config.scaling else ScalingMatrix.identity(p)
        if self.scaling.p != p:
            raise ConfigError(f"scaling matrix is {self.scaling.p}x{self.scaling.p}, data has {p} features")
        self.svm_config = SvmConfig(theta=config.theta, rho=config.rho)
        self.ridge = RidgeLearner(config.sigma)
        self.reference = self._fit(self.data, None)
        self.mechanisms = {}
        if not build_mechanisms:
            return
        for k, lam in enumerate(config.lambda_grid):
            gauss = optimal_iid_mechanism(lam, self.scaling)
            for name in config.mechanisms:
                if name == "optimal_gaussian":
                    self.mechanisms[name, k] = gauss
                elif name == "laplace_matched":
                    self.mechanisms[name, k] = matched_laplace_baseline(gauss, self.scaling)
                elif name == "constrained":
                    if not self.scaling.is_diagonal:
                        raise ConfigError("the constrained mechanism needs a diagonal scaling matrix")
                    lo, hi = (float(v) for v in config.box)
                    box = BoxConstraint(np.full(p, lo), np.full(p, hi), np.diag(self.scaling.pi))
                    self.mechanisms[name, k] = constrained_mechanism(box, lam, config.grid_points)
        if "correlated" in config.mechanisms:
            op = build_invariance_operator(self.reference, self.data)
            self.mechanisms["correlated", None] = CorrelatedMechanism(op, config.m)

    def _fit(self, data, trial):
        if self.config.learner == "ridge":
            return self.ridge.fit(data)
        try:
            return train_svm(data, self.svm_config)
        except SvmConvergenceError as exc:
            raise ExperimentError(f"SVM solver failed: {exc}", trial) from None

    def score(self, model) -> float:
        if self.config.learner == "ridge":
            return self.ridge.loss(model, self.data)
        margins = self.data.labels * model.decision_function(self.data.features)
        return float(np.mean(margins > 0))

    def floor(self, key) -> float:
        mech = self.mechanisms[key]
        if key[0] == "correlated":
            return float(mech.certificate(self.scaling).row_floor)
        return float(crb_bounds(mech.fisher_information(), self.scaling).crb_floor)

    def stream(self, lam_index, trial) -> RandomStream:
        return RandomStream(self.config.seed).fork(lam_index, trial)

    def trial(self, key, trial) -> float:
        name, k = key
        mech = self.mechanisms[key]
        if name == "correlated":
            w = mech.sample(self.stream(len(self.config.lambda_grid), trial))
            noise = w.reshape(self.data.q, self.data.p)
        else:
            noise = mech.sample(self.data.q, self.stream(k, trial))
        released = self.data.with_features(self.data.features + noise)
        return self.score(self._fit(released, trial))

    @property
    def metric(self) -> str:
        return "expected_loss" if self.config.learner == "ridge" else "success_rate"

    def keys(self):
        out = []
        for k in range(len(self.config.lambda_grid)):
            out += [(n, k) for n in self.config.mechanisms if n != "correlated"]
        if "correlated" in self.config.mechanisms:
            out.append(("correlated", None))
        return out


_WORKER_CTX = None


def _init_worker(config):
    global _WORKER_CTX
    _WORKER_CTX = _Context(config)


def _run_job(job):
    key, trial = job
    return key, trial, _WORKER_CTX.trial(key, trial)


def _mean_stderr(values) -> tuple:
    v = np.asarray(values, dtype=float)
    n = v.size
    # shift by the first value so that constant inputs reproduce it exactly
    mean = float(v[0] + math.fsum(v - v[0]) / n)
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def trial_values(config: ExperimentConfig, workers: Optional[int] = None):
    """Per-trial metric values keyed by (mechanism, lambda_index), plus the context."""
    ctx = _Context(config)
    workers = config.workers if workers is None else int(workers)
    jobs = [(key, t) for key in ctx.keys() for t in range(config.trials)]
    values = {key: np.full(config.trials, np.nan) for key in ctx.keys()}
    if workers <= 1:
        for key, t in jobs:
            values[key][t] = ctx.trial(key, t)
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(config,)) as pool:
            for key, t, v in pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))):
                values[key][t] = v
    return values, ctx


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None) -> list:
    values, ctx = trial_values(config, workers)
    records = []
    for key in ctx.keys():
        name, k = key
        mean, se = _mean_stderr(values[key])
        lam = None if k is None else config.lambda_grid[k]
        records.append(MetricsRecord(name, lam, ctx.metric, mean, se, ctx.floor(key), config.trials))
    return records


def compare_mechanisms(config: ExperimentConfig, workers: Optional[int] = None) -> list:
    """Optimal Gaussian against the matched Laplace baseline, paired by trial."""
    cfg = ExperimentConfig.from_dict({**asdict(config), "mechanisms": ["optimal_gaussian", "laplace_matched"]})
    values, ctx = trial_values(cfg, workers)
    out = []
    for k, lam in enumerate(cfg.lambda_grid):
        recs = []
        for name in ("optimal_gaussian", "laplace_matched"):
            mean, se = _mean_stderr(values[name, k])
            recs.append(MetricsRecord(name, lam, ctx.metric, mean, se, ctx.floor((name, k)), cfg.trials))
        diff = values["optimal_gaussian", k] - values["laplace_matched", k]
        if ctx.metric == "expected_loss":
            diff = -diff  # positive means the Gaussian release is better
        d_mean, d_se = _mean_stderr(diff)
        out.append(PairedRecord(lam, recs[0], recs[1], d_mean, d_se))
    return out


def noiseless_score(config: ExperimentConfig) -> float:
    ctx = _Context(config, build_mechanisms=False)
    return ctx.score(ctx.reference)


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def metrics_summary(config: ExperimentConfig, records, baseline: Optional[float] = None) -> str:
    echo = asdict(config)
    echo.pop("workers")  # output must not depend on the worker count
    doc = {
        "config": echo,
        "noiseless": baseline,
        "records": [
            {"mechanism": r.mechanism, "lambda": r.lam, "metric": r.metric, "value": r.value,
             "stderr": r.stderr, "privacy_floor": r.privacy_floor, "trials": r.trials}
            for r in records
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False)
