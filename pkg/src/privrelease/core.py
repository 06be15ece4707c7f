"""Shared data model: datasets, positive-definite scaling matrices, random streams."""

from __future__ import annotations

import csv
import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.utils import check_array

MAX_ENUMERATION_DIM = 25


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (q rows, p columns) with one label per row.

    ``labels`` holds either binary labels in {-1, +1} or real responses.
    Arrays are copied and made read-only on construction.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        X = check_array(self.features, dtype=float, ensure_all_finite=True)
        y = np.asarray(self.labels, dtype=float).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(y)):
            raise ValueError("labels must be finite")
        names = self.feature_names
        if names is not None:
            names = tuple(str(n) for n in names)
            if len(names) != X.shape[1]:
                raise ValueError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "feature_names", names)

    @property
    def q(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all(np.isin(self.labels, (-1.0, 1.0))))

    def require_binary(self):
        if not self.is_binary:
            bad = sorted(set(np.unique(self.labels)) - {-1.0, 1.0})
            raise ValueError(f"labels must be -1/+1, found {bad[:5]}")
        return self

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.labels, self.feature_names)

    def stacked(self) -> np.ndarray:
        """Row-major stack [x_1; ...; x_q] as one length-qp vector."""
        return self.features.reshape(-1).copy()


class ScalingMatrix:
    """Symmetric positive-definite weighting of per-feature privacy importance.

    The eigendecomposition is computed once; fractional powers reuse it.
    """

    def __init__(self, pi, rtol: float = 1e-12):
        pi = np.atleast_2d(np.asarray(pi, dtype=float))
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
            raise ValueError(f"scaling matrix must be square, got shape {pi.shape}")
        if not np.all(np.isfinite(pi)):
            raise ValueError("scaling matrix has non-finite entries")
        scale = max(np.abs(pi).max(), np.finfo(float).tiny)
        if np.abs(pi - pi.T).max() > rtol * scale:
            raise ValueError("scaling matrix is not symmetric")
        pi = 0.5 * (pi + pi.T)
        evals, evecs = np.linalg.eigh(pi)
        if evals[0] <= 0:
            bad = evals[evals <= 0]
            raise ValueError(f"scaling matrix is not positive definite: eigenvalue(s) {bad.tolist()}")
        self.pi = _frozen(pi)
        self.eigenvalues = _frozen(evals)
        self._evecs = _frozen(evecs)

    @classmethod
    def identity(cls, p: int) -> "ScalingMatrix":
        return cls(np.eye(p))

    @classmethod
    def diagonal(cls, values) -> "ScalingMatrix":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def from_string(cls, text: str) -> "ScalingMatrix":
        """Parse ``identity:P``, ``diag:a,b,...`` or a path to a whitespace/CSV matrix file."""
        kind, _, rest = text.partition(":")
        if kind == "identity" and rest:
            return cls.identity(int(rest))
        if kind == "diag" and rest:
            return cls.diagonal([float(v) for v in rest.split(",")])
        path = Path(text)
        if not path.exists():
            raise FileNotFoundError(text)
        return cls(np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=2))

    @property
    def p(self) -> int:
        return self.pi.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return bool(np.all(self.pi == np.diag(np.diag(self.pi))))

    def power(self, exponent: float) -> np.ndarray:
        v = self._evecs
        out = (v * self.eigenvalues**exponent) @ v.T
        return 0.5 * (out + out.T)

    def sqrt(self) -> np.ndarray:
        return self.power(0.5)

    def inv_sqrt(self) -> np.ndarray:
        return self.power(-0.5)

    def quarter(self) -> np.ndarray:
        return self.power(0.25)

    def inverse(self) -> np.ndarray:
        return self.power(-1.0)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.pi).tobytes()).hexdigest()[:16]

    def __repr__(self):
        return f"ScalingMatrix(p={self.p})"


def matrix_power(m, exponent: float) -> np.ndarray:
    """Symmetric fractional power of an SPD matrix via its eigendecomposition."""
    if not isinstance(m, ScalingMatrix):
        m = ScalingMatrix(m)
    return m.power(exponent)


def induced_inf_to_2_norm(m, upper_bound: bool = False) -> float:
    """max_{x != 0} ||M x||_2 / ||x||_inf.

    The objective is convex, so the maximum over the unit inf-ball sits at a
    sign vertex; vertices are enumerated exactly. Beyond 25 columns this is
    refused unless ``upper_bound`` is set, in which case ``||M||_2 sqrt(p)``
    is returned instead.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    p = m.shape[1]
    if p > MAX_ENUMERATION_DIM:
        if upper_bound:
            return float(np.linalg.norm(m, 2) * np.sqrt(p))
        raise ValueError(
            f"exact inf->2 norm needs 2^{p} vertices; pass upper_bound=True for ||M||_2*sqrt(p)"
        )
    gram = m.T @ m
    if p == 1:
        return float(np.sqrt(gram[0, 0]))
    # s and -s give the same value, so pin s_0 = +1
    best = 0.0
    rest = p - 1
    chunk_bits = min(rest, 16)
    low = np.array(list(itertools.product((1.0, -1.0), repeat=chunk_bits)))
    for high in itertools.product((1.0, -1.0), repeat=rest - chunk_bits):
        s = np.empty((low.shape[0], p))
        s[:, 0] = 1.0
        s[:, 1 : 1 + rest - chunk_bits] = high
        s[:, 1 + rest - chunk_bits :] = low
        vals = np.einsum("ij,jk,ik->i", s, gram, s)
        best = max(best, float(vals.max()))
    return float(np.sqrt(best))


@dataclass(frozen=True)
class RandomStream:
    """Counter-based deterministic stream keyed by (seed, stream_id).

    Draws depend only on the key, never on call order elsewhere or thread
    count. Use :meth:`fork` to derive independent child streams.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = int(getattr(self, name))
            if not 0 <= v < 2**64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer")
            object.__setattr__(self, name, v)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def fork(self, *path: int) -> "RandomStream":
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *map(int, path)))
        child = int(ss.generate_state(1, dtype=np.uint64)[0])
        return RandomStream(self.seed, child)

    def uniform_open(self, shape) -> np.ndarray:
        """Uniform draws on the open interval (0, 1)."""
        u = self.generator().random(shape)
        return np.where(u == 0.0, np.nextafter(0.0, 1.0), u)


@dataclass
class CsvTable:
    """A parsed CSV: numeric features plus the raw label column, kept for round-tripping."""

    header: list
    label_index: int
    raw_labels: list
    dataset: Dataset
    means: Optional[np.ndarray] = None
    scales: Optional[np.ndarray] = None
    digest: str = ""
    label_map: dict = field(default_factory=dict)

    @property
    def feature_columns(self) -> list:
        return [h for j, h in enumerate(self.header) if j != self.label_index]


def _encode_labels(raw: Sequence[str], label_map: Optional[Mapping[str, float]], binary: bool):
    if label_map:
        try:
            return np.array([float(label_map[v]) for v in raw]), dict(label_map)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} missing from label map") from None
    if not binary:
        return np.array([float(v) for v in raw]), {}
    classes = sorted(set(raw))
    try:
        numeric = sorted(set(float(v) for v in raw))
    except ValueError:
        numeric = None
    if numeric is not None and set(numeric) <= {-1.0, 1.0}:
        return np.array([float(v) for v in raw]), {}
    if numeric is not None and set(numeric) <= {0.0, 1.0}:
        mapping = {v: (1.0 if float(v) == 1.0 else -1.0) for v in classes}
        return np.array([mapping[v] for v in raw]), mapping
    if len(classes) != 2:
        raise ValueError(f"binary label column needs exactly 2 classes, found {len(classes)}")
    mapping = {classes[0]: -1.0, classes[1]: 1.0}
    return np.array([mapping[v] for v in raw]), mapping


def read_csv(
    path,
    label,
    label_map: Optional[Mapping[str, float]] = None,
    binary: bool = True,
    standardize: bool = False,
) -> CsvTable:
    """Load a headed CSV with one label column (name or integer index)."""
    path = Path(path)
    data = path.read_bytes()
    rows = list(csv.reader(data.decode("utf-8").splitlines()))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header and at least one data row")
    header, body = rows[0], rows[1:]
    if isinstance(label, int) or (isinstance(label, str) and label.lstrip("-").isdigit() and label not in header):
        label_index = int(label) % len(header)
    elif label in header:
        label_index = header.index(label)
    else:
        raise ValueError(f"{path}: no label column {label!r}")
    raw_labels, feats = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        raw_labels.append(row[label_index].strip())
        try:
            feats.append([float(v) for j, v in enumerate(row) if j != label_index])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    X = np.array(feats, dtype=float)
    y, mapping = _encode_labels(raw_labels, label_map, binary)
    names = [h for j, h in enumerate(header) if j != label_index]
    means = scales = None
    if standardize:
        means = X.mean(axis=0)
        scales = X.std(axis=0)
        scales[scales == 0] = 1.0
        X = (X - means) / scales
    return CsvTable(
        header=header,
        label_index=label_index,
        raw_labels=raw_labels,
        dataset=Dataset(X, y, names),
        means=means,
        scales=scales,
        digest=hashlib.sha256(data).hexdigest(),
        label_map=mapping,
    )


def write_csv(path, table: CsvTable, features: np.ndarray) -> None:
    """Write ``features`` back in the input's schema, labels untouched."""
    features = np.asarray(features, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for raw, row in zip(table.raw_labels, features):
            vals = [repr(float(v)) for v in row]
            vals.insert(table.label_index, raw)
            w.writerow(vals)
