"""Datasets (libsvm text, synthetic), batch partitions and run-trace CSV files."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .errors import ConfigError, DelayAdaptError, DimensionError, LabelError, ParseError

__all__ = [
    "Dataset",
    "RunTrace",
    "SparseRow",
    "TRACE_COLUMNS",
    "format_libsvm",
    "load_libsvm",
    "parse_libsvm",
    "partition_batches",
    "read_trace_csv",
    "synth_logreg",
    "write_libsvm",
    "write_trace_csv",
]

LABEL_RULES = ("sign", "even-odd", "strict")


class SparseRow(NamedTuple):
    indices: np.ndarray
    values: np.ndarray
    dim: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sample features ``a_i`` (CSR, ``N x d``) and labels ``b_i`` in {-1, +1}."""

    features: sparse.csr_matrix
    labels: np.ndarray

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.features.shape[0]} rows but {self.labels.shape[0]} labels"
            )
        if np.any(np.abs(self.labels) != 1):
            raise LabelError("labels must be -1 or +1")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def row(self, i):
        start, end = self.features.indptr[i], self.features.indptr[i + 1]
        return SparseRow(
            self.features.indices[start:end].copy(),
            self.features.data[start:end].copy(),
            self.dim,
        )

    @property
    def rows(self):
        return [self.row(i) for i in range(self.n_samples)]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.labels, other.labels)
            and (self.features != other.features).nnz == 0
        )

    def max_abs_scaled(self):
        """Copy with every column divided by its largest absolute entry."""
        scale = np.asarray(abs(self.features).max(axis=0).todense()).ravel()
        scale[scale == 0] = 1.0
        return Dataset(sparse.csr_matrix(self.features @ sparse.diags(1.0 / scale)), self.labels)


def _map_label(raw, rule, lineno):
    if rule == "strict":
        if raw not in (-1.0, 1.0):
            raise ParseError(f"label {raw!r} is not -1 or +1", lineno)
        return raw
    if rule == "even-odd":
        if raw != int(raw):
            raise ParseError(f"label {raw!r} is not an integer digit", lineno)
        return 1.0 if int(raw) % 2 == 0 else -1.0
    return 1.0 if raw > 0 else -1.0


def parse_libsvm(stream, dim=None, label_rule="sign"):
    """Parse ``label idx:val ...`` lines with 1-based, strictly increasing indices.

    ``label_rule``: ``sign`` maps positive labels to +1 and the rest to -1
    (so ``{0, 1}`` and ``{-1, +1}`` both work), ``even-odd`` maps even digits
    to +1, ``strict`` rejects anything but -1/+1.
    """
    if label_rule not in LABEL_RULES:
        raise ConfigError(f"unknown label rule {label_rule!r}")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    labels, indptr, indices, values = [], [0], [], []
    max_idx = 0
    for lineno, line in enumerate(stream, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            raw = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
        labels.append(_map_label(raw, label_rule, lineno))
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ParseError(f"malformed token {tok!r}", lineno) from None
            if not sep:
                raise ParseError(f"malformed token {tok!r}", lineno)
            if idx < 1:
                raise ParseError(f"index {idx} is not 1-based", lineno)
            if idx <= prev:
                raise ParseError(f"indices not increasing at {tok!r}", lineno)
            if not math.isfinite(val):
                raise ParseError(f"non-finite value in {tok!r}", lineno)
            prev = idx
            indices.append(idx - 1)
            values.append(val)
        max_idx = max(max_idx, prev)
        indptr.append(len(indices))
    if not labels:
        raise ParseError("empty dataset")
    if dim is None:
        dim = max_idx
    elif dim < max_idx:
        raise DimensionError(f"feature index {max_idx} exceeds declared dimension {dim}")
    X = sparse.csr_matrix(
        (np.array(values, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(len(labels), dim),
    )
    return Dataset(X, np.array(labels, dtype=np.float64))


def load_libsvm(path, dim=None, label_rule="sign", scale=False):
    try:
        with open(path, encoding="utf-8") as fh:
            data = parse_libsvm(fh, dim=dim, label_rule=label_rule)
    except ParseError as err:
        raise ParseError(err.message, err.line, path) from None
    except OSError as err:
        raise DelayAdaptError(f"cannot read dataset {path}: {err}") from err
    return data.max_abs_scaled() if scale else data


def format_libsvm(dataset):
    lines = []
    for i in range(dataset.n_samples):
        row = dataset.row(i)
        label = "+1" if dataset.labels[i] > 0 else "-1"
        feats = " ".join(f"{j + 1}:{float(v)!r}" for j, v in zip(row.indices, row.values))
        lines.append(f"{label} {feats}".rstrip())
    return "\n".join(lines) + "\n"


def write_libsvm(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_libsvm(dataset))


def partition_batches(dataset_or_n, n):
    """Contiguous near-even split of the sample indices into ``n`` batches."""
    N = dataset_or_n if isinstance(dataset_or_n, int) else dataset_or_n.n_samples
    if not 1 <= n <= N:
        raise ConfigError(f"need 1 <= n <= N, got n={n}, N={N}")
    base, extra = divmod(N, n)
    out, start = [], 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        out.append(np.arange(start, start + size))
        start += size
    return out


def synth_logreg(n_samples=200, d=50, seed=0, separability=math.inf):
    """Gaussian features (variance ``1/d``), labels from a planted hyperplane.

    Label noise: ``sign(a'w + eps / separability)`` with standard normal
    ``eps``; ``separability = inf`` gives noiseless labels.
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n_samples, d)) / math.sqrt(d)
    w = rng.standard_normal(d)
    margin = A @ w
    if math.isfinite(separability):
        margin = margin + rng.standard_normal(n_samples) / separability
    labels = np.where(margin >= 0, 1.0, -1.0)
    return Dataset(sparse.csr_matrix(A), labels)


# --------------------------------------------------------------------------
# run traces

TRACE_COLUMNS = ("k", "block", "tau", "gamma", "objective", "metric", "step_sq", "dist_sq")
_INT_COLUMNS = {"k", "block", "tau"}


@dataclass
class RunTrace:
    """Per-iteration record of a run.

    Row ``k`` describes the update ``x_k -> x_{k+1}``: the delay and step-size
    used, ``P(x_k)``, the optimality metric at ``x_k`` (``||grad f + xi||``
    for PIAG, ``||prox-grad mapping||`` for BCD), ``||x_{k+1} - x_k||^2`` and
    ``||x_k - x*||^2`` (NaN when unknown). The state after the last update
    lives in ``final``.
    """

    config: dict = field(default_factory=dict)
    k: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    block: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metric: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_sq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dist_sq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    worker_tau: np.ndarray | None = None
    final: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.k)

    @classmethod
    def from_rows(cls, rows, config=None, final=None, worker_tau=None):
        cols = {name: [] for name in TRACE_COLUMNS}
        for row in rows:
            for name in TRACE_COLUMNS:
                cols[name].append(row.get(name, math.nan if name not in _INT_COLUMNS else -1))
        arrays = {
            name: np.array(vals, dtype=np.int64 if name in _INT_COLUMNS else np.float64)
            for name, vals in cols.items()
        }
        wt = None
        if worker_tau is not None:
            wt = np.asarray(worker_tau, dtype=np.int64)
            if wt.ndim != 2:
                wt = wt.reshape(len(rows), -1)
        trace = cls(config=dict(config or {}), worker_tau=wt, final=dict(final or {}), **arrays)
        trace.validate()
        return trace

    def validate(self):
        if len(self.k) > 1 and np.any(np.diff(self.k) <= 0):
            raise DelayAdaptError("trace iterations must be strictly increasing")
        if np.any(self.gamma < 0):
            raise DelayAdaptError("trace step-sizes must be >= 0")

    def objectives_with_final(self):
        """``P(x_0) .. P(x_K)``."""
        return np.append(self.objective, self.final.get("objective", math.nan))

    def metrics_with_final(self):
        return np.append(self.metric, self.final.get("metric", math.nan))

    def dist_with_final(self):
        return np.append(self.dist_sq, self.final.get("dist_sq", math.nan))

    def step_integral(self):
        return np.cumsum(self.gamma)

    def equals(self, other):
        """Exact equality of every numeric field (NaN matches NaN)."""
        if not isinstance(other, RunTrace) or len(self) != len(other):
            return False
        for name in TRACE_COLUMNS:
            if not np.array_equal(getattr(self, name), getattr(other, name), equal_nan=True):
                return False
        if (self.worker_tau is None) != (other.worker_tau is None):
            return False
        if self.worker_tau is not None and not np.array_equal(self.worker_tau, other.worker_tau):
            return False
        return _same_values(self.final, other.final) and self.config == other.config


def _same_values(a, b):
    if a.keys() != b.keys():
        return False
    for key in a:
        x, y = a[key], b[key]
        if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
            continue
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if not np.array_equal(np.asarray(x), np.asarray(y)):
                return False
            continue
        if x != y:
            return False
    return True


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    if isinstance(value, np.ndarray):
        return ";".join(_fmt(v) for v in value.tolist())
    return str(value)


def _parse_scalar(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def write_trace_csv(trace, path):
    """Write ``#key=value`` header lines, a column header and one row per iteration."""
    columns = list(TRACE_COLUMNS)
    n_workers = 0 if trace.worker_tau is None else trace.worker_tau.shape[1]
    columns += [f"tau_w{i}" for i in range(n_workers)]
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for key, value in trace.config.items():
                fh.write(f"#{key}={_fmt(value)}\n")
            for key, value in trace.final.items():
                if isinstance(value, np.ndarray):
                    fh.write(f"#final.{key}[]={_fmt(value)}\n")
                else:
                    fh.write(f"#final.{key}={_fmt(value)}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for i in range(len(trace)):
                row = [_fmt(getattr(trace, name)[i]) for name in TRACE_COLUMNS]
                if n_workers:
                    row += [str(int(v)) for v in trace.worker_tau[i]]
                writer.writerow(row)
    except OSError as err:
        raise DelayAdaptError(f"cannot write trace {path}: {err}") from err


def read_trace_csv(path):
    config, final = {}, {}
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise DelayAdaptError(f"cannot read trace {path}: {err}") from err
    body_start = 0
    for lineno, line in enumerate(lines, 1):
        if not line.startswith("#"):
            body_start = lineno - 1
            break
        key, sep, value = line[1:].partition("=")
        if not sep:
            raise ParseError(f"header line without '=': {line!r}", lineno, path)
        if key.startswith("final."):
            key = key[len("final."):]
            if key.endswith("[]"):
                final[key[:-2]] = np.array([float(v) for v in value.split(";")] if value else [])
            else:
                final[key] = _parse_scalar(value)
        else:
            config[key] = _parse_scalar(value)
    else:
        raise ParseError("trace has no column header", path=path)
    reader = csv.reader(lines[body_start:])
    header = next(reader)
    missing = [c for c in TRACE_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"missing columns {missing}", body_start + 1, path)
    worker_cols = [i for i, c in enumerate(header) if c.startswith("tau_w")]
    pos = {c: header.index(c) for c in TRACE_COLUMNS}
    cols = {c: [] for c in TRACE_COLUMNS}
    wt = []
    for lineno, row in enumerate(reader, body_start + 2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno, path)
        try:
            for c in TRACE_COLUMNS:
                cols[c].append(int(row[pos[c]]) if c in _INT_COLUMNS else float(row[pos[c]]))
            if worker_cols:
                wt.append([int(row[i]) for i in worker_cols])
        except ValueError as err:
            raise ParseError(str(err), lineno, path) from None
    arrays = {
        c: np.array(v, dtype=np.int64 if c in _INT_COLUMNS else np.float64) for c, v in cols.items()
    }
    worker_tau = np.array(wt, dtype=np.int64).reshape(len(cols["k"]), len(worker_cols)) if worker_cols else None
    trace = RunTrace(config=config, final=final, worker_tau=worker_tau, **arrays)
    trace.validate()
    return trace


def ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
