"""Losses, proximal operators and smoothness constants for ``P(x) = f(x) + R(x)``.

Two problem families are provided:

* :class:`LogisticProblem` -- L1/L2-regularised logistic regression split into
  ``n`` sample batches, ``f = (1/n) sum_i f_i``.
* :class:`QuadraticProblem` -- ``f_i(x) = x'A_i x / 2 - b_i'x`` with an optional
  L1 term; :func:`quadratic_problem` builds the one-dimensional ``scale*x^2/2``
  instance used as the divergence counterexample.

All arithmetic is float64.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import ConfigError, DimensionError, LabelError

__all__ = [
    "Problem",
    "LogisticProblem",
    "QuadraticProblem",
    "PLCertificate",
    "aggregate_lipschitz",
    "block_partition",
    "lipschitz_logreg",
    "logreg_value_grad",
    "prox_l1",
    "quadratic_problem",
    "random_quadratic",
    "reference_solution",
]

# Dense copies of the design matrix are cheaper than CSR products at desk scale.
_DENSE_LIMIT = 4_000_000


def _as_vector(x, dim=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise DimensionError(f"vector has dimension {x.shape[0]}, expected {dim}")
    return x


def _check_labels(labels):
    labels = np.asarray(labels, dtype=np.float64)
    bad = np.flatnonzero(np.abs(labels) != 1.0)
    if bad.size:
        raise LabelError(
            f"labels must be -1 or +1; sample {bad[0]} has label {labels[bad[0]]!r}"
        )
    return labels


def prox_l1(v, threshold):
    """Soft-thresholding, the prox of ``threshold * ||.||_1``."""
    if not threshold >= 0:
        raise ConfigError(f"threshold must be >= 0, got {threshold!r}")
    v = np.asarray(v, dtype=np.float64)
    if threshold == 0:
        return v.copy()
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def logreg_value_grad(dataset, x, lam2=0.0):
    """Average logistic loss plus ``lam2/2 ||x||^2`` and its gradient.

    ``dataset`` needs ``features`` (``N x d``, dense or sparse) and ``labels``
    in {-1, +1}.
    """
    A = dataset.features
    N, d = A.shape
    x = _as_vector(x, d)
    b = _check_labels(dataset.labels)
    if b.shape[0] != N:
        raise DimensionError(f"{N} feature rows but {b.shape[0]} labels")
    z = b * (A @ x)
    value = float(np.mean(np.logaddexp(0.0, -z))) + 0.5 * lam2 * float(x @ x)
    grad = -(A.T @ (b * expit(-z))) / N + lam2 * x
    return value, np.asarray(grad, dtype=np.float64)


def aggregate_lipschitz(L_i):
    """Root-mean-square of the per-component constants."""
    L_i = np.asarray(L_i, dtype=np.float64)
    if L_i.size == 0:
        raise ConfigError("need at least one component constant")
    return float(math.sqrt(float(np.mean(L_i**2))))


def _row_sq_norms(A):
    if sparse.issparse(A):
        return np.asarray(A.multiply(A).sum(axis=1)).ravel()
    return np.einsum("ij,ij->i", A, A)


def lipschitz_logreg(dataset, lam2, batches):
    """Per-batch constants ``L_i``, their RMS ``L``, and the default ``L_hat = L``.

    Batch ``i`` is weighted by ``n/N`` so that the batch average reproduces the
    full-sample objective; the logistic curvature is bounded by 1/4.
    """
    if len(batches) == 0:
        raise ConfigError("need at least one batch")
    N = dataset.features.shape[0]
    n = len(batches)
    sq = _row_sq_norms(dataset.features)
    L_i = []
    for i, idx in enumerate(batches):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise ConfigError(f"batch {i} is empty")
        L_i.append(n / N * float(np.sum(sq[idx])) / 4.0 + lam2)
    L_i = np.array(L_i)
    L = aggregate_lipschitz(L_i)
    return L_i, L, L


def block_partition(d, m):
    """Split ``range(d)`` into ``m`` contiguous blocks; the first ``d % m`` are one longer."""
    if not 1 <= m <= d:
        raise ConfigError(f"need 1 <= m <= d, got m={m}, d={d}")
    base, extra = divmod(d, m)
    out, start = [], 0
    for j in range(m):
        size = base + (1 if j < extra else 0)
        out.append(slice(start, start + size))
        start += size
    return out


class PLCertificate:
    """A proximal-PL (or strong-convexity) modulus ``sigma`` with ``0 < sigma <= L``."""

    def __init__(self, sigma, kind="strongly-convex", L=None):
        if not sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {sigma!r}")
        if L is not None and sigma > L * (1 + 1e-12):
            raise ConfigError(f"sigma={sigma} exceeds L={L}")
        if kind not in ("strongly-convex", "proximal-PL"):
            raise ConfigError(f"unknown certificate kind {kind!r}")
        self.sigma = float(sigma)
        self.kind = kind

    def __repr__(self):
        return f"PLCertificate(sigma={self.sigma!r}, kind={self.kind!r})"


class Problem:
    """Composite objective with finite-sum and block structure.

    Subclasses provide ``f``, ``grad`` and ``component_grad``; the regulariser
    is ``lam1 * ||x||_1`` (``lam1 = 0`` gives ``R = 0``).
    """

    dim: int
    n_components: int
    lam1: float = 0.0
    L_i: np.ndarray
    L: float
    L_hat: float
    blocks: list
    pl: PLCertificate | None = None
    p_star: float | None = None
    x_star: np.ndarray | None = None
    convex: bool = True
    name: str = "problem"
    x0: np.ndarray | None = None

    @property
    def m(self):
        return len(self.blocks)

    @property
    def sigma(self):
        return None if self.pl is None else self.pl.sigma

    def initial_point(self):
        return np.zeros(self.dim) if self.x0 is None else np.array(self.x0, dtype=np.float64)

    def set_blocks(self, m):
        self.blocks = block_partition(self.dim, m)
        return self

    def reg(self, x):
        if self.lam1 == 0:
            return 0.0
        return self.lam1 * float(np.sum(np.abs(x)))

    def objective(self, x):
        return self.f(x) + self.reg(x)

    def objective_and_grad(self, x):
        """``(P(x), grad f(x))``; subclasses may share work between the two."""
        return self.objective(x), self.grad(x)

    def prox(self, v, step):
        """``prox_{step * R}(v)``."""
        return prox_l1(v, self.lam1 * step)

    def stationarity(self, x, grad=None):
        """``min ||grad f(x) + xi||`` over ``xi`` in the subdifferential of ``R`` at ``x``."""
        g = self.grad(x) if grad is None else grad
        if self.lam1 == 0:
            return float(np.linalg.norm(g))
        r = np.where(
            x != 0,
            g + self.lam1 * np.sign(x),
            np.sign(g) * np.maximum(np.abs(g) - self.lam1, 0.0),
        )
        return float(np.linalg.norm(r))

    def block_grad(self, x, j):
        return self.grad(x)[self.blocks[j]]

    def describe(self):
        out = {
            "problem": self.name,
            "dim": self.dim,
            "n_components": self.n_components,
            "m_blocks": self.m,
            "lam1": self.lam1,
            "L": self.L,
            "L_hat": self.L_hat,
        }
        if self.sigma is not None:
            out["sigma"] = self.sigma
        if self.p_star is not None:
            out["p_star"] = self.p_star
        return out


class LogisticProblem(Problem):
    """Logistic regression, ``R = lam1 ||x||_1``, batches assigned to components."""

    def __init__(self, dataset, batches, lam1=0.0, lam2=0.0, m=1, tighten_lhat=False):
        A = dataset.features
        N, d = A.shape
        labels = _check_labels(dataset.labels)
        if labels.shape[0] != N:
            raise DimensionError(f"{N} feature rows but {labels.shape[0]} labels")
        if lam1 < 0 or lam2 < 0:
            raise ConfigError("regularisation weights must be non-negative")
        if sparse.issparse(A) and N * d <= _DENSE_LIMIT:
            A = A.toarray()
        self.A = A
        self.b = labels
        self.N, self.dim = N, d
        self.lam1, self.lam2 = float(lam1), float(lam2)
        self.batches = [np.asarray(bi, dtype=np.int64) for bi in batches]
        self.n_components = len(self.batches)
        covered = np.sort(np.concatenate(self.batches)) if self.batches else []
        if len(covered) != N or np.any(covered != np.arange(N)):
            raise ConfigError("batches must partition the sample indices")
        self._A_batch = [A[bi] for bi in self.batches]
        self._b_batch = [labels[bi] for bi in self.batches]
        self._weight = self.n_components / N
        self.L_i, self.L, self.L_hat = lipschitz_logreg(dataset, lam2, self.batches)
        self.blocks = block_partition(d, m)
        if tighten_lhat:
            self.L_hat = min(self.L, self.block_lipschitz())
        self.pl = PLCertificate(lam2, "strongly-convex", self.L) if lam2 > 0 else None
        self.name = "logistic"

    def describe(self):
        out = super().describe()
        out["lam2"] = self.lam2
        out["n_samples"] = self.N
        return out

    def _loss(self, A, b, x, weight):
        z = b * (A @ x)
        return weight * float(np.sum(np.logaddexp(0.0, -z)))

    def _grad(self, A, b, x, weight):
        z = b * (A @ x)
        return -weight * (A.T @ (b * expit(-z))) + self.lam2 * x

    def f(self, x):
        return self._loss(self.A, self.b, x, 1.0 / self.N) + 0.5 * self.lam2 * float(x @ x)

    def grad(self, x):
        return np.asarray(self._grad(self.A, self.b, x, 1.0 / self.N))

    def objective_and_grad(self, x):
        z = self.b * (self.A @ x)
        loss = float(np.mean(np.logaddexp(0.0, -z))) + 0.5 * self.lam2 * float(x @ x)
        grad = -(self.A.T @ (self.b * expit(-z))) / self.N + self.lam2 * x
        return loss + self.reg(x), np.asarray(grad)

    def component_grad(self, i, x):
        return np.asarray(self._grad(self._A_batch[i], self._b_batch[i], x, self._weight))

    def block_lipschitz(self):
        """Bound on the cross-block constant: ``max_b ||A_b||_2^2 / (4N) + lam2``."""
        A = self.A.toarray() if sparse.issparse(self.A) else self.A
        worst = max(np.linalg.norm(A[:, blk], 2) ** 2 for blk in self.blocks)
        return float(worst / (4.0 * self.N) + self.lam2)


class QuadraticProblem(Problem):
    """``f_i(x) = x'A_i x / 2 - b_i'x`` with positive semidefinite ``A_i``."""

    def __init__(self, hessians, linear=None, lam1=0.0, m=1):
        H = np.asarray(hessians, dtype=np.float64)
        if H.ndim == 2:
            H = H[None]
        n, d, d2 = H.shape
        if d != d2:
            raise DimensionError(f"component Hessians must be square, got {H.shape[1:]}")
        lin = np.zeros((n, d)) if linear is None else np.asarray(linear, dtype=np.float64)
        if lin.shape != (n, d):
            raise DimensionError(f"linear terms must have shape {(n, d)}, got {lin.shape}")
        self.H, self.c = H, lin
        self.H_mean, self.c_mean = H.mean(axis=0), lin.mean(axis=0)
        self.dim, self.n_components = d, n
        self.lam1 = float(lam1)
        eig = [np.linalg.eigvalsh(0.5 * (Hi + Hi.T)) for Hi in H]
        if min(e[0] for e in eig) < -1e-12 * max(1.0, max(e[-1] for e in eig)):
            raise ConfigError("component Hessians must be positive semidefinite")
        self.L_i = np.array([max(e[-1], 0.0) for e in eig])
        self.L = aggregate_lipschitz(self.L_i)
        self.L_hat = self.L
        self.blocks = block_partition(d, m)
        mu = float(np.linalg.eigvalsh(self.H_mean)[0])
        self.pl = PLCertificate(min(mu, self.L), "strongly-convex", self.L) if mu > 1e-12 else None
        if self.lam1 == 0 and self.pl is not None:
            self.x_star = np.linalg.solve(self.H_mean, self.c_mean)
            self.p_star = self.f(self.x_star)
        self.name = "quadratic"

    def f(self, x):
        return 0.5 * float(x @ (self.H_mean @ x)) - float(self.c_mean @ x)

    def grad(self, x):
        return self.H_mean @ x - self.c_mean

    def component_grad(self, i, x):
        return self.H[i] @ x - self.c[i]

    def block_lipschitz(self):
        return float(
            max(
                np.linalg.norm(self.H_mean[bi, bj], 2)
                for bi in self.blocks
                for bj in self.blocks
            )
        )


def quadratic_problem(scale=1.0):
    """One-dimensional ``f(x) = scale * x^2 / 2`` with ``R = 0``."""
    if not scale > 0:
        raise ConfigError(f"scale must be > 0, got {scale!r}")
    prob = QuadraticProblem(np.array([[[float(scale)]]]))
    prob.name = "quadratic1d"
    prob.x0 = np.ones(1)
    return prob


def random_quadratic(d, n, seed, mu=0.1, lam1=0.0, m=1):
    """Random strongly convex quadratic with ``n`` components (desk-scale fuzzing)."""
    rng = np.random.default_rng(seed)
    H, c = [], []
    for _ in range(n):
        M = rng.standard_normal((d, d)) / math.sqrt(d)
        H.append(M.T @ M + mu * np.eye(d))
        c.append(rng.standard_normal(d))
    prob = QuadraticProblem(np.array(H), np.array(c), lam1=lam1, m=m)
    if prob.p_star is None:
        reference_solution(prob)
    return prob


def reference_solution(problem, tol=1e-13, max_iter=200_000, x0=None):
    """Accurate minimiser by accelerated proximal gradient with adaptive restart.

    Stores ``x_star`` and ``p_star`` on the problem and returns them.
    """
    step = 1.0 / problem.L
    x = np.zeros(problem.dim) if x0 is None else _as_vector(x0, problem.dim).copy()
    y, t = x.copy(), 1.0
    for _ in range(max_iter):
        x_new = problem.prox(y - step * problem.grad(y), step)
        if float((y - x_new) @ (x_new - x)) > 0:
            # gradient-based restart
            y, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        y = x_new + ((t - 1) / t_new) * (x_new - x)
        moved = float(np.linalg.norm(x_new - x))
        x, t = x_new, t_new
        if moved <= tol * max(1.0, float(np.linalg.norm(x))):
            break
    # polish with plain proximal-gradient steps
    for _ in range(1000):
        x_new = problem.prox(x - step * problem.grad(x), step)
        if np.array_equal(x_new, x):
            break
        x = x_new
    problem.x_star = x
    problem.p_star = problem.objective(x)
    return x, problem.p_star
