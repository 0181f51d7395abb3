"""Checks of the Lyapunov-sequence conditions and step-size integral bounds on run traces.

A :class:`LyapunovBundle` holds sequences ``V, X, W, p, q, r`` built from a
trace. :func:`verify_sequence` tests, at every iteration,

    X_{k+1} + V_{k+1} <= q_k V_k + p_k sum_{l=k-tau_k}^{k-1} W_l - r_k W_k        (descent)

and, whenever ``p_k > 0``, for every ``l`` in ``[k - tau_k, k - 1]``

    p_k / Q_{k+1} <= r_l / Q_{l+1} - sum_{t=l+1}^{k-1} p_t / Q_{t+1}                 (step condition)

plus ``r_k >= 0`` (the ``l = k`` end of the window, where the sum runs
backwards and cancels ``p_k``). ``Q_k = q_0 ... q_{k-1}``. The conclusions
``V_k <= Q_k V_0`` and ``sum_{k<=K} X_k / Q_k <= V_0`` are checked for every
prefix ``K``. The step condition is multiplied through by ``Q_{k+1}`` so that
slacks stay on the scale of ``p`` and ``r``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SequenceError

__all__ = [
    "CASES",
    "LyapunovBundle",
    "IntegralBoundReport",
    "VerifyReport",
    "bundle_from_bcd",
    "bundle_from_piag",
    "check_integral_bound",
    "iterations_to_gap",
    "prox_grad_mapping",
    "stationarity_sum_bound",
    "linear_rate_envelope",
    "mapping_sum_bound",
    "verify_sequence",
]

CASES = ("nonconvex", "convex", "pl")
DET_TOL = 1e-9
SIGMAS = 3.0


def prox_grad_mapping(problem, x):
    """``L_hat * (prox_{R/L_hat}(x - grad f(x)/L_hat) - x)``; zero exactly at stationary points."""
    if not problem.L_hat > 0:
        raise ConfigError("L_hat must be > 0")
    step = 1.0 / problem.L_hat
    x = np.asarray(x, dtype=np.float64)
    return problem.L_hat * (problem.prox(x - step * problem.grad(x), step) - x)


@dataclass
class LyapunovBundle:
    """Sequences over a trace of ``K`` updates.

    ``V``, ``X`` and ``Q`` have ``K + 1`` entries (``X[0]`` is unused and 0);
    ``W``, ``p``, ``q``, ``r`` and ``tau`` have ``K``. Statistical bundles
    (built from seed ensembles) also carry per-seed ``V``/``X``/``W`` rows so
    that slacks can be given a standard error.
    """

    V: np.ndarray
    X: np.ndarray
    W: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    tau: np.ndarray
    case: str = "nonconvex"
    samples: dict | None = None
    Q: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("V", "X", "W", "p", "q", "r"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.tau = np.asarray(self.tau, dtype=np.int64)
        K = len(self.W)
        for name, size in (("V", K + 1), ("X", K + 1), ("p", K), ("q", K), ("r", K), ("tau", K)):
            if len(getattr(self, name)) != size:
                raise SequenceError(f"{name} has {len(getattr(self, name))} entries, expected {size}")
        if np.any(self.q <= 0) or np.any(self.q > 1):
            raise SequenceError("q_k must lie in (0, 1]")
        if np.any(self.tau < 0) or np.any(self.tau > np.arange(K)):
            raise SequenceError("delays must satisfy 0 <= tau_k <= k")
        for name in ("V", "X", "W", "p"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                bad = int(np.flatnonzero(~np.isfinite(arr))[0])
                raise SequenceError(f"{name}[{bad}] is not finite")
            if np.any(arr < -DET_TOL):
                bad = int(np.flatnonzero(arr < -DET_TOL)[0])
                raise SequenceError(f"{name}[{bad}] = {arr[bad]!r} is negative")
        self.Q = np.concatenate([[1.0], np.cumprod(self.q)])
        self._logQ = np.concatenate([[0.0], np.cumsum(np.log(self.q))])

    def __len__(self):
        return len(self.W)

    @property
    def statistical(self):
        return self.samples is not None


def _trace_param(trace, name, value):
    if value is not None:
        return float(value)
    if name not in trace.config:
        raise ConfigError(f"{name} is neither given nor recorded in the trace header")
    return float(trace.config[name])


def bundle_from_piag(trace, case="nonconvex", h=None, L=None, p_star=None, sigma=None):
    """Sequences for a PIAG trace; parameters default to the trace header."""
    if case not in CASES:
        raise ConfigError(f"unknown case {case!r}; choose from {', '.join(CASES)}")
    h = _trace_param(trace, "h", h)
    L = _trace_param(trace, "L", L)
    p_star = _trace_param(trace, "p_star", p_star)
    gamma = trace.gamma
    P = trace.objectives_with_final()
    W = np.divide(trace.step_sq, gamma, out=np.zeros_like(gamma), where=gamma > 0)
    X = np.zeros(len(gamma) + 1)
    q = np.ones(len(gamma))
    if case == "nonconvex":
        metric = trace.metrics_with_final()
        V = P - p_star
        X[1:] = 0.5 * gamma * (1 - h) / (h * h - h + 1) * metric[1:] ** 2
        p = 0.5 * gamma * h * L
        r = 0.5 * h * h - p
    elif case == "convex":
        dist = trace.dist_with_final()
        if np.any(np.isnan(dist)):
            raise ConfigError("convex case needs ||x_k - x*||^2 in the trace")
        a0 = h * (h + 1) / (L * (1 - h))
        a = a0 + np.concatenate([[0.0], np.cumsum(gamma)])
        V = a * (P - p_star) + 0.5 * dist
        p = 0.5 * gamma * (a[:-1] * L + 1)
        r = 0.5 * a[:-1] - p
    else:
        sigma = _trace_param(trace, "sigma", sigma)
        ht = 0.5 * (1 + h)
        c = min(1.0, (1 - h) / (2 * h) * L / sigma)
        q = 1.0 / (1.0 + c * sigma * (1 - ht) / (ht * ht - ht + 1) * gamma)
        V = P - p_star
        p = 0.5 * gamma * ht * L
        r = 0.5 * q * ht * ht - p
    return LyapunovBundle(V=V, X=X, W=W, p=p, q=q, r=r, tau=trace.tau, case=case)


def bundle_from_bcd(traces, h=None, L_hat=None, m=None, p_star=None):
    """Expectation sequences for an Async-BCD seed ensemble (across-seed means).

    Every trace must share the delay and step-size schedule.
    """
    traces = list(traces)
    if not traces:
        raise SequenceError("empty ensemble")
    ref = traces[0]
    h = _trace_param(ref, "h", h)
    L_hat = _trace_param(ref, "L_hat", L_hat)
    m = int(_trace_param(ref, "m_blocks", m))
    p_star = _trace_param(ref, "p_star", p_star)
    for t in traces[1:]:
        if len(t) != len(ref) or not np.array_equal(t.tau, ref.tau) or not np.array_equal(t.gamma, ref.gamma):
            raise SequenceError("ensemble traces do not share the delay and step-size schedule")
    gamma = ref.gamma
    Vs = np.array([t.objectives_with_final() - p_star for t in traces])
    Ws = np.array([np.divide(t.step_sq, gamma, out=np.zeros_like(gamma), where=gamma > 0) for t in traces])
    Xs = np.zeros_like(Vs)
    for i, t in enumerate(traces):
        Xs[i, 1:] = gamma * (1 - h) / (4 * m) * t.metric**2
    p = 0.5 * L_hat * gamma
    r = 0.5 * h - p
    samples = {"V": Vs, "X": Xs, "W": Ws} if len(traces) > 1 else None
    return LyapunovBundle(
        V=Vs.mean(axis=0),
        X=Xs.mean(axis=0),
        W=Ws.mean(axis=0),
        p=p,
        q=np.ones(len(gamma)),
        r=r,
        tau=ref.tau,
        case="bcd",
        samples=samples,
    )


@dataclass
class VerifyReport:
    """Per-iteration slacks (``>= -tolerance`` passes) and the fail lists."""

    descent: np.ndarray
    descent_tol: np.ndarray
    step: np.ndarray
    contraction: np.ndarray
    contraction_tol: np.ndarray
    summable: np.ndarray
    summable_tol: np.ndarray
    statistical: bool = False

    def _fails(self, slack, tol):
        return [int(i) for i in np.flatnonzero(slack < -tol)]

    @property
    def descent_fails(self):
        return self._fails(self.descent, self.descent_tol)

    @property
    def step_fails(self):
        return self._fails(self.step, DET_TOL)

    @property
    def contraction_fails(self):
        return self._fails(self.contraction, self.contraction_tol)

    @property
    def summable_fails(self):
        return self._fails(self.summable, self.summable_tol)

    @property
    def fails(self):
        return {
            "descent": self.descent_fails,
            "step": self.step_fails,
            "contraction": self.contraction_fails,
            "summable": self.summable_fails,
        }

    @property
    def passed(self):
        return not any(self.fails.values())

    @property
    def worst_slack(self):
        parts = [a[np.isfinite(a)] for a in (self.descent, self.step, self.contraction, self.summable)]
        parts = [a for a in parts if a.size]
        return float(min(a.min() for a in parts)) if parts else math.inf

    def text(self):
        lines = [f"overall: {'PASS' if self.passed else 'FAIL'}"]
        names = {
            "descent": "descent inequality",
            "step": "step-size condition",
            "contraction": "V_k <= Q_k V_0",
            "summable": "sum X_k/Q_k <= V_0",
        }
        slacks = {
            "descent": self.descent,
            "step": self.step,
            "contraction": self.contraction,
            "summable": self.summable,
        }
        for key, label in names.items():
            bad = self.fails[key]
            finite = slacks[key][np.isfinite(slacks[key])]
            worst = float(finite.min()) if finite.size else math.inf
            status = "ok" if not bad else f"{len(bad)} failures, first at k={bad[0]}"
            lines.append(f"{label}: {status} (worst slack {worst:.6g})")
        if self.statistical:
            lines.append(f"tolerance: {SIGMAS:g} standard errors across seeds + {DET_TOL:g}")
        else:
            lines.append(f"tolerance: {DET_TOL:g} absolute")
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        K = len(self.descent)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"#passed={'true' if self.passed else 'false'}\n")
            fh.write(f"#worst_slack={self.worst_slack!r}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "descent", "descent_tol", "step", "contraction", "contraction_tol", "summable", "summable_tol"])
            for k in range(K + 1):
                row = [k]
                if k < K:
                    row += ["%.17g" % self.descent[k], "%.17g" % self.descent_tol[k], "%.17g" % self.step[k]]
                else:
                    row += ["", "", ""]
                row += [
                    "%.17g" % self.contraction[k],
                    "%.17g" % self.contraction_tol[k],
                    "%.17g" % self.summable[k],
                    "%.17g" % self.summable_tol[k],
                ]
                writer.writerow(row)


def _window_sums(values, tau):
    """``sum_{l=k-tau_k}^{k-1} values_l`` for every ``k``."""
    csum = np.concatenate([[0.0], np.cumsum(values)])
    k = np.arange(len(values))
    return csum[k] - csum[k - tau]


def _descent_slack(V, X, W, p, q, r, tau):
    return q * V[:-1] + p * _window_sums(W, tau) - r * W - (X[1:] + V[1:])


def _mean_se(samples):
    n = samples.shape[0]
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / math.sqrt(n)


def _step_slack(b):
    """Worst slack of the step condition at each ``k``; ``inf`` when ``p_k = 0``.

    Scaled by ``Q_{k+1}``, the condition at ``l`` reads
    ``sum_{t=l+1}^{k} p_t Q_{k+1}/Q_{t+1} <= r_l Q_{k+1}/Q_{l+1}``. For ``l < k``
    this is the stated inequality with ``p_k`` moved to the left; at ``l = k``
    the sum is empty and the condition is ``r_k >= 0``.
    """
    K = len(b)
    logQ = b._logQ
    out = np.full(K, math.inf)
    for k in range(K):
        if b.p[k] == 0:
            continue
        best = b.r[k]
        tail = 0.0
        for ell in range(k - 1, k - int(b.tau[k]) - 1, -1):
            t = ell + 1
            tail += b.p[t] * math.exp(logQ[k + 1] - logQ[t + 1])
            best = min(best, b.r[ell] * math.exp(logQ[k + 1] - logQ[ell + 1]) - tail)
        out[k] = best
    return out


def verify_sequence(bundle, tau=None):
    """Check the descent inequality, the step condition and both conclusions."""
    b = bundle
    if tau is not None and not np.array_equal(np.asarray(tau), b.tau):
        raise SequenceError("delay sequence does not match the bundle")
    K = len(b)
    step = _step_slack(b)
    if b.statistical:
        S = b.samples
        descent_s = np.array(
            [_descent_slack(V, X, W, b.p, b.q, b.r, b.tau) for V, X, W in zip(S["V"], S["X"], S["W"])]
        )
        descent, se = _mean_se(descent_s)
        descent_tol = DET_TOL + SIGMAS * se
        contraction_s = b.Q * S["V"][:, :1] - S["V"]
        contraction, se = _mean_se(contraction_s)
        contraction_tol = DET_TOL + SIGMAS * se
        summable_s = S["V"][:, :1] - np.cumsum(S["X"] / b.Q, axis=1)
        summable, se = _mean_se(summable_s)
        summable_tol = DET_TOL + SIGMAS * se
    else:
        descent = _descent_slack(b.V, b.X, b.W, b.p, b.q, b.r, b.tau)
        descent_tol = np.full(K, DET_TOL)
        contraction = b.Q * b.V[0] - b.V
        contraction_tol = np.full(K + 1, DET_TOL)
        summable = b.V[0] - np.cumsum(b.X / b.Q)
        summable_tol = np.full(K + 1, DET_TOL)
    return VerifyReport(
        descent=descent,
        descent_tol=descent_tol,
        step=step,
        contraction=contraction,
        contraction_tol=contraction_tol,
        summable=summable,
        summable_tol=summable_tol,
        statistical=b.statistical,
    )


# --------------------------------------------------------------------------
# step-size integral bounds


@dataclass
class IntegralBoundReport:
    passed: bool
    integral: np.ndarray
    bound: np.ndarray
    margin: np.ndarray

    @property
    def worst_margin(self):
        return float(self.margin.min()) if self.margin.size else math.inf


def check_integral_bound(gammas, tau, alpha, gamma_prime, policy_kind):
    """Lower bound on ``sum_{t<=k} gamma_t`` for runs whose delays never exceed ``tau``.

    Adaptive 1: ``(k+1) alpha gamma'/(tau+1)``; Adaptive 2: ``(k+1) tau gamma'/(tau+1)^2``.
    Passes when every margin is at least ``-1e-12 * max(1, bound)``.
    """
    g = np.asarray(list(gammas), dtype=np.float64)
    k1 = np.arange(1, len(g) + 1, dtype=np.float64)
    if policy_kind == "adaptive1":
        per_step = alpha * gamma_prime / (tau + 1)
    elif policy_kind == "adaptive2":
        per_step = tau * gamma_prime / (tau + 1) ** 2
    else:
        raise ConfigError(f"no step-size integral bound for policy {policy_kind!r}")
    bound = k1 * per_step
    integral = np.cumsum(g)
    margin = integral - bound
    passed = bool(np.all(margin >= -1e-12 * np.maximum(1.0, bound)))
    return IntegralBoundReport(passed=passed, integral=integral, bound=bound, margin=margin)


# --------------------------------------------------------------------------
# rate bounds on traces


def stationarity_sum_bound(trace, h=None, p_star=None):
    """Partial sums of ``gamma_{k-1} ||grad f(x_k) + xi_k||^2`` and their bound ``2(h^2-h+1)(P_0-P*)/(1-h)``."""
    h = _trace_param(trace, "h", h)
    p_star = _trace_param(trace, "p_star", p_star)
    metric = trace.metrics_with_final()
    partial = np.cumsum(trace.gamma * metric[1:] ** 2)
    bound = 2 * (h * h - h + 1) * (trace.objective[0] - p_star) / (1 - h)
    return partial, bound


def linear_rate_envelope(trace, h=None, L=None, sigma=None, p_star=None):
    """Gaps ``P(x_k) - P*`` and the envelope ``exp(-rate * sum_{t<k} gamma_t) (P_0 - P*)``."""
    h = _trace_param(trace, "h", h)
    L = _trace_param(trace, "L", L)
    sigma = _trace_param(trace, "sigma", sigma)
    p_star = _trace_param(trace, "p_star", p_star)
    ht = 0.5 * (1 + h)
    c = min(1.0, (1 - h) / (2 * h) * L / sigma)
    rate = 3 * c * sigma * (1 - ht) / (4 * (ht * ht - ht + 1))
    gaps = trace.objectives_with_final() - p_star
    integral = np.concatenate([[0.0], np.cumsum(trace.gamma)])
    envelope = np.exp(-rate * integral) * gaps[0]
    return gaps, envelope


def mapping_sum_bound(traces, h=None, m=None, p_star=None):
    """``sum_k gamma_k mean_s ||prox-grad mapping(x_k)||^2`` and its bound ``4m(P_0-P*)/(1-h)``."""
    traces = list(traces)
    ref = traces[0]
    h = _trace_param(ref, "h", h)
    m = int(_trace_param(ref, "m_blocks", m))
    p_star = _trace_param(ref, "p_star", p_star)
    mean_sq = np.mean([t.metric**2 for t in traces], axis=0)
    lhs = float(np.sum(ref.gamma * mean_sq))
    p0 = float(np.mean([t.objective[0] for t in traces]))
    return lhs, 4 * m * (p0 - p_star) / (1 - h)


def iterations_to_gap(trace, gap, p_star=None):
    """First ``k`` with ``P(x_k) - P* <= gap``; ``None`` if never reached."""
    p_star = _trace_param(trace, "p_star", p_star)
    hits = np.flatnonzero(trace.objectives_with_final() - p_star <= gap)
    return int(hits[0]) if hits.size else None
