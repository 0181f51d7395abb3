"""Single-threaded PIAG simulator with injected per-worker delays.

The master keeps the latest gradient ``g_i`` of every component together with
the iteration ``s_i`` at which it was evaluated, averages them and takes a
proximal step. Injected delays only move stamps forward: worker ``i`` is
refreshed at step ``k`` when ``k - tau_inj > s_i``, so the delay seen by the
step-size policy is ``tau_k = max_i (k - s_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import RunTrace
from .delay import per_worker_delays
from .errors import CapacityError, ConfigError, DelayError
from .stepsize import GammaHistory, next_step_size

__all__ = ["PiagRecord", "PiagState", "advance", "aggregate", "piag_run", "piag_step", "prox_update"]

# a run is flagged divergent once |P(x_k)| exceeds this multiple of |P(x_0)|
DIVERGENCE_FACTOR = 1e6
# runs stop early beyond this magnitude to keep the arithmetic finite
OVERFLOW_LIMIT = 1e150


def aggregate(grads):
    """Average of the stored component gradients (rows of ``grads``)."""
    return grads.sum(axis=0) / grads.shape[0]


def prox_update(problem, x, g, gamma):
    """``prox_{gamma R}(x - gamma g)``; returns a copy of ``x`` when ``gamma == 0``."""
    if gamma == 0:
        return x.copy()
    return problem.prox(x - gamma * g, gamma)


@dataclass
class PiagRecord:
    k: int
    tau: int
    worker_tau: np.ndarray
    gamma: float
    objective: float
    metric: float
    step_sq: float
    dist_sq: float


class PiagState:
    """Iterate ring buffer, stored gradients with stamps, and the step-size history."""

    def __init__(self, problem, x0=None, capacity=2):
        if capacity < 1:
            raise ConfigError(f"ring capacity must be >= 1, got {capacity}")
        self.problem = problem
        x0 = problem.initial_point() if x0 is None else np.array(x0, dtype=np.float64)
        if x0.shape != (problem.dim,):
            raise ConfigError(f"x0 has shape {x0.shape}, expected ({problem.dim},)")
        self.capacity = int(capacity)
        self.ring = np.empty((self.capacity, problem.dim))
        self.ring[0] = x0
        self.k = 0
        n = problem.n_components
        self.stamps = np.zeros(n, dtype=np.int64)
        self.grads = np.stack([problem.component_grad(i, x0) for i in range(n)])
        self.history = GammaHistory()
        self.xi = None

    @property
    def x(self):
        return self.ring[self.k % self.capacity]

    def iterate(self, t):
        """``x_t`` from the ring; ``t`` must lie in the last ``capacity`` iterations."""
        if not 0 <= self.k - t < self.capacity or t < 0:
            raise CapacityError(self.k - t, self.capacity)
        return self.ring[t % self.capacity]

    def delays(self):
        return self.k - self.stamps


def piag_step(state, policy, delays):
    """Advance ``state`` by one PIAG iteration; returns the step record."""
    problem, k = state.problem, state.k
    delays = np.asarray(delays, dtype=np.int64)
    if delays.shape != (problem.n_components,):
        raise ConfigError(f"need {problem.n_components} delays, got shape {delays.shape}")
    if delays.min() < 0 or delays.max() > k:
        raise DelayError(f"injected delays must lie in [0, {k}], got {delays.tolist()}")
    if delays.max() > state.capacity - 1:
        raise CapacityError(int(delays.max()), state.capacity)
    for i in np.flatnonzero(k - delays > state.stamps):
        s = int(k - delays[i])
        state.grads[i] = problem.component_grad(int(i), state.iterate(s))
        state.stamps[i] = s
    return advance(state, policy)


def advance(state, policy):
    """Step-size, proximal step and record from the stored gradients and stamps."""
    problem, k = state.problem, state.k
    worker_tau = state.delays()
    tau = int(worker_tau.max())
    gamma = next_step_size(policy, state.history, k, tau)
    x = state.x
    g = aggregate(state.grads)
    objective, full_grad = problem.objective_and_grad(x)
    xi = state.xi
    metric = problem.stationarity(x, full_grad) if xi is None else float(np.linalg.norm(full_grad + xi))
    x_new = prox_update(problem, x, g, gamma)
    if gamma > 0:
        state.xi = -(x_new - x) / gamma - g
    elif state.xi is None:
        state.xi = _min_norm_subgradient(problem, x, full_grad)
    step = x_new - x
    x_star = problem.x_star
    record = PiagRecord(
        k=k,
        tau=tau,
        worker_tau=worker_tau.copy(),
        gamma=gamma,
        objective=objective,
        metric=metric,
        step_sq=float(step @ step),
        dist_sq=math.nan if x_star is None else float((x - x_star) @ (x - x_star)),
    )
    state.history.append(gamma)
    state.k = k + 1
    state.ring[state.k % state.capacity] = x_new
    return record


def _min_norm_subgradient(problem, x, grad):
    """``xi`` in the subdifferential of ``R`` at ``x`` minimising ``||grad + xi||``."""
    if problem.lam1 == 0:
        return np.zeros_like(x)
    lam = problem.lam1
    return np.where(x != 0, lam * np.sign(x), np.clip(-grad, -lam, lam))


def _final_state(state):
    problem, x = state.problem, state.x
    if state.xi is None:
        metric = problem.stationarity(x)
    else:
        metric = float(np.linalg.norm(problem.grad(x) + state.xi))
    out = {"objective": problem.objective(x), "metric": metric, "x": x.copy()}
    if problem.x_star is not None:
        out["dist_sq"] = float((x - problem.x_star) @ (x - problem.x_star))
    else:
        out["dist_sq"] = math.nan
    return out


def piag_run(
    problem,
    delay_model,
    policy,
    k_max,
    x0=None,
    capacity=None,
    stop_on_divergence=True,
    stop_gap=None,
):
    """Run ``k_max`` PIAG iterations and return the :class:`RunTrace`.

    ``capacity`` defaults to the delay model's bound plus two. The final
    record carries ``diverged`` when some ``|P(x_k)|`` exceeded
    ``1e6 * |P(x_0)|``; with ``stop_on_divergence`` the run also ends early
    once ``P(x_k)`` is non-finite or beyond ``1e150``. With ``stop_gap`` the
    run ends after the first update from an iterate with ``P(x_k) - P* <= stop_gap``.
    """
    if k_max < 1:
        raise ConfigError(f"k_max must be >= 1, got {k_max}")
    if capacity is None:
        capacity = delay_model.bound + 2
    state = PiagState(problem, x0=x0, capacity=capacity)
    n = problem.n_components
    rows, wt = [], []
    diverged = False
    p0 = None
    for k in range(k_max):
        rec = piag_step(state, policy, per_worker_delays(delay_model, k, n))
        if p0 is None:
            p0 = rec.objective
        diverged = diverged or is_divergent(rec.objective, p0)
        rows.append(
            {
                "k": rec.k,
                "block": -1,
                "tau": rec.tau,
                "gamma": rec.gamma,
                "objective": rec.objective,
                "metric": rec.metric,
                "step_sq": rec.step_sq,
                "dist_sq": rec.dist_sq,
            }
        )
        wt.append(rec.worker_tau)
        if stop_on_divergence and not abs(rec.objective) < OVERFLOW_LIMIT:
            break
        if stop_gap is not None and rec.objective - problem.p_star <= stop_gap:
            break
    config = {"algo": "piag", "backend": "sim", "n_workers": n, "capacity": capacity}
    if stop_gap is not None:
        config["stop_gap"] = stop_gap
    config.update(problem.describe())
    config.update(policy.describe())
    config.update(delay_model.describe())
    final = _final_state(state)
    final["diverged"] = diverged or is_divergent(final["objective"], p0)
    return RunTrace.from_rows(rows, config=config, final=final, worker_tau=np.array(wt))


def is_divergent(value, p0):
    return not math.isfinite(value) or abs(value) > DIVERGENCE_FACTOR * max(abs(p0), 1e-300)
