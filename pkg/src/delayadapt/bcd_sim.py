"""Single-threaded Async-BCD simulator with stale and inconsistent reads.

At step ``k`` a block ``j`` is drawn uniformly, the delay ``tau_k`` comes from
the delay model and the read ``x_hat`` is assembled from the recent update
deltas ``d_t = x_{t+1} - x_t``:

    x_hat = x_k - sum_{t in J} d_t,   J within [k - tau_k, k - 1],

with ``k - tau_k`` always in ``J``. A consistent read uses the whole window
(``x_hat = x_{k - tau_k}``); an inconsistent read keeps every other index
independently with probability ``p``. Only block ``j`` changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analysis import prox_grad_mapping
from .dataio import RunTrace
from .delay import STREAM_BLOCKS, STREAM_READS, rng_stream
from .errors import CapacityError, ConfigError, DelayError
from .stepsize import GammaHistory, next_step_size

__all__ = ["BcdRecord", "BcdState", "bcd_run", "bcd_step", "block_update", "prox_grad_norm"]


def prox_grad_norm(problem, x):
    """``||L_hat (prox_{R/L_hat}(x - grad f(x)/L_hat) - x)||``."""
    return float(np.linalg.norm(prox_grad_mapping(problem, x)))


def block_update(problem, x, j, gamma, grad):
    """New values of block ``j``: ``prox_{gamma R}(x_j - gamma grad)``."""
    blk = problem.blocks[j]
    if gamma == 0:
        return x[blk].copy()
    return problem.prox(x[blk] - gamma * grad, gamma)


@dataclass
class BcdRecord:
    k: int
    block: int
    tau: int
    gamma: float
    read_set: tuple
    x_hat: np.ndarray
    objective: float
    metric: float
    step_sq: float
    dist_sq: float


class BcdState:
    """Current iterate, rings of recent iterates and deltas, step-size history, RNG streams."""

    def __init__(self, problem, x0=None, capacity=2, seed=0, consistent=True, p=0.5):
        if capacity < 1:
            raise ConfigError(f"ring capacity must be >= 1, got {capacity}")
        if not 0 <= p <= 1:
            raise ConfigError(f"inclusion probability must lie in [0, 1], got {p}")
        self.problem = problem
        x0 = problem.initial_point() if x0 is None else np.array(x0, dtype=np.float64)
        if x0.shape != (problem.dim,):
            raise ConfigError(f"x0 has shape {x0.shape}, expected ({problem.dim},)")
        self.capacity = int(capacity)
        self.ring = np.empty((self.capacity, problem.dim))
        self.ring[0] = x0
        self.deltas = np.zeros((self.capacity, problem.dim))
        self.k = 0
        self.history = GammaHistory()
        self.consistent = consistent
        self.p = float(p)
        self.block_rng = rng_stream(seed, STREAM_BLOCKS, 0)
        self.read_rng = rng_stream(seed, STREAM_READS)

    @property
    def x(self):
        return self.ring[self.k % self.capacity]

    def iterate(self, t):
        if t < 0 or not 0 <= self.k - t < self.capacity:
            raise CapacityError(self.k - t, self.capacity)
        return self.ring[t % self.capacity]

    def delta(self, t):
        if t < 0 or not 0 < self.k - t < self.capacity:
            raise CapacityError(self.k - t, self.capacity)
        return self.deltas[t % self.capacity]

    def draw_read_set(self, tau):
        """The index set ``J`` for a read with delay ``tau`` (empty when ``tau == 0``)."""
        k = self.k
        if tau == 0:
            return ()
        if self.consistent:
            return tuple(range(k - tau, k))
        keep = self.read_rng.random(tau - 1) < self.p
        return (k - tau,) + tuple(t for t, kept in zip(range(k - tau + 1, k), keep) if kept)

    def read(self, tau, read_set):
        """``x_hat = x_{k-tau} + sum of deltas in the window that are not in J``."""
        k = self.k
        x_hat = self.iterate(k - tau).copy()
        skipped = sorted(set(range(k - tau, k)) - set(read_set))
        for t in skipped:
            x_hat += self.delta(t)
        return x_hat


def _dist_sq(problem, x):
    if problem.x_star is None:
        return math.nan
    diff = x - problem.x_star
    return float(diff @ diff)


def bcd_step(state, policy, tau):
    """Advance ``state`` by one Async-BCD iteration with read delay ``tau``."""
    problem, k = state.problem, state.k
    tau = int(tau)
    if not 0 <= tau <= k:
        raise DelayError(f"delay {tau} outside [0, {k}] at iteration {k}")
    if tau > state.capacity - 1:
        raise CapacityError(tau, state.capacity)
    j = int(state.block_rng.integers(problem.m))
    read_set = state.draw_read_set(tau)
    x = state.x
    x_hat = state.read(tau, read_set) if tau else x.copy()
    gamma = next_step_size(policy, state.history, k, tau)
    x_new = x.copy()
    blk = problem.blocks[j]
    x_new[blk] = block_update(problem, x, j, gamma, problem.block_grad(x_hat, j))
    delta = x_new - x
    record = BcdRecord(
        k=k,
        block=j,
        tau=tau,
        gamma=gamma,
        read_set=read_set,
        x_hat=x_hat,
        objective=problem.objective(x),
        metric=prox_grad_norm(problem, x),
        step_sq=float(delta @ delta),
        dist_sq=_dist_sq(problem, x),
    )
    state.history.append(gamma)
    state.deltas[k % state.capacity] = delta
    state.k = k + 1
    state.ring[state.k % state.capacity] = x_new
    return record


def bcd_run(
    problem,
    delay_model,
    policy,
    k_max,
    seed=0,
    x0=None,
    capacity=None,
    consistent=False,
    p=0.5,
    records=None,
    stop_gap=None,
):
    """Run ``k_max`` Async-BCD iterations and return the :class:`RunTrace`.

    Block choices come from the ``(seed, blocks, 0)`` stream and read sets
    from ``(seed, reads)``; the delay model carries its own seed. Pass a list
    as ``records`` to collect the full :class:`BcdRecord` of every step.
    ``stop_gap`` ends the run after the first update from an iterate with
    ``P(x_k) - P* <= stop_gap``.
    """
    if k_max < 1:
        raise ConfigError(f"k_max must be >= 1, got {k_max}")
    if capacity is None:
        capacity = delay_model.bound + 2
    state = BcdState(problem, x0=x0, capacity=capacity, seed=seed, consistent=consistent, p=p)
    rows = []
    for k in range(k_max):
        rec = bcd_step(state, policy, delay_model.delay(k, 0))
        if records is not None:
            records.append(rec)
        rows.append(
            {
                "k": rec.k,
                "block": rec.block,
                "tau": rec.tau,
                "gamma": rec.gamma,
                "objective": rec.objective,
                "metric": rec.metric,
                "step_sq": rec.step_sq,
                "dist_sq": rec.dist_sq,
            }
        )
        if stop_gap is not None and rec.objective - problem.p_star <= stop_gap:
            break
    config = {
        "algo": "bcd",
        "backend": "sim",
        "seed": seed,
        "read": "consistent" if consistent else "inconsistent",
        "capacity": capacity,
    }
    if not consistent:
        config["p_include"] = p
    if stop_gap is not None:
        config["stop_gap"] = stop_gap
    config.update(problem.describe())
    config.update(policy.describe())
    config.update(delay_model.describe())
    x = state.x
    final = {
        "objective": problem.objective(x),
        "metric": prox_grad_norm(problem, x),
        "dist_sq": _dist_sq(problem, x),
        "x": x.copy(),
    }
    return RunTrace.from_rows(rows, config=config, final=final)
