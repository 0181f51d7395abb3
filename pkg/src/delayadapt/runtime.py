"""Multi-threaded backends with measured delays.

* :func:`run_parameter_server` -- PIAG. A coordinator thread owns the iterate,
  the stored gradients and their stamps; workers receive ``(x_k, k)``, return
  ``(grad f_i(x_k), k)`` and never share mutable state.
* :func:`run_shared_memory` -- Async-BCD. Workers read the iteration counter
  and then the shared iterate, compute a block gradient, and enter one
  critical section that covers the step-size computation, the block write and
  the counter increment.

Both return the run trace and an :class:`EventLog` from which every recorded
delay can be reconstructed independently.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
import traceback
from dataclasses import dataclass, field

import numpy as np

from .bcd_sim import block_update, prox_grad_norm
from .dataio import RunTrace
from .delay import STREAM_BLOCKS, rng_stream
from .errors import ConfigError, WorkerError
from .piag_sim import PiagState, advance
from .stepsize import GammaHistory, next_step_size, principle_holds

__all__ = [
    "EventLog",
    "StampedGradient",
    "audit_delays",
    "audit_principle",
    "run_parameter_server",
    "run_shared_memory",
]

log = logging.getLogger(__name__)

_STOP = None


@dataclass(frozen=True)
class StampedGradient:
    worker_id: int
    grad: np.ndarray
    stamp: int


@dataclass
class EventLog:
    """Ordered ``(type, worker, k, extra)`` records; ``type`` is read, write or gamma.

    ``read(w, k)``: worker ``w`` obtained ``x_k``. ``write(w, k, extra)``:
    the contribution of ``w`` entered update ``k`` (``extra`` is the block for
    Async-BCD). ``gamma(-1, k, "tau gamma")``: the step taken at ``k``.
    """

    events: list = field(default_factory=list)

    def read(self, worker, k):
        self.events.append(("read", worker, k, ""))

    def write(self, worker, k, extra=""):
        self.events.append(("write", worker, k, extra))

    def gamma(self, k, tau, gamma):
        self.events.append(("gamma", -1, k, f"{tau} {gamma!r}"))

    def __len__(self):
        return len(self.events)

    def dump(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for kind, worker, k, extra in self.events:
                fh.write(f"{kind}\t{worker}\t{k}\t{extra}\n")

    @classmethod
    def load(cls, path):
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                kind, worker, k, extra = line.rstrip("\n").split("\t")
                out.events.append((kind, int(worker), int(k), extra))
        return out

    def check_interleaving(self):
        """Per worker, reads and writes alternate starting with a read."""
        last = {}
        for kind, worker, _, _ in self.events:
            if kind not in ("read", "write"):
                continue
            prev = last.get(worker, "write")
            if prev == kind:
                return False
            last[worker] = kind
        return True


def audit_delays(trace, events):
    """Recompute delays from the event log; returns the indices ``k`` that disagree.

    Parameter server: the stamp of worker ``w`` at update ``k`` is the
    iteration of the read preceding its latest write (initially 0), and the
    per-worker delay is ``k`` minus that stamp. Shared memory: the delay of
    update ``k`` is ``k`` minus the iteration of the writer's preceding read.
    """
    algo = trace.config.get("algo")
    mismatches = []
    last_read = {}
    if algo == "piag":
        n = trace.worker_tau.shape[1]
        stamps = np.zeros(n, dtype=np.int64)
        for kind, worker, k, _ in events.events:
            if kind == "read":
                last_read[worker] = k
            elif kind == "write":
                stamps[worker] = last_read[worker]
            else:
                taus = k - stamps
                if not np.array_equal(taus, trace.worker_tau[k]) or taus.max() != trace.tau[k]:
                    mismatches.append(k)
    else:
        for kind, worker, k, _ in events.events:
            if kind == "read":
                last_read[worker] = k
            elif kind == "write":
                if k - last_read[worker] != trace.tau[k]:
                    mismatches.append(k)
    return mismatches


def audit_principle(trace, gamma_prime):
    """Indices ``k`` whose recorded ``(tau_k, gamma_k)`` break the step-size principle."""
    history = GammaHistory()
    bad = []
    for k, (tau, gamma) in enumerate(zip(trace.tau.tolist(), trace.gamma.tolist())):
        if not principle_holds(history, k, tau, gamma, gamma_prime):
            bad.append(k)
        history.append(gamma)
    return bad


def _row(k, block, rec_tau, gamma, objective, metric, step_sq, dist_sq):
    return {
        "k": k,
        "block": block,
        "tau": rec_tau,
        "gamma": gamma,
        "objective": objective,
        "metric": metric,
        "step_sq": step_sq,
        "dist_sq": dist_sq,
    }


def _dist_sq(problem, x):
    if problem.x_star is None:
        return math.nan
    diff = x - problem.x_star
    return float(diff @ diff)


def run_parameter_server(problem, policy, n_workers, k_max, x0=None):
    """Threaded PIAG; one worker per component (``n_workers`` must equal ``n``).

    Each iteration waits for at least one return, folds in everything that has
    arrived, takes a step and pushes ``(x_{k+1}, k+1)`` back to the workers
    that returned.
    """
    if n_workers < 1:
        raise ConfigError(f"need at least one worker, got {n_workers}")
    if n_workers != problem.n_components:
        raise ConfigError(
            f"parameter server runs one worker per component: {n_workers} workers, "
            f"{problem.n_components} components"
        )
    if k_max < 1:
        raise ConfigError(f"k_max must be >= 1, got {k_max}")
    state = PiagState(problem, x0=x0, capacity=1)
    events = EventLog()
    outbox = queue.SimpleQueue()
    inboxes = [queue.SimpleQueue() for _ in range(n_workers)]

    def worker(w):
        try:
            while True:
                msg = inboxes[w].get()
                if msg is _STOP:
                    return
                x, stamp = msg
                outbox.put(StampedGradient(w, problem.component_grad(w, x), stamp))
        except Exception:  # reported to the coordinator, which aborts the run
            outbox.put(("error", w, traceback.format_exc()))

    threads = [threading.Thread(target=worker, args=(w,), daemon=True, name=f"ps-worker-{w}") for w in range(n_workers)]
    for t in threads:
        t.start()
    rows, wt = [], []
    try:
        x_send = state.x.copy()
        for w in range(n_workers):
            events.read(w, 0)
            inboxes[w].put((x_send, 0))
        for k in range(k_max):
            batch = [outbox.get()]
            while True:
                try:
                    batch.append(outbox.get_nowait())
                except queue.Empty:
                    break
            for msg in batch:
                if isinstance(msg, tuple):
                    raise WorkerError(f"worker {msg[1]} failed:\n{msg[2]}")
                state.grads[msg.worker_id] = msg.grad
                state.stamps[msg.worker_id] = msg.stamp
                events.write(msg.worker_id, k)
            rec = advance(state, policy)
            events.gamma(k, rec.tau, rec.gamma)
            rows.append(_row(k, -1, rec.tau, rec.gamma, rec.objective, rec.metric, rec.step_sq, rec.dist_sq))
            wt.append(rec.worker_tau)
            x_send = state.x.copy()
            if k + 1 < k_max:
                for msg in batch:
                    events.read(msg.worker_id, k + 1)
                    inboxes[msg.worker_id].put((x_send, k + 1))
    finally:
        for box in inboxes:
            box.put(_STOP)
        for t in threads:
            t.join()
    x = state.x
    final = {
        "objective": problem.objective(x),
        "metric": float(np.linalg.norm(problem.grad(x) + state.xi)),
        "dist_sq": _dist_sq(problem, x),
        "x": x.copy(),
    }
    config = {"algo": "piag", "backend": "threads", "n_workers": n_workers}
    config.update(problem.describe())
    config.update(policy.describe())
    trace = RunTrace.from_rows(rows, config=config, final=final, worker_tau=np.array(wt))
    log.debug("parameter server: %d updates, max delay %d", k_max, int(trace.tau.max()))
    return trace, events


def run_shared_memory(problem, policy, n_workers, k_max, seed=0, x0=None):
    """Threaded Async-BCD on a shared iterate.

    Worker ``i`` draws blocks from the ``(seed, blocks, i)`` stream, so a
    single-worker run follows the same block sequence as the simulator.
    """
    if n_workers < 1:
        raise ConfigError(f"need at least one worker, got {n_workers}")
    if problem.m < 1:
        raise ConfigError("need at least one block")
    if k_max < 1:
        raise ConfigError(f"k_max must be >= 1, got {k_max}")
    x = problem.initial_point() if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (problem.dim,):
        raise ConfigError(f"x0 has shape {x.shape}, expected ({problem.dim},)")
    lock = threading.Lock()
    history = GammaHistory()
    events = EventLog()
    rows = []
    counter = [0]
    failures = []
    stop = threading.Event()

    def worker(i):
        rng = rng_stream(seed, STREAM_BLOCKS, i)
        try:
            while not stop.is_set():
                s = counter[0]
                x_hat = x.copy()
                events.read(i, s)
                j = int(rng.integers(problem.m))
                grad = problem.block_grad(x_hat, j)
                with lock:
                    k = counter[0]
                    if k >= k_max:
                        stop.set()
                        # the read above never turns into a write
                        events.events.append(("abandon", i, k, ""))
                        return
                    tau = k - s
                    gamma = next_step_size(policy, history, k, tau)
                    blk = problem.blocks[j]
                    new = block_update(problem, x, j, gamma, grad)
                    step = new - x[blk]
                    rows.append(
                        _row(
                            k,
                            j,
                            tau,
                            gamma,
                            problem.objective(x),
                            prox_grad_norm(problem, x),
                            float(step @ step),
                            _dist_sq(problem, x),
                        )
                    )
                    x[blk] = new
                    history.append(gamma)
                    events.write(i, k, str(j))
                    events.gamma(k, tau, gamma)
                    counter[0] = k + 1
        except Exception:
            failures.append((i, traceback.format_exc()))
            stop.set()

    threads = [threading.Thread(target=worker, args=(i,), daemon=True, name=f"bcd-worker-{i}") for i in range(n_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        i, tb = failures[0]
        raise WorkerError(f"worker {i} failed:\n{tb}")
    final = {
        "objective": problem.objective(x),
        "metric": prox_grad_norm(problem, x),
        "dist_sq": _dist_sq(problem, x),
        "x": x.copy(),
    }
    config = {"algo": "bcd", "backend": "threads", "n_workers": n_workers, "seed": seed}
    config.update(problem.describe())
    config.update(policy.describe())
    trace = RunTrace.from_rows(rows, config=config, final=final)
    log.debug("shared memory: %d updates, max delay %d", k_max, int(trace.tau.max()))
    return trace, events
