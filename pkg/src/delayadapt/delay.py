"""Delay sequences injected into the simulators.

Kinds: ``constant`` (tau every step), ``uniform`` (U{0..tau} per step and
worker), ``burst`` (tau at a single iteration, 0 elsewhere), ``cyclic``
(``k mod T``, the divergence counterexample schedule), ``trace`` (replay of
recorded integers) and ``zero``. Emitted values are always clamped to
``[0, k]``.

Random streams are keyed by ``(seed, worker)`` so that adding workers never
perturbs the draws of existing ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DelayError, ParseError

__all__ = [
    "DELAY_KINDS",
    "DelayModel",
    "next_delay",
    "parse_delay_spec",
    "per_worker_delays",
    "read_trace_file",
    "rng_stream",
]

DELAY_KINDS = ("constant", "uniform", "burst", "cyclic", "trace", "zero")

# spawn-key namespaces for rng_stream
STREAM_BLOCKS = 0
STREAM_READS = 1
STREAM_DELAYS = 2

_CHUNK = 4096


def rng_stream(seed, *key):
    """Independent PCG64 generator for ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class DelayModel:
    kind: str
    tau: int = 0
    burst_at: int | None = None
    trace: tuple | None = None
    seed: int = 0
    _uniforms: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise ConfigError(f"unknown delay model {self.kind!r}; choose from {', '.join(DELAY_KINDS)}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.kind == "cyclic" and self.tau < 1:
            raise ConfigError("cyclic delays need a period T >= 1")
        if self.kind == "trace":
            if not self.trace:
                raise ConfigError("trace delay model needs a non-empty trace")
            self.trace = tuple(int(t) for t in self.trace)
            if min(self.trace) < 0:
                raise ConfigError("trace delays must be >= 0")
        if self.kind == "zero":
            self.tau = 0

    @property
    def bound(self):
        """Largest delay this model can emit."""
        if self.kind == "cyclic":
            return self.tau - 1
        if self.kind == "trace":
            return max(self.trace)
        return self.tau

    @property
    def burst_epoch(self):
        """Iteration carrying the burst; pushed to ``tau`` when set earlier."""
        at = self.tau if self.burst_at is None else self.burst_at
        return max(at, self.tau)

    def _uniform(self, k, worker):
        buf = self._uniforms.get(worker)
        if buf is None or k >= len(buf[1]):
            gen, old = buf if buf is not None else (rng_stream(self.seed, STREAM_DELAYS, worker), np.empty(0))
            need = (k // _CHUNK + 1) * _CHUNK - len(old)
            buf = (gen, np.concatenate([old, gen.random(need)]))
            self._uniforms[worker] = buf
        hi = min(self.tau, k)
        return min(int(buf[1][k] * (hi + 1)), hi)

    def delay(self, k, worker=0):
        if k < 0:
            raise DelayError(f"iteration index must be >= 0, got {k}")
        kind = self.kind
        if kind == "zero":
            return 0
        if kind == "constant":
            return min(self.tau, k)
        if kind == "uniform":
            return self._uniform(k, worker)
        if kind == "burst":
            return self.tau if k == self.burst_epoch else 0
        if kind == "cyclic":
            return k % self.tau
        if k >= len(self.trace):
            raise DelayError(f"delay trace exhausted at iteration {k} (length {len(self.trace)})")
        return min(self.trace[k], k)

    def describe(self):
        out = {"delay": self.kind, "tau": self.tau}
        if self.kind == "burst":
            out["burst_at"] = self.burst_epoch
        if self.kind == "uniform":
            out["delay_seed"] = self.seed
        if self.kind == "trace":
            out["trace_len"] = len(self.trace)
        return out


def next_delay(model, k):
    return model.delay(k, 0)


def per_worker_delays(model, k, n):
    """Delays for ``n`` workers at iteration ``k``.

    ``uniform`` draws independently per worker; every other kind shares one
    value. The policy sees the maximum.
    """
    if n < 1:
        raise ConfigError(f"need at least one worker, got {n}")
    if model.kind == "uniform":
        return np.array([model.delay(k, w) for w in range(n)], dtype=np.int64)
    return np.full(n, model.delay(k, 0), dtype=np.int64)


def read_trace_file(path):
    """One non-negative integer per line; blank lines are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                value = int(line)
            except ValueError:
                raise ParseError(f"not an integer: {line!r}", lineno, path) from None
            if value < 0:
                raise ParseError(f"negative delay {value}", lineno, path)
            out.append(value)
    if not out:
        raise ParseError("empty delay trace", path=path)
    return out


def parse_delay_spec(spec, seed=0):
    """Parse ``kind[:tau][@burst_at]``, e.g. ``burst:5@100``, ``uniform:10``, ``cyclic:7``, ``trace:file``."""
    spec = spec.strip()
    kind, _, rest = spec.partition(":")
    if kind == "zero":
        return DelayModel("zero")
    if kind == "trace":
        if not rest:
            raise ConfigError("trace delay model needs a path: trace:<file>")
        return DelayModel("trace", trace=read_trace_file(rest), seed=seed)
    if kind not in DELAY_KINDS:
        raise ConfigError(f"unknown delay model {kind!r} in {spec!r}")
    burst_at = None
    if "@" in rest:
        rest, _, at = rest.partition("@")
        try:
            burst_at = int(at)
        except ValueError:
            raise ConfigError(f"bad burst epoch in {spec!r}") from None
    try:
        tau = int(rest)
    except ValueError:
        raise ConfigError(f"delay spec {spec!r} needs an integer parameter") from None
    return DelayModel(kind, tau=tau, burst_at=burst_at, seed=seed)
