"""Delay-adaptive step-size policies.

Every policy maps ``(history, k, tau_k)`` to ``gamma_k``. The adaptive
policies only look at the delays that actually occurred; the fixed baselines
need a declared delay bound.

The step-size principle requires

    0 <= gamma_k <= max(0, gamma' - sum_{t=k-tau_k}^{k-1} gamma_t).

Window sums are formed with :func:`math.fsum`, and the caps handed out by
the principle-respecting policies are rounded towards zero, so the
inequality holds in exact arithmetic on the stored floats, not just up to
rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DelayError

__all__ = [
    "GammaHistory",
    "PolicyConfig",
    "POLICY_KINDS",
    "PRINCIPLE_KINDS",
    "adaptive1",
    "adaptive2",
    "fixed_baseline",
    "make_policy",
    "naive",
    "next_step_size",
    "principle_cap",
    "principle_holds",
    "step_size_sequence",
    "window_sum",
]

POLICY_KINDS = ("adaptive1", "adaptive2", "fixed", "fixed-sun", "fixed-davis", "naive")
# Kinds that satisfy the principle by construction (``fixed`` only while tau_k <= tau_bound).
PRINCIPLE_KINDS = ("adaptive1", "adaptive2", "fixed")


class GammaHistory:
    """Append-only log of step-sizes ``gamma_0 .. gamma_{k-1}``."""

    __slots__ = ("_gammas",)

    def __init__(self, gammas=()):
        self._gammas = []
        for g in gammas:
            self.append(g)

    def append(self, gamma):
        gamma = float(gamma)
        if not (gamma >= 0 and math.isfinite(gamma)):
            raise ConfigError(f"step-sizes must be finite and >= 0, got {gamma!r}")
        self._gammas.append(gamma)

    def __len__(self):
        return len(self._gammas)

    def __getitem__(self, idx):
        return self._gammas[idx]

    def __iter__(self):
        return iter(self._gammas)

    def window(self, k, tau):
        """The stored values ``gamma_{k-tau} .. gamma_{k-1}``."""
        if tau < 0 or tau > k:
            raise DelayError(f"delay {tau} outside [0, {k}] at iteration {k}")
        if k > len(self._gammas):
            raise DelayError(f"history holds {len(self._gammas)} step-sizes, asked for k={k}")
        return self._gammas[k - tau : k]

    def window_sum(self, k, tau):
        return math.fsum(self.window(k, tau))

    def integral(self):
        """Running sums ``sum_{t<=k} gamma_t`` for every stored ``k``."""
        return np.cumsum(self._gammas)

    def as_array(self):
        return np.array(self._gammas, dtype=np.float64)


def window_sum(history, k, tau):
    """``sum_{t=k-tau}^{k-1} gamma_t``; 0 when ``tau == 0``."""
    return history.window_sum(k, tau)


def _exact_cap(gamma_prime, window):
    """Largest float ``<=`` the exact value of ``max(0, gamma' - sum(window))``."""
    cap = math.fsum([gamma_prime, *(-g for g in window)])
    if cap <= 0:
        return 0.0
    # fsum is correctly rounded; step down if it rounded up
    if math.fsum([cap, -gamma_prime, *window]) > 0:
        cap = math.nextafter(cap, 0.0)
    return cap


def _fits(value, gamma_prime, window):
    """Exact test of ``value <= gamma' - sum(window)``."""
    return math.fsum([gamma_prime, -value, *(-g for g in window)]) >= 0


def principle_cap(gamma_prime, window):
    """``max(0, gamma' - window)`` for a precomputed window sum."""
    return max(0.0, gamma_prime - window)


def principle_holds(history, k, tau, gamma, gamma_prime):
    """Exact check of ``0 <= gamma <= max(0, gamma' - window)`` against ``history``."""
    if gamma < 0:
        return False
    if gamma == 0:
        return True
    return _fits(gamma, gamma_prime, history.window(k, tau))


def _floor_share(gamma_prime, parts):
    """``gamma'/parts`` rounded so that ``parts * value <= gamma'`` holds exactly."""
    value = gamma_prime / parts
    while math.fsum([gamma_prime, *([-value] * parts)]) < 0:
        value = math.nextafter(value, 0.0)
    return value


@dataclass(frozen=True)
class PolicyConfig:
    """Parameters of one step-size policy.

    ``gamma_prime`` is the delay-free cap (``h/L`` for PIAG, ``h/L_hat`` for
    Async-BCD). ``tau_bound`` is read by the fixed baselines only; ``L``,
    ``L_hat`` and ``m`` feed the literature baselines.
    """

    kind: str
    gamma_prime: float
    alpha: float = 1.0
    h: float | None = None
    tau_bound: int | None = None
    c: float = 1.0
    b: float = 1.0
    L: float | None = None
    L_hat: float | None = None
    m: int | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {self.kind!r}; choose from {', '.join(POLICY_KINDS)}")
        if not self.gamma_prime > 0:
            raise ConfigError(f"gamma_prime must be > 0, got {self.gamma_prime!r}")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha!r}")
        if self.h is not None and not 0 < self.h < 1:
            raise ConfigError(f"h must lie in (0, 1), got {self.h!r}")
        if self.kind == "naive" and not (self.c > 0 and self.b > 0):
            raise ConfigError("naive policy needs c > 0 and b > 0")
        if self.tau_bound is not None and self.tau_bound < 0:
            raise ConfigError(f"tau_bound must be >= 0, got {self.tau_bound!r}")

    @property
    def respects_principle(self):
        return self.kind in PRINCIPLE_KINDS

    def describe(self):
        out = {"policy": self.kind, "gamma_prime": self.gamma_prime}
        if self.kind == "adaptive1":
            out["alpha"] = self.alpha
        if self.h is not None:
            out["h"] = self.h
        if self.kind in ("fixed", "fixed-sun", "fixed-davis"):
            out["tau_bound"] = self.tau_bound
        if self.kind == "naive":
            out["c"], out["b"] = self.c, self.b
        return out


def adaptive1(cfg, history, k, tau_k):
    """``alpha * max(gamma' - window, 0)``."""
    return cfg.alpha * _exact_cap(cfg.gamma_prime, history.window(k, tau_k))


def adaptive2(cfg, history, k, tau_k):
    """``gamma'/(tau_k+1)`` if it fits under the cap, otherwise 0 (ties fit)."""
    candidate = _floor_share(cfg.gamma_prime, tau_k + 1)
    if _fits(candidate, cfg.gamma_prime, history.window(k, tau_k)):
        return candidate
    return 0.0


def naive(cfg, tau_k):
    """``c/(tau_k + b)`` -- diverges on suitable delay patterns; negative control only."""
    return cfg.c / (tau_k + cfg.b)


def fixed_baseline(cfg):
    """Constant step-size for the ``fixed``, ``fixed-sun`` and ``fixed-davis`` kinds."""
    if cfg.tau_bound is None:
        raise ConfigError(f"policy {cfg.kind!r} needs tau_bound")
    tau = cfg.tau_bound
    if cfg.kind == "fixed":
        return _floor_share(cfg.gamma_prime, tau + 1)
    if cfg.h is None or cfg.L is None:
        raise ConfigError(f"policy {cfg.kind!r} needs h and L")
    if cfg.kind == "fixed-sun":
        return cfg.h / (cfg.L * (tau + 0.5))
    if cfg.kind == "fixed-davis":
        if cfg.L_hat is None or cfg.m is None:
            raise ConfigError("policy 'fixed-davis' needs L_hat and m")
        return cfg.h / (cfg.L_hat + 2.0 * cfg.L * tau / math.sqrt(cfg.m))
    raise ConfigError(f"{cfg.kind!r} is not a fixed baseline")


def next_step_size(cfg, history, k, tau_k):
    """Dispatch on ``cfg.kind``; ``history`` must hold exactly ``k`` entries."""
    if tau_k < 0 or tau_k > k:
        raise DelayError(f"delay {tau_k} outside [0, {k}] at iteration {k}")
    kind = cfg.kind
    if kind == "adaptive1":
        gamma = adaptive1(cfg, history, k, tau_k)
    elif kind == "adaptive2":
        gamma = adaptive2(cfg, history, k, tau_k)
    elif kind == "naive":
        return naive(cfg, tau_k)
    else:
        return fixed_baseline(cfg)
    assert principle_holds(history, k, tau_k, gamma, cfg.gamma_prime), (k, tau_k, gamma)
    return gamma


def make_policy(kind, problem, algo="piag", h=0.99, alpha=0.9, tau_bound=None, c=1.0, b=1.0):
    """Build a :class:`PolicyConfig` with ``gamma' = h/L`` (PIAG) or ``h/L_hat`` (BCD)."""
    if algo not in ("piag", "bcd"):
        raise ConfigError(f"unknown algorithm {algo!r}")
    const = problem.L if algo == "piag" else problem.L_hat
    return PolicyConfig(
        kind=kind,
        gamma_prime=h / const,
        alpha=alpha,
        h=h,
        tau_bound=tau_bound,
        c=c,
        b=b,
        L=problem.L,
        L_hat=problem.L_hat,
        m=problem.m,
    )


def step_size_sequence(cfg, taus):
    """Step-sizes produced by ``cfg`` along the delay sequence ``taus``."""
    history = GammaHistory()
    for k, tau in enumerate(taus):
        history.append(next_step_size(cfg, history, k, int(tau)))
    return history.as_array()
