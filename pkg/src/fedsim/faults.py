"""Failure modelling, checkpoint-interval selection and client recovery.

Failures follow a Weibull law with scale ``lam`` (simulated seconds) and
shape ``k``. Two checkpoint cost models are available:

* ``literal``:   C(t) = t / T + p_f(t) * t_r / T
* ``amortized``: C(t) = t_w / t + p_f(t) * t_r / T

The literal form is nondecreasing in ``t`` for every ``lam, k > 0`` so its
minimum always sits on the lower search bound; the amortized form charges a
write cost ``t_w`` once per interval and has an interior optimum whenever
recovery is expensive enough.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import (
    ArgumentError,
    CheckpointNotFound,
    ClientAbandoned,
    DegenerateDataError,
    EstimationError,
    StateError,
)
from .nn import AdamState

log = logging.getLogger(__name__)

INTERIOR = "interior_minimum"
BOUNDARY = "boundary_minimum"
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class WeibullModel:
    lam: float
    k: float

    def __post_init__(self):
        for name in ("lam", "k"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ArgumentError(f"Weibull {name} must be positive and finite, got {v}")

    def mean(self):
        return self.lam * math.gamma(1.0 + 1.0 / self.k)


def failure_probability(model, t_c):
    """P(failure within an interval of length ``t_c``) = 1 - exp(-(t_c/lam)^k)."""
    t = np.asarray(t_c, dtype=np.float64)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ArgumentError("t_c must be >= 0")
    p = -np.expm1(-((t / model.lam) ** model.k))
    return float(p) if p.ndim == 0 else p


def failure_density(model, t):
    t = np.asarray(t, dtype=np.float64)
    z = t / model.lam
    return model.k / model.lam * z ** (model.k - 1.0) * np.exp(-(z ** model.k))


def inverse_cdf(model, u):
    return model.lam * (-math.log1p(-u)) ** (1.0 / model.k)


def sample_failure_time(model, rng):
    """Inverse-CDF draw: lam * (-ln(1 - u))^(1/k) with u ~ U[0, 1)."""
    return inverse_cdf(model, rng.random())


def estimate_weibull(failure_times, fixed_k=None, tol=1e-10, max_iter=200):
    """Maximum-likelihood Weibull fit.

    ``k`` solves the profile score equation
    ``1/k + mean(ln t) - sum(t^k ln t) / sum(t^k) = 0`` by damped Newton
    steps; ``lam = mean(t^k)^(1/k)``. Pass ``fixed_k`` to fit the scale only.
    """
    t = np.asarray(failure_times, dtype=np.float64).ravel()
    if t.size < 3:
        raise ArgumentError("need at least 3 failure times")
    if np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ArgumentError("failure times must be positive and finite")
    # work in units of the largest sample so t^k never overflows
    scale = float(t.max())
    x = t / scale
    logs = np.log(x)
    if fixed_k is not None:
        k = float(fixed_k)
        if not k > 0:
            raise ArgumentError("fixed_k must be positive")
    else:
        spread = float(np.std(logs))
        if spread == 0.0:
            raise DegenerateDataError("all failure times are identical; shape diverges")
        k = 1.2825 / spread  # moment estimate from the spread of log-times
        mean_log = float(np.mean(logs))
        for _ in range(max_iter):
            xk = x ** k
            s0 = xk.sum()
            s1 = (xk * logs).sum()
            s2 = (xk * logs * logs).sum()
            score = 1.0 / k + mean_log - s1 / s0
            slope = -1.0 / k ** 2 - (s2 * s0 - s1 * s1) / s0 ** 2
            step = -score / slope
            # damping: never shrink or grow k by more than a factor of 2 per step
            step = min(max(step, -0.5 * k), k)
            k += step
            if abs(step) <= tol * max(1.0, k):
                break
        else:
            raise EstimationError(f"shape estimate did not converge in {max_iter} iterations")
    lam = float(np.mean(x ** k)) ** (1.0 / k) * scale
    return WeibullModel(lam, k)


@dataclass(frozen=True)
class CostModelConfig:
    T: float
    t_r: float
    t_w: float | None = None
    mode: str = "amortized"
    search_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in ("literal", "amortized"):
            raise ArgumentError(f"unknown cost mode {self.mode!r}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ArgumentError("T must be positive")
        if self.mode == "amortized":
            if self.t_w is None or not self.t_w > 0:
                raise ArgumentError("amortized mode needs a positive t_w")
        if not self.t_r >= 0:
            raise ArgumentError("t_r must be non-negative")
        lo, hi = self.bounds
        if not (0 < lo < hi <= self.T):
            raise ArgumentError(f"search bounds must satisfy 0 < t_min < t_max <= T, got {(lo, hi)}")

    @property
    def bounds(self):
        if self.search_bounds is None:
            return (self.T * 1e-4, self.T)
        lo, hi = self.search_bounds
        return (float(lo), float(hi))


def _cost(config, model, t):
    recovery = failure_probability(model, t) * config.t_r / config.T
    if config.mode == "literal":
        return t / config.T + recovery
    return config.t_w / t + recovery


def cost(config, model, t_c):
    t = np.asarray(t_c, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > config.T):
        raise ArgumentError(f"t_c must lie in (0, T={config.T}]")
    return _cost(config, model, t)


def cost_derivative(config, model, t):
    t = np.asarray(t, dtype=np.float64)
    recovery = failure_density(model, t) * config.t_r / config.T
    if config.mode == "literal":
        return 1.0 / config.T + recovery
    return -config.t_w / (t * t) + recovery


@dataclass(frozen=True)
class IntervalResult:
    t_star: float
    diagnostics: str
    cost: float
    derivative: float
    stationary: bool

    def to_dict(self):
        return {
            "t_star": self.t_star,
            "diagnostics": self.diagnostics,
            "cost": self.cost,
            "derivative": self.derivative,
            "stationary": self.stationary,
        }


def _golden_section(f, lo, hi, tol):
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = f(d)
    return 0.5 * (lo + hi)


def optimal_interval(config, model, coarse_points=512, derivative_tol=1e-8):
    """Checkpoint interval minimizing the configured cost on the search bounds.

    A log-spaced scan locates the basin of the global minimum (the amortized
    cost can turn down again near the upper bound, so plain golden-section on
    the whole range is not safe), golden-section narrows it to
    ``1e-6 * t_max``, and for an interior optimum the analytic derivative is
    bisected to its root so that ``|dC/dt|`` ends below ``derivative_tol``.
    """
    lo, hi = config.bounds
    f = lambda t: float(_cost(config, model, t))  # noqa: E731
    grid = np.geomspace(lo, hi, coarse_points)
    grid[0], grid[-1] = lo, hi
    values = _cost(config, model, grid)
    i = int(np.argmin(values))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    t = _golden_section(f, a, b, 1e-6 * hi)
    candidates = [(f(lo), lo), (f(t), t), (f(hi), hi)]
    best_cost, best = min(candidates)
    if best in (lo, hi) or config.mode == "literal":
        if config.mode == "literal":
            log.warning(
                "literal cost is nondecreasing in t_c; no stationary point exists, "
                "returning the lower bound t_min=%g", lo,
            )
            best = lo
            best_cost = f(lo)
        return IntervalResult(best, BOUNDARY, best_cost,
                              float(cost_derivative(config, model, best)), False)
    g = lambda s: float(cost_derivative(config, model, s))  # noqa: E731
    ga, gb = g(a), g(b)
    if ga < 0 < gb:
        left, right = a, b
        for _ in range(200):
            mid = 0.5 * (left + right)
            gm = g(mid)
            if gm < 0:
                left = mid
            else:
                right = mid
            if abs(gm) < derivative_tol * 1e-3 or right - left <= 4 * np.spacing(mid):
                break
        polished = 0.5 * (left + right)
        if f(polished) <= best_cost:
            best, best_cost = polished, f(polished)
    deriv = g(best)
    stationary = abs(deriv) < derivative_tol
    if not stationary:
        log.warning("interior optimum at t=%g has |dC/dt|=%g above %g", best, abs(deriv),
                    derivative_tol)
    return IntervalResult(best, INTERIOR, best_cost, deriv, stationary)


# -- runtime fault injection --------------------------------------------------

NONE = "none"
CHECKPOINTED = "checkpointed"
FAILED = "failed"


@dataclass
class FaultContext:
    """Fault and checkpoint bookkeeping for one client on the simulated clock.

    ``next_failure_time`` (Weibull renewal process) persists across rounds;
    the dropout failure, deadline and recovery budget are reset by
    :meth:`begin_round`.
    """

    weibull: WeibullModel | None = None
    dropout_rate: float = 0.0
    checkpoint_interval: float | None = None
    store: object = None
    t_r: float = 0.0
    t_w: float = 0.0
    max_recoveries: int = 10
    weibull_rng: np.random.Generator | None = None
    clock: float = 0.0
    next_failure_time: float = math.inf
    dropout_time: float | None = None
    last_checkpoint: float = 0.0
    deadline: float = math.inf
    round: int = 0
    recoveries: int = 0
    failure_log: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ArgumentError("dropout_rate must lie in [0, 1]")
        if self.weibull is not None and self.next_failure_time == math.inf:
            if self.weibull_rng is None:
                raise ArgumentError("a Weibull fault model needs its own rng")
            self.next_failure_time = self.clock + sample_failure_time(self.weibull, self.weibull_rng)

    @property
    def checkpointing(self):
        return self.checkpoint_interval is not None and self.store is not None

    def begin_round(self, round_idx, start, nominal_time, round_rng, deadline=math.inf):
        """Start a round at simulated time ``start``.

        The dropout draw always consumes two uniforms so that every rate sees
        the same underlying random numbers; a dropped client fails once, at a
        uniformly drawn point of its nominal training time.
        """
        self.round = round_idx
        self.clock = start
        self.last_checkpoint = start
        self.recoveries = 0
        self.deadline = deadline
        u_fire, u_when = round_rng.random(2)
        self.dropout_time = start + u_when * nominal_time if u_fire < self.dropout_rate else None

    def charge(self, seconds):
        self.clock += seconds


def maybe_fail_and_checkpoint(ctx, client, sim_time):
    """Decide the action after a batch ending at ``sim_time``.

    Failure takes precedence over checkpointing and at most one action is
    returned. A consumed Weibull failure resamples the next failure time from
    the current time.
    """
    ctx.clock = sim_time
    if ctx.dropout_time is not None and sim_time >= ctx.dropout_time:
        ctx.dropout_time = None
        ctx.failure_log.append(sim_time)
        return FAILED
    if ctx.weibull is not None and sim_time >= ctx.next_failure_time:
        gap = sample_failure_time(ctx.weibull, ctx.weibull_rng)
        ctx.next_failure_time = max(sim_time + gap, math.nextafter(sim_time, math.inf))
        ctx.failure_log.append(sim_time)
        return FAILED
    if ctx.checkpointing and sim_time - ctx.last_checkpoint >= ctx.checkpoint_interval:
        ctx.last_checkpoint = sim_time
        return CHECKPOINTED
    return NONE


@dataclass(frozen=True)
class ResumePoint:
    epoch: int
    batch: int
    rng_state: bytes


def recover_client(client, store, w_g, ctx):
    """Bring a failed client back and return it.

    With checkpointing on and a valid checkpoint from the current round, the
    parameters, Adam state, stream position and progress counters are
    restored. Otherwise the client restarts the round from ``w_g`` with a
    fresh optimizer. Either way ``t_r`` simulated seconds are charged.
    """
    if client.status != "failed":
        raise StateError(f"client {client.id} is {client.status}, not failed")
    ctx.recoveries += 1
    if ctx.recoveries > ctx.max_recoveries:
        raise ClientAbandoned(client.id, ctx.recoveries - 1)
    client.status = "recovering"
    ckpt = None
    if ctx.checkpointing:
        try:
            ckpt = store.read_latest(client.id)
        except CheckpointNotFound:
            ckpt = None
        if ckpt is not None and ckpt.round != ctx.round:
            ckpt = None
    if ckpt is not None:
        client.params = ckpt.params
        client.adam = ckpt.adam
        client.resume = ResumePoint(ckpt.epoch, ckpt.batch_index + 1, ckpt.rng_state)
        source = "checkpoint"
    else:
        client.params = w_g.copy()
        client.adam = AdamState.fresh(w_g)
        client.resume = ResumePoint(0, 0, client.round_start_rng)
        source = "global_reinit"
    ctx.charge(ctx.t_r)
    ctx.last_checkpoint = ctx.clock
    client.recovery_source = source
    client.status = "active"
    return client


def make_checkpoint(client_id, round_idx, event, sim_time):
    return Checkpoint(
        client_id, round_idx, event.epoch, event.batch_index, sim_time,
        event.epoch_rng_state, event.params, event.adam,
    )
