"""Dormand-Prince 5(4) integration with mandatory mesh points and NFE accounting.

States may be plain arrays or :class:`~cnftpr.autodiff.Var`; in the latter case
every accepted stage is recorded on the tape so the solution is differentiable
with respect to whatever the dynamics close over (discretize-then-optimize).
Step-size decisions are made on values only and carry no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import Var, lincomb, value


class SolverError(RuntimeError):
    pass


class MaxStepsExceeded(SolverError):
    pass


class NonFiniteState(SolverError):
    pass


@dataclass(frozen=True)
class Tableau:
    c: tuple
    a: tuple  # a[i] holds the coefficients of stage i+1 on stages 0..i
    b: tuple  # 5th-order weights (also the last stage's row, FSAL)
    e: tuple  # b - b_hat over all seven stages
    order: int = 5


DOPRI5 = Tableau(
    c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
    a=(
        (1 / 5,),
        (3 / 40, 9 / 40),
        (44 / 45, -56 / 15, 32 / 9),
        (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
        (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    ),
    b=(35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
    e=(71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40),
)


@dataclass
class SolverConfig:
    atol: float = 1e-4
    rtol: float = 1e-4
    t0: float = 0.0
    t1: float = 1.0
    mandatory_times: tuple = ()
    initial_step: Optional[float] = None
    max_steps: int = 10_000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    adaptive: bool = True

    def __post_init__(self):
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("atol and rtol must be positive")
        if not self.t0 < self.t1:
            raise ValueError(f"need t0 < t1, got [{self.t0}, {self.t1}]")
        times = tuple(float(t) for t in self.mandatory_times)
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("mandatory_times must be sorted and unique")
        if times and (times[0] < self.t0 or times[-1] > self.t1):
            raise ValueError("mandatory_times must lie in [t0, t1]")
        self.mandatory_times = times
        if not self.adaptive and not self.initial_step:
            raise ValueError("fixed-step integration needs initial_step")

    def replace(self, **changes) -> "SolverConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return SolverConfig(**fields)


@dataclass
class SolverStats:
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0


@dataclass
class OdeSolution:
    times: list
    states: list
    sampled: dict
    stats: SolverStats = field(default_factory=SolverStats)

    @property
    def final(self):
        return self.states[-1]


def rms_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def error_norm(err, y_old, y_new, atol, rtol) -> float:
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return rms_norm(err / scale)


def propose_step(err_norm: float, h: float, safety=0.9, min_factor=0.2, max_factor=10.0, order=5) -> float:
    """Next step size from the I-controller; a step is accepted iff err_norm <= 1."""
    if err_norm == 0.0:
        factor = max_factor
    else:
        factor = safety * err_norm ** (-1.0 / order)
    return h * min(max_factor, max(min_factor, factor))


def initial_step(y0, f0, config: SolverConfig) -> float:
    """Starting step from the scaled norms of y0 and f(y0) (first half of Hairer's rule)."""
    span = config.t1 - config.t0
    scale = config.atol + config.rtol * np.abs(y0)
    d0 = rms_norm(y0 / scale)
    d1 = rms_norm(f0 / scale)
    if d1 < 1e-5:
        # the whole interval moves the state by less than the tolerance
        return span
    h = 1e-6 if d0 < 1e-5 else 0.01 * d0 / d1
    return min(h, span)


def attempt_step(dynamics, y, t: float, h: float, k1, tableau: Tableau = DOPRI5):
    """One embedded step from (t, y) with first stage ``k1`` already known.

    Returns ``(y5, err, k_last)``: the 5th-order state, the numeric difference
    between the 5th- and 4th-order solutions, and f(t + h, y5) for FSAL reuse.
    Consumes exactly six evaluations of ``dynamics``.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    ks = [k1]
    for ci, row in zip(tableau.c[1:], tableau.a):
        yi = lincomb((1.0,) + tuple(h * a for a in row), [y] + ks)
        ks.append(dynamics(yi, t + ci * h))
    y5 = lincomb((1.0,) + tuple(h * b for b in tableau.b), [y] + ks)
    if not np.all(np.isfinite(value(y5))):
        raise NonFiniteState(f"non-finite state in step at t={t:.6g}, h={h:.3g}")
    k_last = dynamics(y5, t + h)
    kv = [value(k) for k in ks + [k_last]]
    err = h * sum(e * k for e, k in zip(tableau.e, kv) if e != 0.0)
    return y5, err, k_last


def integrate(dynamics: Callable, y0, config: SolverConfig, tableau: Tableau = DOPRI5) -> OdeSolution:
    """Solve dy/dt = dynamics(y, t) on [t0, t1], landing exactly on every mandatory time."""
    t0, t1 = float(config.t0), float(config.t1)
    span = t1 - t0
    stops = [t for t in config.mandatory_times if t > t0]
    if not stops or stops[-1] < t1:
        stops.append(t1)
    land_tol = 1e-9 * span
    sampled = {t0: y0} if config.mandatory_times and config.mandatory_times[0] == t0 else {}
    mandatory = set(config.mandatory_times)

    stats = SolverStats()
    k1 = dynamics(y0, t0)
    stats.nfe = 1
    if config.initial_step:
        h = float(config.initial_step)
    else:
        h = initial_step(value(y0), value(k1), config)

    tape = y0.tape if isinstance(y0, Var) else None
    march = _March(t0, y0, k1, h, stops, mandatory, sampled, stats, land_tol)
    try:
        march.run(dynamics, config, tableau, tape)
    except SolverError as exc:
        # keep what was accepted so callers can report a truncated trajectory
        exc.partial = OdeSolution(times=march.times, states=march.states, sampled=sampled, stats=stats)
        raise
    return OdeSolution(times=march.times, states=march.states, sampled=sampled, stats=stats)


@dataclass
class _March:
    t: float
    y: object
    k1: object
    h: float
    stops: list
    mandatory: set
    sampled: dict
    stats: SolverStats
    land_tol: float
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def run(self, dynamics, config: SolverConfig, tableau: Tableau, tape) -> None:
        stats = self.stats
        self.times.append(self.t)
        self.states.append(self.y)
        stop_idx = 0
        while stop_idx < len(self.stops):
            if stats.accepted + stats.rejected >= config.max_steps:
                raise MaxStepsExceeded(f"exceeded {config.max_steps} steps at t={self.t:.6g}")
            t, y, h = self.t, self.y, self.h
            target = self.stops[stop_idx]
            h_try = h
            clipped = t + h_try >= target - self.land_tol
            if clipped:
                h_try = target - t

            mark = tape.mark() if tape is not None else None
            y5, err, k_last = attempt_step(dynamics, y, t, h_try, self.k1, tableau)
            stats.nfe += 6
            enorm = error_norm(err, value(y), value(y5), config.atol, config.rtol)
            if not math.isfinite(enorm):
                raise NonFiniteState(f"non-finite error estimate at t={t:.6g}")

            if config.adaptive and enorm > 1.0:
                stats.rejected += 1
                if tape is not None:
                    tape.truncate(mark)
                self.h = propose_step(enorm, h_try, config.safety, config.min_factor, config.max_factor, tableau.order)
                continue

            stats.accepted += 1
            self.t = target if clipped else t + h_try
            self.y, self.k1 = y5, k_last
            self.times.append(self.t)
            self.states.append(y5)
            if clipped:
                stop_idx += 1
                if target in self.mandatory:
                    self.sampled[target] = y5
            if config.adaptive:
                h_next = propose_step(enorm, h_try, config.safety, config.min_factor, config.max_factor, tableau.order)
                # a step shortened to hit a mandatory time should not slow the pace after it
                self.h = max(h_next, h) if clipped else h_next


class CountingDynamics:
    """Wraps a dynamics callable and counts its invocations."""

    def __init__(self, fn: Callable):
        self.fn = fn
        self.calls = 0

    def __call__(self, y, t):
        self.calls += 1
        return self.fn(y, t)
