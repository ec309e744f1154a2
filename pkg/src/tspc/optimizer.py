"""Box-constrained projected quasi-Newton search with finite-difference gradients.

The search runs in coordinates scaled to the unit box so that variables with
very different units (km next to eccentricity) share one step length. The
direction is limited-memory BFGS restricted to the free variables, steps are
projected onto the box, and a backtracking Armijo line search only ever
accepts decreases of the objective.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
STALLED = "stalled"


class OptimizerError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    max_iterations: int = 300
    grad_tolerance: float = 1e-8
    step_tolerance: float = 1e-20
    objective_tolerance: float = 1e-20
    fd_step: np.ndarray | float | None = None
    restarts: int = 1
    seed: int = 0
    memory: int = 10
    initial_step: float = 0.05
    max_backtracks: int = 30
    armijo: float = 1e-4
    fd_scales: tuple[float, ...] = (1.0,)
    central: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("grad_tolerance", "step_tolerance", "objective_tolerance"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.memory < 1 or self.max_backtracks < 1:
            raise ValueError("memory and max_backtracks must be at least 1")
        if not self.initial_step > 0.0:
            raise ValueError("initial_step must be positive")
        if not 0.0 < self.armijo < 1.0:
            raise ValueError("armijo constant must lie in (0, 1)")
        if not self.fd_scales or any(h <= 0.0 for h in self.fd_scales):
            raise ValueError("fd_scales must be a non-empty sequence of positive factors")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    max_penalty: float
    grad_norm: float
    step_norm: float
    flipped: bool = False


@dataclass
class SolveTrace:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = MAX_ITER
    evaluations: int = 0

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def iterations(self) -> int:
        return max(len(self.records) - 1, 0)


def _default_steps(x: np.ndarray) -> np.ndarray:
    return 1e-6 * np.maximum(1.0, np.abs(x))


def fd_gradient(
    objective: Callable[[np.ndarray], float],
    x,
    fd_step=None,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    f0: float | None = None,
    central: bool = False,
) -> np.ndarray:
    """One-sided finite-difference gradient that never probes outside the box.

    A forward probe that would cross the upper bound is taken backward
    instead. A non-finite probe is retried once with half the step, from
    the other side when the box allows it.
    """
    x = np.asarray(x, dtype=float)
    steps = _default_steps(x) if fd_step is None else np.broadcast_to(np.asarray(fd_step, dtype=float), x.shape)
    lower, upper = (np.full_like(x, -np.inf), np.full_like(x, np.inf)) if bounds is None else bounds
    if f0 is None:
        f0 = objective(x)
    if not math.isfinite(f0):
        raise OptimizerError("objective is not finite at the gradient base point")
    grad = np.empty_like(x)
    for j in range(x.size):
        h = float(steps[j])
        value = math.nan
        sign = 0.0
        for attempt in range(2):
            fwd = x[j] + h <= upper[j]
            bwd = x[j] - h >= lower[j]
            if attempt == 0 and central and fwd and bwd:
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                value = (objective(xp) - objective(xm)) / (2.0 * h)
            else:
                if attempt == 0 or sign == 0.0:
                    sign = 1.0 if fwd or not bwd else -1.0
                elif (sign > 0.0 and bwd) or (sign < 0.0 and fwd):
                    sign = -sign
                xp = x.copy()
                xp[j] = min(max(x[j] + sign * h, lower[j]), upper[j])
                dx = xp[j] - x[j]
                value = (objective(xp) - f0) / dx if dx != 0.0 else 0.0
            if math.isfinite(value):
                break
            h *= 0.5
        if not math.isfinite(value):
            raise OptimizerError(f"non-finite finite-difference probe on coordinate {j}")
        grad[j] = value
    return grad


class _Counted:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        try:
            value = float(self.fn(x))
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.debug("objective failed during search: %s", exc)
            return math.inf
        return value if math.isfinite(value) else math.inf


def _two_loop(grad: np.ndarray, s_list, y_list) -> np.ndarray:
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def minimize(
    objective: Callable[[np.ndarray], float],
    x0,
    bounds: tuple[Sequence[float], Sequence[float]],
    config: OptimizerConfig = OptimizerConfig(),
    monitor: Callable[[np.ndarray], tuple[float, object]] | None = None,
) -> tuple[np.ndarray, SolveTrace]:
    """Minimize ``objective`` over a box.

    ``monitor(x)`` may return ``(max_penalty, signature)``; a change of the
    signature between iterations (a different route) is flagged in the trace.
    """
    lower = np.asarray(bounds[0], dtype=float)
    upper = np.asarray(bounds[1], dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != lower.shape or lower.shape != upper.shape:
        raise ValueError("x0 and bounds must have the same shape")
    if np.any(x0 < lower) or np.any(x0 > upper):
        log.warning("initial point outside bounds; clamping")
        x0 = np.clip(x0, lower, upper)

    width = upper - lower
    finite = np.isfinite(width) & (width > 0.0)
    scale = np.where(finite, width, 1.0)
    origin = np.where(finite, lower, 0.0)
    ulo = np.where(finite, 0.0, (lower - origin) / scale)
    uhi = np.where(finite, 1.0, (upper - origin) / scale)
    fixed = width == 0.0

    def to_x(u):
        return np.clip(origin + u * scale, lower, upper)

    fn = _Counted(objective)
    base_steps = _default_steps(x0) if config.fd_step is None else np.broadcast_to(
        np.asarray(config.fd_step, dtype=float), x0.shape)
    level = 0

    def gradient(u, fu):
        steps = base_steps * config.fd_scales[level]
        gx = fd_gradient(fn, to_x(u), steps, (lower, upper), fu, config.central)
        g = gx * scale
        g[fixed] = 0.0
        return g

    u = np.clip((x0 - origin) / scale, ulo, uhi)
    f = fn(to_x(u))
    if not math.isfinite(f):
        raise OptimizerError("objective is not finite at the initial point")
    g = gradient(u, f)
    trace = SolveTrace()
    signature = None
    penalty = math.nan
    if monitor is not None:
        penalty, signature = monitor(to_x(u))
    trace.records.append(IterationRecord(0, f, penalty, _pg_norm(u, g, ulo, uhi), 0.0))

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    status = MAX_ITER
    for it in range(1, config.max_iterations + 1):
        pg = _pg_norm(u, g, ulo, uhi)
        if pg <= config.grad_tolerance:
            if level + 1 < len(config.fd_scales):
                level += 1
                s_hist.clear()
                y_hist.clear()
                g = gradient(u, f)
                continue
            status = CONVERGED
            break
        active = ((u <= ulo) & (g > 0.0)) | ((u >= uhi) & (g < 0.0)) | fixed
        free_g = np.where(active, 0.0, g)

        step = None
        for attempt in ("quasi-newton", "gradient"):
            if attempt == "quasi-newton" and s_hist:
                d = -_two_loop(free_g, s_hist, y_hist)
                d[active] = 0.0
                if d @ free_g >= 0.0:
                    continue
                t = 1.0
            else:
                d = -free_g
                norm = np.max(np.abs(d))
                if norm == 0.0:
                    break
                t = config.initial_step / norm
            step = _line_search(fn, u, f, g, d, t, ulo, uhi, to_x, config.max_backtracks, config.armijo)
            if step is not None:
                break
            s_hist.clear()
            y_hist.clear()
        if step is None:
            # no descent at this difference scale: refine it, or give up
            if level + 1 < len(config.fd_scales):
                level += 1
                s_hist.clear()
                y_hist.clear()
                g = gradient(u, f)
                continue
            status = STALLED
            break

        u_new, f_new = step
        g_new = gradient(u_new, f_new)
        s = u_new - u
        yv = g_new - g
        if s @ yv > 1e-12 * math.sqrt((s @ s) * (yv @ yv)):
            s_hist.append(s)
            y_hist.append(yv)
            if len(s_hist) > config.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        step_norm = float(np.linalg.norm(s * scale))
        df = f - f_new
        u, f, g = u_new, f_new, g_new

        flipped = False
        if monitor is not None:
            penalty, new_signature = monitor(to_x(u))
            flipped = new_signature != signature
            signature = new_signature
        trace.records.append(IterationRecord(it, f, penalty, _pg_norm(u, g, ulo, uhi), step_norm, flipped))
        if step_norm <= config.step_tolerance:
            status = CONVERGED
            break
        if df <= config.objective_tolerance * max(1.0, abs(f)):
            status = CONVERGED
            break

    trace.status = status
    trace.evaluations = fn.calls
    return to_x(u), trace


def _pg_norm(u, g, lo, hi) -> float:
    return float(np.max(np.abs(np.clip(u - g, lo, hi) - u))) if u.size else 0.0


def _line_search(fn, u, f, g, d, t, lo, hi, to_x, max_backtracks, c1=1e-4):
    for _ in range(max_backtracks):
        u_t = np.clip(u + t * d, lo, hi)
        s = u_t - u
        if not np.any(s):
            return None
        f_t = fn(to_x(u_t))
        if f_t < f and f_t <= f + c1 * (g @ s):
            return u_t, f_t
        t *= 0.5
    return None


@dataclass
class RunResult:
    index: int
    x0: np.ndarray
    x: np.ndarray
    objective: float
    feasible: bool
    trace: SolveTrace
    error: str | None = None


@dataclass
class MultiStartResult:
    best: RunResult
    runs: list[RunResult]


def _run_one(args) -> RunResult:
    index, objective, x0, bounds, config, monitor, feasible = args
    try:
        x, trace = minimize(objective, x0, bounds, config, monitor)
        f = float(objective(x))
        ok = bool(feasible(x)) if feasible is not None else True
        return RunResult(index, x0, x, f, ok, trace)
    except (OptimizerError, ArithmeticError, ValueError, RuntimeError) as exc:
        return RunResult(index, x0, x0, math.inf, False, SolveTrace(status=STALLED), str(exc))


def multi_start(
    objective: Callable[[np.ndarray], float],
    sampler: Callable[[np.random.Generator], np.ndarray] | None,
    bounds: tuple[np.ndarray, np.ndarray],
    config: OptimizerConfig = OptimizerConfig(),
    monitor=None,
    feasible: Callable[[np.ndarray], bool] | None = None,
    jobs: int = 1,
) -> MultiStartResult:
    """Run :func:`minimize` from ``config.restarts`` sampled points and keep the best.

    Initial points are drawn up front from one generator seeded with
    ``config.seed``. Feasible runs win over infeasible ones, then the lowest
    objective, then the lowest run index.
    """
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    rng = np.random.default_rng(config.seed)
    starts = []
    for _ in range(config.restarts):
        x0 = sampler(rng) if sampler is not None else rng.uniform(lower, upper)
        starts.append(np.clip(np.asarray(x0, dtype=float), lower, upper))
    tasks = [(i, objective, x0, (lower, upper), config, monitor, feasible) for i, x0 in enumerate(starts)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_one, tasks))
    else:
        runs = [_run_one(t) for t in tasks]
    usable = [r for r in runs if r.error is None]
    if not usable:
        raise OptimizerError("every restart failed: " + "; ".join(r.error or "" for r in runs))
    best = min(usable, key=lambda r: (not r.feasible, r.objective, r.index))
    return MultiStartResult(best, runs)
