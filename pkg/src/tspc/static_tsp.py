"""Static 14-point Euclidean TSP benchmark.

Route-length bookkeeping, the chained position variance model, the
expected-step backend for the sequence engine, and two baselines: an exact
Held-Karp solver and a 2-opt simulated annealer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .engine import (
    DesignLayout,
    NodeDesign,
    NodePrediction,
    ObjectiveSettings,
    SequenceEvaluation,
    SequenceObjective,
    SequenceProblem,
    TransferOutcome,
)
from .gaussian import GaussianBelief
from .optimizer import MultiStartResult, OptimizerConfig, SolveTrace, multi_start

DEPOT = 13
MU_STEP_FLOOR = 1e-6

BENCHMARK_POINTS: dict[int, tuple[float, float]] = {
    1: (16.470, 96.100),
    2: (16.470, 94.440),
    3: (20.090, 92.540),
    4: (22.390, 93.370),
    5: (25.230, 97.240),
    6: (22.000, 96.050),
    7: (20.470, 97.020),
    8: (17.200, 96.290),
    9: (16.300, 97.380),
    10: (14.050, 98.120),
    11: (16.530, 97.380),
    12: (21.520, 95.590),
    13: (19.410, 97.130),
    14: (20.090, 94.550),
}

SOLUTION_A = (13, 7, 12, 6, 5, 4, 3, 14, 2, 1, 10, 9, 11, 8, 13)
SOLUTION_B = (13, 7, 12, 6, 5, 4, 3, 14, 2, 1, 8, 11, 9, 10, 13)

# mu_x, mu_y, sigma_x, sigma_y, rho_x, rho_y, kappa
STATIC_LOWER = np.array([-8.0, -8.0, 0.1, 0.1, 0.0, 0.0, 0.01])
STATIC_UPPER = np.array([8.0, 8.0, 6.0, 6.0, 1.0, 1.0, 300.0])
STATIC_DEFAULT = np.array([0.0, 0.0, 4.0, 4.0, 0.2, 0.2, 50.0])
# Difference steps per node. The step on mu is comparable to the spacing of
# the points so that a probe can cross a selection boundary; a tiny step
# would only ever see the flat interior of one selection cell.
STATIC_FD_STEPS = np.array([0.5, 0.5, 1e-4, 1e-4, 1e-4, 1e-4, 1e-3])
WARM_START_OFFSET = (1.0, -0.8)


class TourError(ValueError):
    """A tour is not a closed permutation of the point set."""


@dataclass(frozen=True)
class PointSet:
    points: Mapping[int, tuple[float, float]]

    def __post_init__(self):
        if len(set(self.points)) != len(self.points):
            raise ValueError("point ids must be unique")

    @property
    def ids(self) -> list[int]:
        return sorted(self.points)

    def xy(self, pid: int) -> np.ndarray:
        return np.asarray(self.points[pid], dtype=float)

    def distance(self, a: int, b: int) -> float:
        (xa, ya), (xb, yb) = self.points[a], self.points[b]
        return math.hypot(xa - xb, ya - yb)

    def distance_matrix(self) -> tuple[list[int], np.ndarray]:
        ids = self.ids
        xy = np.array([self.points[i] for i in ids], dtype=float)
        diff = xy[:, None, :] - xy[None, :, :]
        return ids, np.hypot(diff[..., 0], diff[..., 1])


BENCHMARK = PointSet(BENCHMARK_POINTS)


def load_points(path: str | Path) -> PointSet:
    """Read a ``id,x,y`` CSV with header."""
    pts = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid = int(row["id"])
            if pid in pts:
                raise ValueError(f"duplicate point id {pid}")
            pts[pid] = (float(row["x"]), float(row["y"]))
    return PointSet(pts)


@dataclass(frozen=True)
class Tour:
    order: tuple[int, ...]
    length: float


def validate_tour(order: Sequence[int], points: PointSet, depot: int | None = None) -> None:
    order = list(order)
    if len(order) < 2 or order[0] != order[-1]:
        raise TourError("tour must start and end at the same point")
    if depot is not None and order[0] != depot:
        raise TourError(f"tour must start at depot {depot}")
    if sorted(order[:-1]) != points.ids:
        raise TourError("tour interior is not a permutation of the point set")


def tour_length(order: Sequence[int], points: PointSet = BENCHMARK) -> float:
    """Closed Euclidean length of a tour given as an id list returning to its start."""
    validate_tour(order, points)
    return sum(points.distance(a, b) for a, b in zip(order, order[1:]))


def chain_variance(sigma_prior: float, sigma_prev: float, rho: float) -> float:
    """Standard deviation at a point given its own prior spread and the previous one."""
    return math.sqrt(sigma_prior**2 + sigma_prev**2 + 2.0 * rho * sigma_prior * sigma_prev)


def distance_variance(mu_x: float, mu_y: float, sigma_x: float, sigma_y: float) -> float:
    """Variance of the step length for a Gaussian step with diagonal covariance."""
    norm2 = mu_x**2 + mu_y**2
    if norm2 == 0.0:
        raise ValueError("degenerate zero expected step")
    return (sigma_x**2 * mu_x**2 + sigma_y**2 * mu_y**2) / norm2


def held_karp_optimal(points: PointSet = BENCHMARK, depot: int = DEPOT) -> Tour:
    """Exact shortest closed tour by bitmask dynamic programming."""
    ids, dist = points.distance_matrix()
    n = len(ids)
    if n > 20:
        raise ValueError(f"Held-Karp limited to 20 points, got {n}")
    if n == 1:
        return Tour((depot, depot), 0.0)
    d = ids.index(depot)
    others = [i for i in range(n) if i != d]
    m = len(others)
    full = (1 << m) - 1
    cost = np.full((1 << m, m), np.inf)
    parent = np.full((1 << m, m), -1, dtype=np.int64)
    for j in range(m):
        cost[1 << j, j] = dist[d, others[j]]
    sub = dist[np.ix_(others, others)]
    for mask in range(1, full):
        row = cost[mask]
        if not np.any(np.isfinite(row)):
            continue
        # best predecessor for every possible next point at once
        ext = row[:, None] + sub
        arg = np.argmin(ext, axis=0)
        val = ext[arg, np.arange(m)]
        for k in range(m):
            if (mask >> k) & 1:
                continue
            nxt = mask | (1 << k)
            if val[k] < cost[nxt, k]:
                cost[nxt, k] = val[k]
                parent[nxt, k] = arg[k]
    closing = cost[full] + dist[others, d]
    last = int(np.argmin(closing))
    length = float(closing[last])
    path = []
    mask = full
    while last >= 0:
        path.append(ids[others[last]])
        prev = int(parent[mask, last])
        mask ^= 1 << last
        last = prev
    order = (depot, *reversed(path), depot)
    return Tour(order, length)


def nearest_neighbor_tour(points: PointSet = BENCHMARK, depot: int = DEPOT) -> Tour:
    left = set(points.ids) - {depot}
    order = [depot]
    while left:
        here = order[-1]
        nxt = min(left, key=lambda j: (points.distance(here, j), j))
        order.append(nxt)
        left.remove(nxt)
    order.append(depot)
    return Tour(tuple(order), tour_length(order, points))


@dataclass(frozen=True)
class AnnealingSchedule:
    t0: float = 10.0
    t_min: float = 1e-2
    cooling: float = 0.995
    sweeps: int = 50

    def __post_init__(self):
        if not self.t0 > self.t_min > 0.0:
            raise ValueError("annealing needs t0 > t_min > 0")
        if not 0.0 < self.cooling < 1.0:
            raise ValueError("cooling factor must lie in (0, 1)")


def simulated_annealing(
    points: PointSet = BENCHMARK,
    depot: int = DEPOT,
    schedule: AnnealingSchedule = AnnealingSchedule(),
    seed: int = 0,
    initial: Sequence[int] | None = None,
) -> Tour:
    """2-opt / swap simulated annealing; returns the best tour seen."""
    rng = np.random.default_rng(seed)
    ids, dist = points.distance_matrix()
    index = {pid: i for i, pid in enumerate(ids)}
    if initial is None:
        interior = [index[p] for p in ids if p != depot]
        rng.shuffle(interior)
    else:
        validate_tour(initial, points, depot)
        interior = [index[p] for p in initial[1:-1]]
    d = index[depot]
    tour = [d, *interior, d]
    n = len(tour)
    dm = dist.tolist()

    def closed_length(t):
        return sum(dm[a][b] for a, b in zip(t, t[1:]))

    length = closed_length(tour)
    best, best_len = list(tour), length
    if n <= 4:
        return Tour(tuple(ids[i] for i in best), best_len)

    temp = schedule.t0
    moves = schedule.sweeps * (n - 2)
    while temp > schedule.t_min:
        picks = rng.integers(1, n - 1, size=(moves, 2)).tolist()
        coins = rng.random(moves).tolist()
        accept = rng.random(moves).tolist()
        for (i, j), coin, u in zip(picks, coins, accept):
            if i == j:
                continue
            if i > j:
                i, j = j, i
            if coin < 0.5:
                # 2-opt: reverse tour[i..j]
                a, b, c, e = tour[i - 1], tour[i], tour[j], tour[j + 1]
                delta = dm[a][c] + dm[b][e] - dm[a][b] - dm[c][e]
                if delta < 0.0 or u < math.exp(-delta / temp):
                    tour[i:j + 1] = tour[i:j + 1][::-1]
                    length += delta
            else:
                p, q = tour[i], tour[j]
                if j == i + 1:
                    delta = (dm[tour[i - 1]][q] + dm[p][tour[j + 1]]
                             - dm[tour[i - 1]][p] - dm[q][tour[j + 1]])
                else:
                    delta = (dm[tour[i - 1]][q] + dm[q][tour[i + 1]] + dm[tour[j - 1]][p] + dm[p][tour[j + 1]]
                             - dm[tour[i - 1]][p] - dm[p][tour[i + 1]] - dm[tour[j - 1]][q] - dm[q][tour[j + 1]])
                if delta < 0.0 or u < math.exp(-delta / temp):
                    tour[i], tour[j] = q, p
                    length += delta
            if length < best_len - 1e-12:
                best, best_len = list(tour), length
        temp *= schedule.cooling
    return Tour(tuple(ids[i] for i in best), closed_length(best))


# --------------------------------------------------------------------------
# sequence-engine backend


@dataclass(frozen=True)
class _StaticContext:
    prev: int
    position: np.ndarray
    sigma_x: float
    sigma_y: float


class StaticTSPProblem(SequenceProblem):
    """Expected-step backend: each node proposes a Gaussian step from the last point.

    The observation is the selected point's position; the predicted
    observation is the previous point plus the expected step, with the
    per-axis spread accumulated along the chain. The cost is the leg length,
    scored against the step-length belief.
    """

    n_cost = 1

    def __init__(self, points: PointSet = BENCHMARK, depot: int = DEPOT):
        if depot not in points.points:
            raise ValueError(f"depot {depot} not in point set")
        self.points = points
        self.depot = depot
        self.candidate_ids = np.array(points.ids)
        self._xy = np.array([points.points[i] for i in points.ids], dtype=float)
        self._row = {pid: i for i, pid in enumerate(points.ids)}
        self.n_obs = 2
        self.layout = DesignLayout(
            n_nodes=len(points.ids) - 1,
            mu_names=("x", "y"),
            node_lower=STATIC_LOWER,
            node_upper=STATIC_UPPER,
            node_default=STATIC_DEFAULT,
            n_rho=2,
        )

    def excluded(self) -> set[int]:
        return {self.depot}

    def start(self) -> _StaticContext:
        return _StaticContext(self.depot, self.points.xy(self.depot), 0.0, 0.0)

    def context_key(self, context: _StaticContext):
        return (context.prev, context.sigma_x, context.sigma_y)

    def predict(self, context: _StaticContext, node: NodeDesign, k: int) -> NodePrediction:
        sx = chain_variance(node.sigma[0], context.sigma_x, node.rho[0])
        sy = chain_variance(node.sigma[1], context.sigma_y, node.rho[1])
        mean = context.position + node.mu
        belief = GaussianBelief(mean, np.diag([sx * sx, sy * sy]))
        return NodePrediction(obs=belief, state=belief, extra=(sx, sy))

    def observe(self, context, node, prediction, ids) -> np.ndarray:
        return self._xy[[self._row[int(i)] for i in ids]]

    def transfer(self, context: _StaticContext, node: NodeDesign, prediction: NodePrediction, cand: int, z) -> TransferOutcome:
        sx, sy = prediction.extra
        step = np.asarray(z) - context.position
        r = float(math.hypot(step[0], step[1]))
        mx, my = node.mu
        mu_r = max(math.hypot(mx, my), MU_STEP_FLOOR)
        if mx == 0.0 and my == 0.0:
            var_r = 0.5 * (sx * sx + sy * sy)
        else:
            var_r = distance_variance(mx, my, sx, sy)
        belief = GaussianBelief([mu_r], [[var_r]])
        return TransferOutcome(r, belief, _StaticContext(cand, np.asarray(z, dtype=float), sx, sy))

    def closing_cost(self, context: _StaticContext) -> float:
        return float(np.hypot(*(context.position - self.points.xy(self.depot))))

    def route_steps(self, route: Sequence[int]) -> np.ndarray:
        """Coordinate differences between consecutive points of ``route`` (excluding the return leg)."""
        xy = np.array([self.points.points[p] for p in route[:-1]], dtype=float)
        return np.diff(xy, axis=0)

    def design_for_route(self, route: Sequence[int], offset=(0.0, 0.0), sigma=4.0, rho=0.2, kappa=50.0) -> np.ndarray:
        """Design vector whose expected steps equal the route's coordinate steps plus ``offset``."""
        steps = self.route_steps(route) + np.asarray(offset, dtype=float)
        if steps.shape[0] != self.layout.n_nodes:
            raise ValueError("route length does not match the number of nodes")
        x = self.layout.default_vector().reshape(self.layout.n_nodes, -1)
        x[:, 0:2] = steps
        x[:, 2:4] = sigma
        x[:, 4:6] = rho
        x[:, 6] = kappa
        lo, hi = self.layout.bounds()
        return np.clip(x.ravel(), lo, hi)

    def uniform_mu_sampler(self, low: float = -2.0, high: float = 2.0):
        """Initial-point sampler drawing every expected step uniformly in ``[low, high]^2``."""
        mu_idx = np.concatenate([self.layout.field_slice("mu_x"), self.layout.field_slice("mu_y")])

        def sample(rng: np.random.Generator) -> np.ndarray:
            x = self.layout.default_vector()
            x[mu_idx] = rng.uniform(low, high, size=mu_idx.size)
            return x

        return sample


def build_static_problem(points: PointSet = BENCHMARK, depot: int = DEPOT) -> StaticTSPProblem:
    return StaticTSPProblem(points, depot)


def static_optimizer_config(**overrides) -> OptimizerConfig:
    n_nodes = len(BENCHMARK_POINTS) - 1
    options = {"fd_step": np.tile(STATIC_FD_STEPS, n_nodes)}
    options.update(overrides)
    return OptimizerConfig(**options)


@dataclass
class StaticSolveResult:
    evaluation: SequenceEvaluation
    trace: SolveTrace
    x: np.ndarray
    route: tuple[int, ...]
    runs: MultiStartResult


def solve_static(
    mode: str = "map",
    init: str = "solution-a",
    restarts: int = 1,
    seed: int = 0,
    points: PointSet = BENCHMARK,
    depot: int = DEPOT,
    optimizer: OptimizerConfig | None = None,
    jobs: int = 1,
) -> StaticSolveResult:
    """Continuous solve of the static benchmark.

    ``init="solution-a"`` starts every node at the reference steps shifted by
    (1.0, -0.8); ``init="uniform"`` draws each expected step uniformly in
    [-2, 2]^2 and uses ``restarts`` draws.
    """
    problem = build_static_problem(points, depot)
    if optimizer is None:
        optimizer = static_optimizer_config()
    if np.size(optimizer.fd_step) not in (1, problem.layout.size):
        optimizer = replace(optimizer, fd_step=np.tile(STATIC_FD_STEPS, problem.layout.n_nodes))
    settings = ObjectiveSettings(mode=mode)
    if init == "solution-a":
        if points is not BENCHMARK and set(points.ids) != set(SOLUTION_A[:-1]):
            raise ValueError("the solution-a warm start only applies to the 14-point benchmark")
        x0 = problem.design_for_route(SOLUTION_A, offset=WARM_START_OFFSET)
        sampler = lambda rng: x0.copy()  # noqa: E731
        optimizer = replace(optimizer, restarts=1)
    elif init == "uniform":
        sampler = problem.uniform_mu_sampler(-2.0, 2.0)
        optimizer = replace(optimizer, restarts=restarts)
    else:
        raise ValueError(f"unknown initialization {init!r}")
    optimizer = replace(optimizer, seed=seed)
    objective = SequenceObjective(problem, settings)
    result = multi_start(objective, sampler, problem.layout.bounds(), optimizer,
                         monitor=objective.monitor, feasible=objective.feasible, jobs=jobs)
    evaluation = objective.evaluate(result.best.x)
    route = (depot, *evaluation.route, depot)
    return StaticSolveResult(evaluation, result.best.trace, result.best.x, route, result)
