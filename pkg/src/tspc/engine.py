"""Expected-target sequence evaluation.

Each node of a tour carries a Gaussian belief over an "expected target".
The belief is propagated to the node epoch, the real candidate with the
highest prior density under the predicted observation is selected, its cost
is scored against the cost belief conditioned on that observation, and the
per-node quadratic terms are folded into either a chi-square slack-penalty
objective or a MAP objective.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .gaussian import (
    DegenerateCovarianceError,
    GaussianBelief,
    JointGaussian,
    PropagationError,
    SUTScaling,
    chi_square_quantile,
    condition,
    default_regularizer,
    fd_jacobian,
    linear_propagate,
    sut_propagate,
)

SIGMA_Y_FLOOR = 1e-12
OBJECTIVE_MODES = ("chi_square", "map")
SELECTION_MODES = ("deterministic", "stochastic")


class EvaluationError(RuntimeError):
    """Sequence evaluation produced a non-finite value."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message if node is None else f"node {node}: {message}")
        self.node = node


class CandidateExhaustedError(EvaluationError):
    """No unvisited candidate is left to select."""


# --------------------------------------------------------------------------
# design vectors


@dataclass(frozen=True)
class NodeDesign:
    """Continuous variables of one node: expected-target offset, spread, slack weight."""

    mu: np.ndarray
    sigma: np.ndarray
    kappa: float
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tof: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))
        object.__setattr__(self, "sigma", np.atleast_1d(np.asarray(self.sigma, dtype=float)))
        object.__setattr__(self, "rho", np.atleast_1d(np.asarray(self.rho, dtype=float)))
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same length")


@dataclass(frozen=True)
class DesignLayout:
    """Per-node field order and box bounds of a flattened design vector.

    Flattened order is node-major; within a node the fields are
    ``[tof] + mu + sigma + rho + [kappa]`` (tof only when ``has_tof``).
    """

    n_nodes: int
    mu_names: tuple[str, ...]
    node_lower: np.ndarray
    node_upper: np.ndarray
    node_default: np.ndarray
    n_rho: int = 0
    has_tof: bool = False

    def __post_init__(self):
        for name in ("node_lower", "node_upper", "node_default"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.per_node,):
                raise ValueError(f"{name} must have {self.per_node} entries, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.node_lower > self.node_upper):
            raise ValueError("lower bound above upper bound")

    @property
    def state_dim(self) -> int:
        return len(self.mu_names)

    @property
    def per_node(self) -> int:
        return int(self.has_tof) + 2 * self.state_dim + self.n_rho + 1

    @property
    def size(self) -> int:
        return self.n_nodes * self.per_node

    @property
    def field_names(self) -> list[str]:
        names = ["tof"] if self.has_tof else []
        names += [f"mu_{n}" for n in self.mu_names]
        names += [f"sigma_{n}" for n in self.mu_names]
        names += [f"rho_{n}" for n in self.mu_names[: self.n_rho]]
        return names + ["kappa"]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.tile(self.node_lower, self.n_nodes), np.tile(self.node_upper, self.n_nodes)

    def default_vector(self) -> np.ndarray:
        return np.tile(self.node_default, self.n_nodes)

    def field_slice(self, name: str) -> np.ndarray:
        """Flat indices of one named field across all nodes."""
        j = self.field_names.index(name)
        return j + self.per_node * np.arange(self.n_nodes)

    def unflatten(self, x) -> list[NodeDesign]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ValueError(f"design vector of length {x.size}, layout expects {self.size}")
        d = self.state_dim
        nodes = []
        for row in x.reshape(self.n_nodes, self.per_node):
            j = 0
            tof = None
            if self.has_tof:
                tof = float(row[0])
                j = 1
            mu = row[j:j + d]
            sigma = row[j + d:j + 2 * d]
            rho = row[j + 2 * d:j + 2 * d + self.n_rho]
            nodes.append(NodeDesign(mu=mu.copy(), sigma=sigma.copy(), kappa=float(row[-1]), rho=rho.copy(), tof=tof))
        return nodes

    def flatten(self, nodes: Sequence[NodeDesign]) -> np.ndarray:
        if len(nodes) != self.n_nodes:
            raise ValueError(f"{len(nodes)} nodes, layout expects {self.n_nodes}")
        rows = []
        for node in nodes:
            if node.mu.size != self.state_dim or node.rho.size != self.n_rho:
                raise ValueError("node shape does not match layout")
            head = [node.tof] if self.has_tof else []
            rows.append(np.concatenate([head, node.mu, node.sigma, node.rho, [node.kappa]]))
        return np.concatenate(rows)


@dataclass(frozen=True)
class DesignVector:
    nodes: tuple[NodeDesign, ...]
    layout: DesignLayout

    def flatten(self) -> np.ndarray:
        return self.layout.flatten(self.nodes)

    @classmethod
    def unflatten(cls, x, layout: DesignLayout) -> "DesignVector":
        return cls(tuple(layout.unflatten(x)), layout)

    def within_bounds(self) -> bool:
        lo, hi = self.layout.bounds()
        x = self.flatten()
        return bool(np.all(x >= lo) and np.all(x <= hi))


# --------------------------------------------------------------------------
# evaluation records


@dataclass
class NodeEvaluation:
    selected_id: int
    z: np.ndarray
    mu_z: np.ndarray
    sigma_z: np.ndarray
    y: float
    mu_y: float
    sigma_y: float  # variance of the conditioned cost
    quad_z: float
    quad_y: float
    penalty: float
    prior_logdensity: float
    degenerate: bool = False
    info: dict = field(default_factory=dict)


@dataclass
class SequenceEvaluation:
    nodes: list[NodeEvaluation]
    objective: float
    total_cost: float
    route: list[int]
    closing_cost: float = 0.0

    @property
    def penalties(self) -> np.ndarray:
        return np.array([n.penalty for n in self.nodes])

    @property
    def max_penalty(self) -> float:
        return float(max((max(0.0, n.penalty) for n in self.nodes), default=0.0))

    @property
    def feasible(self) -> bool:
        return all(n.penalty <= 0.0 for n in self.nodes)


@dataclass(frozen=True)
class ObjectiveSettings:
    mode: str = "chi_square"
    alpha: float = 0.98
    dof: int | None = None
    selection: str = "deterministic"
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in OBJECTIVE_MODES:
            raise ValueError(f"objective mode must be one of {OBJECTIVE_MODES}")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection mode must be one of {SELECTION_MODES}")


@dataclass
class NodePrediction:
    """Predicted beliefs for one node, produced by a problem backend."""

    obs: GaussianBelief
    state: GaussianBelief | None = None
    obs_jacobian: np.ndarray | None = None
    extra: Any = None


@dataclass
class TransferOutcome:
    y: float
    cost_belief: GaussianBelief
    context: Any
    degenerate: bool = False
    info: dict = field(default_factory=dict)


class SequenceProblem(ABC):
    """Problem backend consumed by :func:`evaluate_sequence`."""

    layout: DesignLayout
    candidate_ids: np.ndarray
    n_obs: int
    n_cost: int = 1

    @abstractmethod
    def start(self) -> Any:
        """Context before the first node (spacecraft state, previous target...)."""

    def excluded(self) -> set[int]:
        """Ids that may never be selected (start object, depot)."""
        return set()

    @abstractmethod
    def predict(self, context, node: NodeDesign, k: int) -> NodePrediction:
        ...

    @abstractmethod
    def observe(self, context, node: NodeDesign, prediction: NodePrediction, ids: np.ndarray) -> np.ndarray:
        """Observation vectors of the given candidates, shape ``(len(ids), n_obs)``."""

    def residual(self, z: np.ndarray, mu_z: np.ndarray) -> np.ndarray:
        return z - mu_z

    @abstractmethod
    def transfer(self, context, node: NodeDesign, prediction: NodePrediction, cand: int, z: np.ndarray) -> TransferOutcome:
        ...

    def closing_cost(self, context) -> float:
        return 0.0

    def default_dof(self) -> int:
        return self.n_obs + self.n_cost

    def context_key(self, context) -> Any:
        """Hashable summary that fully determines everything downstream of a node.

        ``None`` disables reuse of cached downstream nodes.
        """
        return None


# --------------------------------------------------------------------------
# per-node operations


def predict_observation(
    belief: GaussianBelief,
    state_map: Callable,
    obs_map: Callable,
    steps,
    method: str = "fd",
    scaling: SUTScaling = SUTScaling(),
) -> tuple[GaussianBelief, GaussianBelief, dict]:
    """Propagate a state belief one node ahead and predict its observation.

    Returns the propagated state belief, the observation belief, and the
    Jacobians (``F``, ``H``) or sigma-point cross covariances used.
    """
    if method == "fd":
        F = fd_jacobian(state_map, belief.mean, steps)
        state = linear_propagate(belief, F, state_map)
        H = fd_jacobian(obs_map, state.mean, steps)
        obs = linear_propagate(state, H, obs_map)
        return state, obs, {"F": F, "H": H}
    if method == "sut":
        state, cross_x = sut_propagate(belief, state_map, scaling)
        obs, cross_xz = sut_propagate(state, obs_map, scaling)
        # statistical linearization of h, usable wherever a Jacobian is expected
        H = np.linalg.lstsq(state.cov, cross_xz, rcond=None)[0].T
        return state, obs, {"H": H, "cross_state": cross_x, "cross_obs": cross_xz}
    raise ValueError(f"unknown propagation method {method!r}")


def condition_cost(
    state: GaussianBelief,
    cost_map: Callable,
    obs_jacobian,
    z_observed,
    mu_z,
    steps,
    innovation: Callable | None = None,
) -> tuple[GaussianBelief, bool]:
    """Cost belief at the node conditioned on the selected candidate's observation.

    Builds the joint (y, z) Gaussian from the cost Jacobian Y and the
    observation Jacobian H against the propagated state covariance. Returns
    the conditioned belief and whether it fell back to the unconditioned one.
    """
    Y = fd_jacobian(cost_map, state.mean, steps)
    H = np.atleast_2d(obs_jacobian)
    mu_y = np.atleast_1d(np.asarray(cost_map(state.mean), dtype=float))
    if not np.all(np.isfinite(mu_y)):
        raise PropagationError("non-finite cost at the belief mean", state.mean)
    P = state.cov
    cov_yy = Y @ P @ Y.T
    cov_yz = Y @ P @ H.T
    cov_zz = H @ P @ H.T
    prior = GaussianBelief(mu_y, 0.5 * (cov_yy + cov_yy.T))
    z = np.atleast_1d(np.asarray(z_observed, dtype=float))
    mu_z = np.atleast_1d(np.asarray(mu_z, dtype=float))
    # condition() works with z - mean_z; wrap the innovation first if needed
    delta = innovation(z, mu_z) if innovation is not None else z - mu_z
    if not np.all(np.isfinite(cov_zz)) or np.linalg.cond(cov_zz) > 1e12:
        return prior, True
    joint = JointGaussian(mu_y, np.zeros_like(mu_z), prior.cov, cov_yz, 0.5 * (cov_zz + cov_zz.T))
    try:
        return condition(joint, delta), False
    except DegenerateCovarianceError:
        return prior, True


def select_candidate(
    ids: np.ndarray,
    observations: np.ndarray,
    obs_belief: GaussianBelief,
    residual: Callable = np.subtract,
    mode: str = "deterministic",
    rng: np.random.Generator | None = None,
    regularizer=None,
) -> tuple[int, np.ndarray, float]:
    """Pick the candidate whose observation is most probable under ``obs_belief``.

    ``ids``/``observations`` must already exclude visited targets. Returns
    ``(id, z, squared Mahalanobis distance)``. Deterministic ties go to the
    smallest id.
    """
    ids = np.asarray(ids)
    if ids.size == 0:
        raise CandidateExhaustedError("no unvisited candidate left")
    obs = np.asarray(observations, dtype=float).reshape(ids.size, obs_belief.dim)
    reg = default_regularizer(obs_belief.cov) if regularizer is None else regularizer
    cov = obs_belief.cov + reg
    delta = residual(obs, obs_belief.mean)
    chol = np.linalg.cholesky(cov)
    white = np.linalg.solve(chol, delta.T)
    d2 = np.sum(white * white, axis=0)
    if mode == "deterministic":
        best = int(np.lexsort((ids, d2))[0])
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic selection needs a random generator")
        weights = np.exp(-0.5 * (d2 - d2.min()))
        best = int(rng.choice(ids.size, p=weights / weights.sum()))
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return int(ids[best]), obs[best], float(d2[best])


def node_penalty(quad_z: float, quad_y: float, dof: int, alpha: float) -> float:
    """Chi-square slack constraint value c_k; non-positive means satisfied."""
    return quad_z + quad_y - chi_square_quantile(dof, alpha)


def _logdet(cov: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(cov)
    if sign <= 0:
        raise DegenerateCovarianceError("covariance is not positive definite")
    return float(value)


@dataclass
class _Walk:
    """Everything needed to resume an evaluation after a given node."""

    context: Any
    available: np.ndarray
    terms: list[float]
    nodes: list[NodeEvaluation]


def _prepare(design, problem: SequenceProblem, settings: ObjectiveSettings):
    x = design.flatten() if isinstance(design, DesignVector) else np.asarray(design, dtype=float)
    nodes = problem.layout.unflatten(x)
    dof = settings.dof if settings.dof is not None else problem.default_dof()
    threshold = chi_square_quantile(dof, settings.alpha)
    return x, nodes, threshold


def _initial_available(problem: SequenceProblem) -> np.ndarray:
    candidate_ids = np.asarray(problem.candidate_ids)
    available = np.ones(candidate_ids.size, dtype=bool)
    for banned in problem.excluded():
        available &= candidate_ids != banned
    return available


def _evaluate_node(problem, context, node, k, available, settings, threshold, rng):
    candidate_ids = np.asarray(problem.candidate_ids)
    try:
        prediction = problem.predict(context, node, k)
        ids = candidate_ids[available]
        if ids.size == 0:
            raise CandidateExhaustedError("no unvisited candidate left", k)
        observations = problem.observe(context, node, prediction, ids)
        reg = default_regularizer(prediction.obs.cov)
        cand, z, quad_z = select_candidate(
            ids, observations, prediction.obs, problem.residual,
            settings.selection, rng, reg,
        )
        outcome = problem.transfer(context, node, prediction, cand, z)
    except (PropagationError, DegenerateCovarianceError, np.linalg.LinAlgError) as exc:
        raise EvaluationError(str(exc), k) from exc

    mu_y = float(outcome.cost_belief.mean[0])
    var_y = max(float(outcome.cost_belief.cov[0, 0]), SIGMA_Y_FLOOR)
    quad_y = (outcome.y - mu_y) ** 2 / var_y
    penalty = quad_z + quad_y - threshold
    cov_z = prediction.obs.cov + reg
    logdet_z = _logdet(cov_z)
    prior_log = -0.5 * quad_z - 0.5 * logdet_z - 0.5 * problem.n_obs * math.log(2.0 * math.pi)
    if settings.mode == "chi_square":
        term = outcome.y + node.kappa * max(0.0, penalty)
    else:
        term = outcome.y + logdet_z + math.log(var_y) + quad_z + quad_y
    if not math.isfinite(term):
        raise EvaluationError("non-finite objective term", k)
    record = NodeEvaluation(
        selected_id=cand, z=np.asarray(z), mu_z=prediction.obs.mean, sigma_z=prediction.obs.cov,
        y=outcome.y, mu_y=mu_y, sigma_y=var_y, quad_z=quad_z, quad_y=quad_y,
        penalty=penalty, prior_logdensity=prior_log, degenerate=outcome.degenerate,
        info=outcome.info,
    )
    return record, term, outcome.context, available & (candidate_ids != cand)


def _finish(problem, context, records, terms) -> SequenceEvaluation:
    objective = 0.0
    total = 0.0
    for record, term in zip(records, terms):
        objective += term
        total += record.y
    closing = problem.closing_cost(context)
    objective += closing
    total += closing
    if not math.isfinite(objective):
        raise EvaluationError("non-finite objective")
    return SequenceEvaluation(list(records), objective, total, [r.selected_id for r in records], closing)


def _walk(problem, nodes, settings, threshold, rng, start: int, context, available, keep=None):
    """Evaluate nodes from ``start``; returns the per-node snapshots taken along the way."""
    snapshots = []
    for k in range(start, len(nodes)):
        record, term, context, available = _evaluate_node(
            problem, context, nodes[k], k, available, settings, threshold, rng)
        snapshots.append((record, term, context, available))
        if keep is not None and keep(k, context, available):
            break
    return snapshots


def evaluate_sequence(
    design,
    problem: SequenceProblem,
    settings: ObjectiveSettings = ObjectiveSettings(),
) -> SequenceEvaluation:
    """Walk the nodes once: propagate, select, cost, condition, penalize."""
    _, nodes, threshold = _prepare(design, problem, settings)
    rng = np.random.default_rng(settings.seed) if settings.selection == "stochastic" else None
    context = problem.start()
    snapshots = _walk(problem, nodes, settings, threshold, rng, 0, context, _initial_available(problem))
    final = snapshots[-1][2] if snapshots else context
    return _finish(problem, final, [s[0] for s in snapshots], [s[1] for s in snapshots])


class SequenceObjective:
    """Picklable ``x -> objective`` wrapper, so restarts can run in worker processes.

    With deterministic selection the last full evaluation is kept. A probe
    that changes a single node only re-walks from that node, and stops as
    soon as the walk is back on the cached context (same selection, same
    visited set), reusing the cached tail. The result is bit-identical to
    a full evaluation.
    """

    def __init__(self, problem: SequenceProblem, settings: ObjectiveSettings = ObjectiveSettings(), incremental: bool = True):
        self.problem = problem
        self.settings = settings
        self.incremental = incremental and settings.selection == "deterministic"
        self._base = None

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_base"] = None
        return state

    def __call__(self, x) -> float:
        return self.evaluate(x).objective

    def evaluate(self, x) -> SequenceEvaluation:
        x = np.asarray(x, dtype=float)
        if self.incremental and self._base is not None:
            hit = self._from_base(x)
            if hit is not None:
                return hit
        x, nodes, threshold = _prepare(x, self.problem, self.settings)
        rng = np.random.default_rng(self.settings.seed) if self.settings.selection == "stochastic" else None
        start = self.problem.start()
        snapshots = _walk(self.problem, nodes, self.settings, threshold, rng, 0, start,
                          _initial_available(self.problem))
        if self.incremental:
            self._base = (x.copy(), start, snapshots, threshold)
        final = snapshots[-1][2] if snapshots else start
        return _finish(self.problem, final, [s[0] for s in snapshots], [s[1] for s in snapshots])

    def _from_base(self, x: np.ndarray):
        base_x, start, snapshots, threshold = self._base
        if x.shape != base_x.shape:
            return None
        per = self.problem.layout.per_node
        changed = np.flatnonzero(np.any((x != base_x).reshape(-1, per), axis=1))
        if changed.size != 1:
            return None if changed.size else _finish(
                self.problem, snapshots[-1][2], [s[0] for s in snapshots], [s[1] for s in snapshots])
        k = int(changed[0])
        key = self.problem.context_key
        nodes = self.problem.layout.unflatten(x)
        if k == 0:
            context, available = start, _initial_available(self.problem)
        else:
            _, _, context, available = snapshots[k - 1]

        def back_on_track(j, ctx, avail):
            ref = snapshots[j]
            return key(ctx) is not None and key(ctx) == key(ref[2]) and np.array_equal(avail, ref[3])

        fresh = _walk(self.problem, nodes, self.settings, threshold, None, k, context, available, back_on_track)
        merged = snapshots[:k] + fresh + snapshots[k + len(fresh):]
        final = merged[-1][2]
        return _finish(self.problem, final, [s[0] for s in merged], [s[1] for s in merged])

    def monitor(self, x) -> tuple[float, tuple[int, ...]]:
        ev = self.evaluate(x)
        return ev.max_penalty, tuple(ev.route)

    def feasible(self, x) -> bool:
        return self.evaluate(x).feasible
