"""Multiple debris rendezvous backend.

A single spacecraft visits debris one after another, staying ``dwell`` days
at each before departing. At node k the expected debris is a Gaussian over
(a, e, i, RAAN) centred on the spacecraft elements plus an offset; it is
drifted by the J2 nodal regression over the time of flight, candidates are
scored by their RAAN at arrival, and the leg cost is the approximate
impulsive delta-v.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field, replace
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
    condition_cost,
    evaluate_sequence,
    predict_observation,
)
from .gaussian import GaussianBelief
from .optimizer import OptimizerConfig, SolveTrace, minimize, multi_start
from .orbital import (
    EARTH,
    SECONDS_PER_DAY,
    OrbitalElements,
    _cost_components,
    advance_elements,
    raan_rate,
    read_ephemeris,
    transfer_cost,
    wrap_2pi,
    wrap_pi,
)

DATA_ENV = "TSPC_DATA_DIR"
CATALOG_FILENAME = "gtoc9_debris.csv"
SYNTHETIC_FIXTURE = Path(__file__).parent / "data" / "synthetic_debris.csv"

DEBRIS_FIELDS = ("a", "e", "i", "raan")
FIELD_NAMES = ("tof", "mu_a", "mu_e", "mu_i", "mu_raan", "sigma_a", "sigma_e", "sigma_i", "sigma_raan", "kappa")
# units: days, km, -, deg, deg, km, -, deg, deg, -
DEBRIS_LOWER = np.array([0.5, -150.0, -1e-3, -1.5, -8.0, 5.0, 1e-4, 0.1, 0.1, 1e-3])
DEBRIS_UPPER = np.array([25.0, 150.0, 1e-3, 1.5, 8.0, 50.0, 1e-3, 1.0, 8.0, 300.0])
DEBRIS_DEFAULT = np.array([20.0, 0.0, 0.0, 0.0, 0.0, 30.0, 5e-4, 0.5, 5.0, 50.0])

# finite-difference steps for the belief Jacobians, in state units (km, -, rad, rad)
STATE_FD_STEPS = np.array([1e-2, 1e-4, math.radians(1e-3), math.radians(1e-3)])
# optimizer steps over one node of the design vector, in design units
DESIGN_FD_STEPS = np.array([1e-3, 1e-2, 1e-4, 1e-3, 1e-3, 1e-2, 1e-5, 1e-3, 1e-3, 1e-3])

REFERENCE_ROUTE = (23, 55, 113, 79, 121, 117, 57, 20, 27, 84, 83, 50, 118, 25, 95)
REFERENCE_TOTAL_DV = 3337.0  # m/s
REFERENCE_STATISTICS = {
    # field: (mean, std, max, min); a in km, angles in degrees
    "a": (7131.6, 58.503, 7274.0, 6996.1),
    "e": (0.0071438, 0.004901, 0.019318, 0.00013122),
    "i": (98.415, 0.84304, 101.07, 96.236),
    "raan": (172.93, 103.88, 347.76, 7.6191),
}
# JPL sequence, kept as reference data only
JPL_ROUTE = (23, 55, 79, 113, 25, 20, 27, 117, 121, 50, 95, 102, 38, 97)
JPL_TOFS = (24.86, 24.98, 22.42, 24.99, 0.29, 10.63, 25.00, 2.70, 1.51, 1.41, 24.67, 24.31, 5.86)
JPL_DVS = (161.8, 139.2, 65.8, 208.2, 115.2, 300.1, 564.9, 78.3, 105.0, 233.3, 453.5, 340.4, 300.8)


class CatalogNotFoundError(FileNotFoundError):
    pass


CATALOG_HELP = (
    "debris catalog not found. Download the GTOC-9 debris table from the competition "
    "website, convert it with `tspc inspect convert --source <table> --ephemeris <csv>` "
    f"and place it at ${DATA_ENV}/{CATALOG_FILENAME}, or pass --ephemeris explicitly."
)


def locate_catalog(path: str | Path | None = None) -> Path:
    """Resolve the catalog file from an explicit path or ``$TSPC_DATA_DIR``."""
    if path is not None:
        candidate = Path(path)
    elif os.environ.get(DATA_ENV):
        candidate = Path(os.environ[DATA_ENV]) / CATALOG_FILENAME
    else:
        raise CatalogNotFoundError(CATALOG_HELP)
    if not candidate.is_file():
        raise CatalogNotFoundError(f"{candidate}: {CATALOG_HELP}")
    return candidate


@dataclass
class DebrisCatalog:
    records: dict[int, OrbitalElements]

    def __post_init__(self):
        if not self.records:
            raise ValueError("empty debris catalog")
        self.ids = np.array(sorted(self.records), dtype=int)
        els = [self.records[int(k)] for k in self.ids]
        self._index = {int(k): j for j, k in enumerate(self.ids)}
        self.a = np.array([el.a for el in els])
        self.e = np.array([el.e for el in els])
        self.i = np.array([el.i for el in els])
        self.raan = np.array([el.raan for el in els])
        self.epoch = np.array([el.epoch for el in els])
        self.raan_dot = raan_rate(self.a, self.e, self.i)

    @classmethod
    def from_file(cls, path: str | Path) -> "DebrisCatalog":
        return cls(read_ephemeris(path))

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, debris_id) -> bool:
        return int(debris_id) in self.records

    def __getitem__(self, debris_id) -> OrbitalElements:
        return self.records[int(debris_id)]

    def elements_at(self, debris_id: int, t: float) -> OrbitalElements:
        return advance_elements(self.records[int(debris_id)], t)

    def raan_at(self, t: float, ids=None) -> np.ndarray:
        """RAAN (rad, in [0, 2pi)) of the given debris at epoch ``t``."""
        rows = self.ids if ids is None else np.asarray(ids)
        j = np.array([self._index[int(k)] for k in rows], dtype=int)
        return wrap_2pi(self.raan[j] + self.raan_dot[j] * (t - self.epoch[j]) * SECONDS_PER_DAY)


def catalog_statistics(catalog: DebrisCatalog | Mapping[int, OrbitalElements]) -> dict[str, dict[str, float]]:
    """Mean, sample standard deviation, maximum and minimum of a, e, i, RAAN.

    Angles are reported in degrees, a in km. A single entry has zero spread.
    """
    if not isinstance(catalog, DebrisCatalog):
        catalog = DebrisCatalog(dict(catalog))
    columns = {
        "a": catalog.a,
        "e": catalog.e,
        "i": np.degrees(catalog.i),
        "raan": np.degrees(catalog.raan),
    }
    out = {}
    for name, values in columns.items():
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        out[name] = {"mean": float(values.mean()), "std": std, "max": float(values.max()), "min": float(values.min())}
    return out


def generate_synthetic_catalog(
    n: int = 20, first_id: int = 10, seed: int = 0, epoch: float = 23557.0, raan_window: float = 40.0,
) -> dict[int, OrbitalElements]:
    """Random sun-synchronous-like debris with the a, e, i spreads of the reference table.

    RAAN is drawn from a ``raan_window``-degree band rather than the full
    circle, so that a short catalog still offers neighbours within the
    offset bounds, as the dense full catalog does.
    """
    rng = np.random.default_rng(seed)
    raan0 = rng.uniform(0.0, 2.0 * math.pi)
    stats = REFERENCE_STATISTICS
    out = {}
    for k in range(n):
        a = float(np.clip(rng.normal(stats["a"][0], stats["a"][1]), stats["a"][3], stats["a"][2]))
        e = float(np.clip(rng.normal(stats["e"][0], stats["e"][1]), stats["e"][3], stats["e"][2]))
        i = float(np.clip(rng.normal(stats["i"][0], stats["i"][1]), stats["i"][3], stats["i"][2]))
        out[first_id + k] = OrbitalElements(
            a=a, e=e, i=math.radians(i), raan=raan0 + math.radians(float(rng.uniform(0.0, raan_window))),
            argp=float(rng.uniform(0.0, 2.0 * math.pi)), mean_anom=float(rng.uniform(0.0, 2.0 * math.pi)),
            epoch=epoch,
        )
    return out


def load_synthetic_catalog() -> DebrisCatalog:
    return DebrisCatalog.from_file(SYNTHETIC_FIXTURE)


# --------------------------------------------------------------------------
# mission configuration


@dataclass(frozen=True)
class MissionConfig:
    start_epoch: float = 23557.0
    start_debris: int = 23
    n_transfers: int = 14
    dwell: float = 5.0
    fixed_tof: float | None = None
    lower: np.ndarray = field(default_factory=lambda: DEBRIS_LOWER.copy())
    upper: np.ndarray = field(default_factory=lambda: DEBRIS_UPPER.copy())
    initial: np.ndarray = field(default_factory=lambda: DEBRIS_DEFAULT.copy())

    def __post_init__(self):
        if self.n_transfers < 1:
            raise ValueError("n_transfers must be at least 1")
        if self.dwell < 0.0:
            raise ValueError("dwell must be non-negative")
        for name in ("lower", "upper", "initial"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (len(FIELD_NAMES),):
                raise ValueError(f"{name} needs {len(FIELD_NAMES)} entries")
            object.__setattr__(self, name, arr)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")
        if np.any(self.initial < self.lower) or np.any(self.initial > self.upper):
            raise ValueError("initial design value outside its bounds")
        if self.fixed_tof is not None and not self.lower[0] <= self.fixed_tof <= self.upper[0]:
            raise ValueError(f"fixed time of flight {self.fixed_tof} outside [{self.lower[0]}, {self.upper[0]}]")

    def as_dict(self) -> dict:
        return {
            "start_epoch": self.start_epoch,
            "start_debris": self.start_debris,
            "n_transfers": self.n_transfers,
            "dwell_days": self.dwell,
            "fixed_tof_days": self.fixed_tof,
            "lower": dict(zip(FIELD_NAMES, self.lower.tolist())),
            "upper": dict(zip(FIELD_NAMES, self.upper.tolist())),
            "initial": dict(zip(FIELD_NAMES, self.initial.tolist())),
        }


def load_mission_config(path: str | Path) -> MissionConfig:
    """Read a ``key = value`` mission file.

    Keys: start_epoch, start_debris, n_transfers, dwell_days, fixed_tof_days,
    and per-field overrides ``lower.<field>``, ``upper.<field>``,
    ``initial.<field>`` with fields named as in :data:`FIELD_NAMES`.
    Lines starting with ``#`` are comments.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[mission]\n" + Path(path).read_text())
    values = dict(parser["mission"])
    kwargs: dict = {}
    arrays = {"lower": DEBRIS_LOWER.copy(), "upper": DEBRIS_UPPER.copy(), "initial": DEBRIS_DEFAULT.copy()}
    scalar = {"start_epoch": ("start_epoch", float), "start_debris": ("start_debris", int),
              "n_transfers": ("n_transfers", int), "dwell_days": ("dwell", float)}
    for key, raw in values.items():
        if key in scalar:
            name, cast = scalar[key]
            kwargs[name] = cast(raw)
        elif key == "fixed_tof_days":
            kwargs["fixed_tof"] = None if raw.strip().lower() in ("", "none") else float(raw)
        elif "." in key and key.split(".", 1)[0] in arrays:
            kind, fname = key.split(".", 1)
            if fname not in FIELD_NAMES:
                raise ValueError(f"{path}: unknown design field {fname!r}")
            arrays[kind][FIELD_NAMES.index(fname)] = float(raw)
        else:
            raise ValueError(f"{path}: unknown key {key!r}")
    return MissionConfig(**kwargs, **arrays)


# --------------------------------------------------------------------------
# sequence-engine backend


@dataclass(frozen=True)
class _DebrisContext:
    debris: int
    arrival: float


@dataclass(frozen=True)
class _LegPlan:
    spacecraft: OrbitalElements
    depart: float
    tof: float


def _state_map(tof_days: float):
    dt = tof_days * SECONDS_PER_DAY

    def f(x):
        a, e, i, raan = (float(v) for v in x)
        return np.array([a, e, i, raan + raan_rate(a, e, i) * dt])

    return f


def _observe_raan(x):
    return np.array([x[3]])


def _cost_map(spacecraft: OrbitalElements, tof_days: float):
    v0 = math.sqrt(EARTH.mu / spacecraft.a)
    raan_sc = spacecraft.raan + float(raan_rate(spacecraft.a, spacecraft.e, spacecraft.i)) * tof_days * SECONDS_PER_DAY

    def y(x):
        a, e, i, raan = (float(v) for v in x)
        d_raan = abs(wrap_pi(raan - raan_sc))
        cost = _cost_components(abs(spacecraft.a - a), abs(spacecraft.e - e), abs(spacecraft.i - i),
                                d_raan, spacecraft.a, spacecraft.i, v0)
        return np.array([cost.dv_total])

    return y


def _wrapped(z, mu):
    return wrap_pi(np.asarray(z) - np.asarray(mu))


class DebrisProblem(SequenceProblem):
    """Expected-debris backend; costs are in km/s."""

    n_obs = 1
    n_cost = 1

    def __init__(self, catalog: DebrisCatalog, config: MissionConfig = MissionConfig(), fixed_tof: float | None = None):
        if config.start_debris not in catalog:
            raise KeyError(f"start debris {config.start_debris} not in catalog")
        if config.n_transfers > len(catalog) - 1:
            raise ValueError(f"{config.n_transfers} transfers need more than {len(catalog)} catalog entries")
        self.catalog = catalog
        self.config = config
        self.fixed_tof = fixed_tof if fixed_tof is not None else config.fixed_tof
        self.candidate_ids = catalog.ids
        keep = slice(1, None) if self.fixed_tof is not None else slice(None)
        self.layout = DesignLayout(
            n_nodes=config.n_transfers,
            mu_names=DEBRIS_FIELDS,
            node_lower=config.lower[keep],
            node_upper=config.upper[keep],
            node_default=config.initial[keep],
            has_tof=self.fixed_tof is None,
        )
        self.design_fd_steps = np.tile(DESIGN_FD_STEPS[keep], config.n_transfers)

    def excluded(self) -> set[int]:
        return {self.config.start_debris}

    def start(self) -> _DebrisContext:
        return _DebrisContext(self.config.start_debris, self.config.start_epoch)

    def context_key(self, context: _DebrisContext):
        return (context.debris, context.arrival)

    def leg_plan(self, context: _DebrisContext, node: NodeDesign) -> _LegPlan:
        tof = self.fixed_tof if self.fixed_tof is not None else node.tof
        depart = context.arrival + self.config.dwell
        # the spacecraft adopts the elements of the debris it just visited
        return _LegPlan(self.catalog.elements_at(context.debris, depart), depart, float(tof))

    def predict(self, context: _DebrisContext, node: NodeDesign, k: int) -> NodePrediction:
        plan = self.leg_plan(context, node)
        sc = plan.spacecraft
        mu_a, mu_e, mu_i, mu_raan = node.mu
        mean = np.array([sc.a + mu_a, sc.e + mu_e, sc.i + math.radians(mu_i), sc.raan + math.radians(mu_raan)])
        sd = np.array([node.sigma[0], node.sigma[1], math.radians(node.sigma[2]), math.radians(node.sigma[3])])
        belief = GaussianBelief(mean, np.diag(sd * sd))
        state, obs, jac = predict_observation(belief, _state_map(plan.tof), _observe_raan, STATE_FD_STEPS)
        return NodePrediction(obs=obs, state=state, obs_jacobian=jac["H"], extra=plan)

    def observe(self, context, node, prediction: NodePrediction, ids) -> np.ndarray:
        plan = prediction.extra
        return self.catalog.raan_at(plan.depart + plan.tof, ids)[:, None]

    def residual(self, z, mu_z):
        return _wrapped(z, mu_z)

    def transfer(self, context, node, prediction: NodePrediction, cand: int, z) -> TransferOutcome:
        plan = prediction.extra
        belief, fell_back = condition_cost(
            prediction.state, _cost_map(plan.spacecraft, plan.tof), prediction.obs_jacobian,
            z, prediction.obs.mean, STATE_FD_STEPS, innovation=_wrapped,
        )
        leg = transfer_cost(plan.spacecraft, self.catalog[cand], plan.tof)
        arrival = plan.depart + plan.tof
        info = {"depart": plan.depart, "arrival": arrival, "tof": plan.tof, "dv": leg}
        return TransferOutcome(leg.dv_total, belief, _DebrisContext(cand, arrival), fell_back, info)

    def design_sampler(self, spread: float = 0.0):
        """Cold-start sampler: table defaults, with the offsets jittered by ``spread`` of their range."""
        lo, hi = self.layout.bounds()
        mu_idx = np.concatenate([self.layout.field_slice(f"mu_{n}") for n in DEBRIS_FIELDS])

        def sample(rng: np.random.Generator) -> np.ndarray:
            x = self.layout.default_vector()
            if spread > 0.0:
                half = 0.5 * spread * (hi[mu_idx] - lo[mu_idx])
                x[mu_idx] += rng.uniform(-half, half)
            return np.clip(x, lo, hi)

        return sample


def build_debris_problem(catalog: DebrisCatalog, config: MissionConfig = MissionConfig(), fixed_tof: float | None = None) -> DebrisProblem:
    return DebrisProblem(catalog, config, fixed_tof)


@dataclass
class FixedTofResult:
    evaluation: SequenceEvaluation
    trace: SolveTrace
    x: np.ndarray
    route: list[int]


def solve_fixed_tof(
    catalog: DebrisCatalog,
    config: MissionConfig = MissionConfig(),
    optimizer: OptimizerConfig | None = None,
    seed: int = 0,
    fixed_tof: float = 20.0,
    settings: ObjectiveSettings = ObjectiveSettings(),
    spread: float = 0.0,
    jobs: int = 1,
) -> FixedTofResult:
    """First step: optimize the route with every time of flight frozen."""
    problem = build_debris_problem(catalog, config, fixed_tof)
    opt = optimizer or OptimizerConfig()
    if opt.fd_step is None:
        opt = replace(opt, fd_step=problem.design_fd_steps)
    opt = replace(opt, seed=seed)
    objective = SequenceObjective(problem, settings)
    result = multi_start(objective, problem.design_sampler(spread), problem.layout.bounds(), opt,
                         monitor=objective.monitor, feasible=objective.feasible, jobs=jobs)
    evaluation = evaluate_sequence(result.best.x, problem, settings)
    route = [config.start_debris, *evaluation.route]
    return FixedTofResult(evaluation, result.best.trace, result.best.x, route)


@dataclass
class RefineResult:
    route: tuple[int, ...]
    tofs: np.ndarray
    dvs: np.ndarray  # km/s per leg
    total_dv: float  # km/s
    initial_total_dv: float
    trace: SolveTrace


def route_costs(route: Sequence[int], tofs: Sequence[float], catalog: DebrisCatalog, config: MissionConfig = MissionConfig()) -> np.ndarray:
    """Per-leg delta-v (km/s) of a frozen route with the given times of flight."""
    route = list(route)
    if len(tofs) != len(route) - 1:
        raise ValueError(f"{len(route)} ids need {len(route) - 1} times of flight, got {len(tofs)}")
    missing = [k for k in route if k not in catalog]
    if missing:
        raise KeyError(f"route ids not in catalog: {missing}")
    arrival = config.start_epoch
    dvs = []
    for origin, target, tof in zip(route, route[1:], tofs):
        depart = arrival + config.dwell
        dvs.append(transfer_cost(catalog.elements_at(origin, depart), catalog[target], float(tof)).dv_total)
        arrival = depart + float(tof)
    return np.array(dvs)


def refine_tof(
    route: Sequence[int],
    catalog: DebrisCatalog,
    config: MissionConfig = MissionConfig(),
    optimizer: OptimizerConfig | None = None,
    initial_tofs: Sequence[float] | None = None,
) -> RefineResult:
    """Second step: with the route frozen, minimize total delta-v over the times of flight."""
    route = tuple(int(k) for k in route)
    n = len(route) - 1
    if n < 1:
        raise ValueError("route needs at least two ids")
    if len(set(route)) != len(route):
        raise ValueError("route repeats a debris id")
    lo = np.full(n, config.lower[0])
    hi = np.full(n, config.upper[0])
    x0 = np.full(n, config.fixed_tof or config.initial[0]) if initial_tofs is None else np.asarray(initial_tofs, dtype=float)

    def total(t):
        return float(route_costs(route, t, catalog, config).sum())

    opt = optimizer or OptimizerConfig(objective_tolerance=1e-12)
    if opt.fd_step is None:
        opt = replace(opt, fd_step=1e-4)
    x, trace = minimize(total, np.clip(x0, lo, hi), (lo, hi), opt)
    dvs = route_costs(route, x, catalog, config)
    return RefineResult(route, x, dvs, float(dvs.sum()), total(np.clip(x0, lo, hi)), trace)
