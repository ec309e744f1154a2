"""Keplerian elements, J2 secular drift and the near-circular transfer cost model.

Internal units are km, km/s, radians and days (MJD2000). Ephemeris files are
in metres and radians and are converted on ingestion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

SECONDS_PER_DAY = 86400.0
TWO_PI = 2.0 * math.pi
EPHEMERIS_COLUMNS = ("id", "epoch_mjd2000", "a_m", "e", "i_rad", "raan_rad", "argp_rad", "m_rad")


class EphemerisError(ValueError):
    """An ephemeris record failed to parse or validate."""


class SingularityError(ArithmeticError):
    """The equations of motion were evaluated at the origin."""


@dataclass(frozen=True)
class Constants:
    mu: float = 398600.4418  # km^3/s^2
    j2: float = 1.08262668e-3
    r_eq: float = 6378.137  # km


EARTH = Constants()


def wrap_2pi(angle):
    return np.mod(angle, TWO_PI)


def wrap_pi(angle):
    """Wrap to (-pi, pi]."""
    wrapped = math.pi - np.mod(math.pi - np.asarray(angle, dtype=float), TWO_PI)
    return float(wrapped) if wrapped.ndim == 0 else wrapped


@dataclass(frozen=True)
class OrbitalElements:
    a: float  # km
    e: float
    i: float  # rad
    raan: float  # rad
    argp: float  # rad
    mean_anom: float  # rad
    epoch: float = 0.0  # days MJD2000

    def __post_init__(self):
        for name in ("a", "e", "i", "raan", "argp", "mean_anom", "epoch"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite orbital element {name}")
        if self.a <= EARTH.r_eq:
            raise ValueError(f"semi-major axis {self.a} km is inside the Earth")
        if not 0.0 <= self.e < 1.0:
            raise ValueError(f"eccentricity {self.e} outside [0, 1)")
        if not 0.0 <= self.i <= math.pi:
            raise ValueError(f"inclination {self.i} outside [0, pi]")
        for name in ("raan", "argp", "mean_anom"):
            object.__setattr__(self, name, float(wrap_2pi(getattr(self, name))))

    @property
    def p(self) -> float:
        return self.a * (1.0 - self.e**2)


@dataclass(frozen=True)
class CartesianState:
    position: np.ndarray  # km
    velocity: np.ndarray  # km/s

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, y) -> "CartesianState":
        y = np.asarray(y, dtype=float)
        return cls(y[:3], y[3:6])


@dataclass(frozen=True)
class TransferCost:
    dv_a: float
    dv_e: float
    dv_i: float
    dv_raan: float
    dv_total: float


class SecularRates(NamedTuple):
    raan_dot: float  # rad/s
    argp_dot: float  # rad/s
    mean_motion: float  # rad/s


def raan_rate(a, e, i, constants: Constants = EARTH):
    """Nodal regression rate in rad/s; vectorized over numpy inputs."""
    if isinstance(a, float) and isinstance(e, float) and isinstance(i, float):
        n = math.sqrt(constants.mu / a**3)
        p = a * (1.0 - e * e)
        return -1.5 * constants.j2 * (constants.r_eq / p) ** 2 * n * math.cos(i)
    n = np.sqrt(constants.mu / np.asarray(a, dtype=float) ** 3)
    p = a * (1.0 - np.asarray(e, dtype=float) ** 2)
    return -1.5 * constants.j2 * (constants.r_eq / p) ** 2 * n * np.cos(i)


def secular_rates(el: OrbitalElements, constants: Constants = EARTH) -> SecularRates:
    n = math.sqrt(constants.mu / el.a**3)
    factor = constants.j2 * (constants.r_eq / el.p) ** 2 * n
    cos_i = math.cos(el.i)
    return SecularRates(
        raan_dot=-1.5 * factor * cos_i,
        argp_dot=0.75 * factor * (5.0 * cos_i**2 - 1.0),
        mean_motion=n,
    )


def advance_elements(el: OrbitalElements, t: float, constants: Constants = EARTH) -> OrbitalElements:
    """Secular J2 advance of the angles to epoch ``t``; a, e, i are held fixed."""
    if t == el.epoch:
        return el
    rates = secular_rates(el, constants)
    dt = (t - el.epoch) * SECONDS_PER_DAY
    return replace(
        el,
        raan=el.raan + rates.raan_dot * dt,
        argp=el.argp + rates.argp_dot * dt,
        mean_anom=el.mean_anom + rates.mean_motion * dt,
        epoch=t,
    )


def _accel(x: float, y: float, z: float, constants: Constants) -> tuple[float, float, float]:
    r2 = x * x + y * y + z * z
    if r2 == 0.0:
        raise SingularityError("J2 acceleration evaluated at r = 0")
    r = math.sqrt(r2)
    k = constants.mu / (r2 * r)
    j = 1.5 * constants.j2 * constants.r_eq**2 / r2
    zz = 5.0 * z * z / r2
    common = 1.0 + j * (1.0 - zz)
    return -k * x * common, -k * y * common, -k * z * (1.0 + j * (3.0 - zz))


def j2_ode(state: CartesianState, constants: Constants = EARTH) -> np.ndarray:
    """Time derivative (velocity, acceleration) of a Cartesian state under two-body + J2."""
    ax, ay, az = _accel(*state.position, constants)
    return np.array([*state.velocity, ax, ay, az])


def rk4_propagate(
    state: CartesianState, dt_total: float, step: float = 10.0, constants: Constants = EARTH
) -> CartesianState:
    """Classic fourth-order Runge-Kutta over :func:`j2_ode`; the last step is shortened."""
    if step <= 0.0:
        raise ValueError("RK4 step must be positive")
    if dt_total == 0.0:
        return state
    direction = 1.0 if dt_total > 0.0 else -1.0
    remaining = abs(dt_total)
    x, y, z = state.position
    vx, vy, vz = state.velocity
    while remaining > 0.0:
        h = direction * min(step, remaining)
        remaining -= abs(h)
        if remaining < 1e-9 * step:
            remaining = 0.0
        a1 = _accel(x, y, z, constants)
        h2 = 0.5 * h
        a2 = _accel(x + h2 * vx, y + h2 * vy, z + h2 * vz, constants)
        v2 = (vx + h2 * a1[0], vy + h2 * a1[1], vz + h2 * a1[2])
        a3 = _accel(x + h2 * v2[0], y + h2 * v2[1], z + h2 * v2[2], constants)
        v3 = (vx + h2 * a2[0], vy + h2 * a2[1], vz + h2 * a2[2])
        a4 = _accel(x + h * v3[0], y + h * v3[1], z + h * v3[2], constants)
        v4 = (vx + h * a3[0], vy + h * a3[1], vz + h * a3[2])
        h6 = h / 6.0
        x += h6 * (vx + 2.0 * v2[0] + 2.0 * v3[0] + v4[0])
        y += h6 * (vy + 2.0 * v2[1] + 2.0 * v3[1] + v4[1])
        z += h6 * (vz + 2.0 * v2[2] + 2.0 * v3[2] + v4[2])
        vx += h6 * (a1[0] + 2.0 * a2[0] + 2.0 * a3[0] + a4[0])
        vy += h6 * (a1[1] + 2.0 * a2[1] + 2.0 * a3[1] + a4[1])
        vz += h6 * (a1[2] + 2.0 * a2[2] + 2.0 * a3[2] + a4[2])
    return CartesianState((x, y, z), (vx, vy, vz))


def specific_energy(state: CartesianState, constants: Constants = EARTH) -> float:
    """Orbital energy including the J2 potential term, km^2/s^2."""
    r = float(np.linalg.norm(state.position))
    z = state.position[2]
    v2 = float(state.velocity @ state.velocity)
    j2_term = constants.mu * constants.j2 * constants.r_eq**2 * (3.0 * z * z / r**2 - 1.0) / (2.0 * r**3)
    return 0.5 * v2 - constants.mu / r + j2_term


def _kepler_eccentric_anomaly(mean_anom: float, e: float) -> float:
    ecc = mean_anom if e < 0.8 else math.pi
    for _ in range(50):
        delta = (ecc - e * math.sin(ecc) - mean_anom) / (1.0 - e * math.cos(ecc))
        ecc -= delta
        if abs(delta) < 1e-15:
            break
    return ecc


def elements_to_cartesian(el: OrbitalElements, constants: Constants = EARTH) -> CartesianState:
    ecc = _kepler_eccentric_anomaly(el.mean_anom, el.e)
    nu = 2.0 * math.atan2(math.sqrt(1.0 + el.e) * math.sin(0.5 * ecc), math.sqrt(1.0 - el.e) * math.cos(0.5 * ecc))
    r = el.a * (1.0 - el.e * math.cos(ecc))
    h = math.sqrt(constants.mu * el.p)
    r_pf = np.array([r * math.cos(nu), r * math.sin(nu), 0.0])
    v_pf = np.array([-constants.mu / h * math.sin(nu), constants.mu / h * (el.e + math.cos(nu)), 0.0])
    cO, sO = math.cos(el.raan), math.sin(el.raan)
    cw, sw = math.cos(el.argp), math.sin(el.argp)
    ci, si = math.cos(el.i), math.sin(el.i)
    rot = np.array([
        [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
        [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
        [sw * si, cw * si, ci],
    ])
    return CartesianState(rot @ r_pf, rot @ v_pf)


def node_longitude(state: CartesianState) -> float:
    """Right ascension of the ascending node of the osculating orbit, rad."""
    h = np.cross(state.position, state.velocity)
    return float(wrap_2pi(math.atan2(h[0], -h[1])))


def transfer_cost(
    origin: OrbitalElements,
    target: OrbitalElements,
    tof: float,
    constants: Constants = EARTH,
) -> TransferCost:
    """Approximate impulsive cost (km/s) of rendezvous after ``tof`` days.

    Both element sets are compared at the origin epoch; the target is advanced
    there first if needed. The node mismatch is measured along the shorter arc.
    """
    if target.epoch != origin.epoch:
        target = advance_elements(target, origin.epoch, constants)
    v0 = math.sqrt(constants.mu / origin.a)
    dt = tof * SECONDS_PER_DAY
    drift0 = raan_rate(origin.a, origin.e, origin.i, constants) * dt
    driftf = raan_rate(target.a, target.e, target.i, constants) * dt
    d_raan = abs(wrap_pi((target.raan + driftf) - (origin.raan + drift0)))
    return _cost_components(
        abs(origin.a - target.a), abs(origin.e - target.e), abs(origin.i - target.i),
        d_raan, origin.a, origin.i, v0,
    )


def _cost_components(da, de, di, d_raan, a0, i0, v0) -> TransferCost:
    dv_a = 0.5 * da / a0 * v0
    dv_e = 0.5 * de * v0
    dv_i = 2.0 * v0 * math.sin(0.5 * di)
    dv_raan = math.sin(i0) * d_raan * v0
    total = math.sqrt(dv_a**2 + dv_e**2 + dv_i**2) + dv_raan
    return TransferCost(dv_a, dv_e, dv_i, dv_raan, total)


def elements_from_record(row: Mapping[str, str] | Iterable, constants: Constants = EARTH) -> tuple[int, OrbitalElements]:
    """Parse one ephemeris row (metres, radians) into ``(id, OrbitalElements)`` in km."""
    if not isinstance(row, Mapping):
        row = dict(zip(EPHEMERIS_COLUMNS, row))
    label = row.get("id", "?")
    try:
        debris_id = int(float(row["id"]))
        values = {name: float(row[name]) for name in EPHEMERIS_COLUMNS[1:]}
    except (KeyError, TypeError, ValueError) as exc:
        raise EphemerisError(f"row {label}: cannot parse ({exc})") from exc
    if not all(math.isfinite(v) for v in values.values()):
        raise EphemerisError(f"row {label}: non-finite field")
    a_km = values["a_m"] / 1000.0
    if a_km <= constants.r_eq:
        raise EphemerisError(f"row {label}: semi-major axis {a_km:.3f} km is below the equatorial radius")
    if not 0.0 <= values["e"] < 1.0:
        raise EphemerisError(f"row {label}: eccentricity {values['e']} outside [0, 1)")
    if not 0.0 <= values["i_rad"] <= math.pi:
        raise EphemerisError(f"row {label}: inclination {values['i_rad']} outside [0, pi]")
    el = OrbitalElements(
        a=a_km, e=values["e"], i=values["i_rad"], raan=values["raan_rad"],
        argp=values["argp_rad"], mean_anom=values["m_rad"], epoch=values["epoch_mjd2000"],
    )
    return debris_id, el


def read_ephemeris(path: str | Path, constants: Constants = EARTH) -> dict[int, OrbitalElements]:
    """Load an ephemeris CSV with the canonical header into ``{id: elements}``."""
    catalog: dict[int, OrbitalElements] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(EPHEMERIS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise EphemerisError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            debris_id, el = elements_from_record(row, constants)
            if debris_id in catalog:
                raise EphemerisError(f"row {debris_id}: duplicate id")
            catalog[debris_id] = el
    return catalog


def write_ephemeris(catalog: Mapping[int, OrbitalElements], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPHEMERIS_COLUMNS)
        for debris_id in sorted(catalog):
            el = catalog[debris_id]
            writer.writerow([
                debris_id, repr(el.epoch), repr(el.a * 1000.0), repr(el.e), repr(el.i),
                repr(el.raan), repr(el.argp), repr(el.mean_anom),
            ])


def convert_gtoc9_table(src: str | Path, dst: str | Path) -> int:
    """Convert the whitespace-separated GTOC-9 debris table to the CSV schema.

    Lines that do not start with a number (headers, comments) are skipped.
    Returns the number of rows written.
    """
    rows = []
    with open(src) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.replace(",", " ").split()
            if not fields:
                continue
            try:
                float(fields[0])
            except ValueError:
                continue
            if len(fields) < len(EPHEMERIS_COLUMNS):
                raise EphemerisError(f"{src}:{lineno}: expected {len(EPHEMERIS_COLUMNS)} fields")
            elements_from_record(fields[: len(EPHEMERIS_COLUMNS)])
            rows.append(fields[: len(EPHEMERIS_COLUMNS)])
    with open(dst, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPHEMERIS_COLUMNS)
        for fields in rows:
            writer.writerow([str(int(float(fields[0])))] + fields[1:])
    return len(rows)


def _osculating_a_i(state: CartesianState, constants: Constants) -> tuple[float, float]:
    r = float(np.linalg.norm(state.position))
    v2 = float(state.velocity @ state.velocity)
    h = np.cross(state.position, state.velocity)
    return 1.0 / (2.0 / r - v2 / constants.mu), math.acos(h[2] / np.linalg.norm(h))


def _orbit_average(state: CartesianState, step: float, constants: Constants, samples: int = 64):
    """Orbit-averaged (a, i, node) starting from ``state``; node is unwrapped about its start."""
    a0, _ = _osculating_a_i(state, constants)
    dt = TWO_PI * math.sqrt(a0**3 / constants.mu) / samples
    ref = node_longitude(state)
    acc = np.zeros(3)
    for _ in range(samples):
        a, inc = _osculating_a_i(state, constants)
        acc += (a, inc, wrap_pi(node_longitude(state) - ref))
        state = rk4_propagate(state, dt, step, constants)
    a_mean, i_mean, dnode = acc / samples
    return a_mean, i_mean, ref + dnode


def mean_matched_state(
    el: OrbitalElements, step: float = 10.0, constants: Constants = EARTH, iterations: int = 4
) -> CartesianState:
    """Cartesian state whose orbit-averaged a and i equal those of ``el``.

    The secular rates describe mean elements; starting the integration from
    ``el`` taken as osculating biases the drift by the short-period offset.
    """
    guess = el
    for _ in range(iterations):
        state = elements_to_cartesian(guess, constants)
        a_mean, i_mean, _ = _orbit_average(state, step, constants)
        guess = replace(guess, a=guess.a + (el.a - a_mean), i=min(max(guess.i + (el.i - i_mean), 0.0), math.pi))
    return elements_to_cartesian(guess, constants)


def compare_secular_rk4(
    el: OrbitalElements, days: float, step: float = 10.0, constants: Constants = EARTH
) -> tuple[float, float]:
    """Node drift (rad) over ``days`` from the secular model and from RK4 integration.

    The integrated node is averaged over one orbit at each end so that the
    short-period J2 terms cancel.
    """
    secular = secular_rates(el, constants).raan_dot * days * SECONDS_PER_DAY
    if days == 0.0:
        return 0.0, 0.0
    start = mean_matched_state(el, step, constants)
    _, _, node0 = _orbit_average(start, step, constants)
    end = rk4_propagate(start, days * SECONDS_PER_DAY, step, constants)
    _, _, node1 = _orbit_average(end, step, constants)
    integrated = wrap_pi(node1 - node0)
    # restore full turns the wrap removed
    integrated += TWO_PI * round((secular - integrated) / TWO_PI)
    return secular, float(integrated)
