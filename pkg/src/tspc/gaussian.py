"""Gaussian belief arithmetic used by the sequence engine.

Densities, Schur-complement conditioning, chi-square quantiles, forward
difference Jacobians and scaled unscented transform propagation. Every
function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammainc

REG_RELATIVE = 1e-9
REG_FLOOR = 1e-12
JITTER_MAX = 1e-10


class DegenerateCovarianceError(ValueError):
    """A covariance could not be inverted or factorized after regularization."""


class PropagationError(ValueError):
    """A mapped function returned non-finite values during propagation."""

    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = None if point is None else np.array(point, dtype=float)


def _as_vector(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float)).ravel()


def _as_matrix(c) -> np.ndarray:
    return np.atleast_2d(np.asarray(c, dtype=float))


@dataclass(frozen=True)
class GaussianBelief:
    """Mean vector and covariance matrix of a normal distribution."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean)
        cov = _as_matrix(self.cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match mean of size {mean.size}"
            )
        if cov.size:
            scale = max(1.0, float(np.abs(cov).max()))
            if float(np.abs(cov - cov.T).max()) > 1e-12 * scale:
                raise ValueError("covariance is not symmetric")
            if float(cov.diagonal().min()) < 0.0:
                raise ValueError("covariance has a negative diagonal entry")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


@dataclass(frozen=True)
class JointGaussian:
    """Jointly Gaussian (y, z) pair stored block-wise."""

    mean_y: np.ndarray
    mean_z: np.ndarray
    cov_yy: np.ndarray
    cov_yz: np.ndarray
    cov_zz: np.ndarray
    cov_zy: np.ndarray = None

    def __post_init__(self):
        mean_y = _as_vector(self.mean_y)
        mean_z = _as_vector(self.mean_z)
        cov_yy = _as_matrix(self.cov_yy)
        cov_zz = _as_matrix(self.cov_zz)
        cov_yz = np.asarray(self.cov_yz, dtype=float).reshape(mean_y.size, mean_z.size)
        cov_zy = cov_yz.T.copy() if self.cov_zy is None else _as_matrix(self.cov_zy)
        if not np.allclose(cov_zy, cov_yz.T, rtol=0.0, atol=1e-12):
            raise ValueError("cov_zy must equal the transpose of cov_yz")
        for name, value in (
            ("mean_y", mean_y), ("mean_z", mean_z), ("cov_yy", cov_yy),
            ("cov_yz", cov_yz), ("cov_zz", cov_zz), ("cov_zy", cov_zy),
        ):
            object.__setattr__(self, name, value)

    def block(self) -> np.ndarray:
        return np.block([[self.cov_yy, self.cov_yz], [self.cov_zy, self.cov_zz]])


@dataclass(frozen=True)
class SUTScaling:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0


@dataclass(frozen=True)
class SigmaPointSet:
    """Sigma points (one per row) with mean and covariance weights."""

    points: np.ndarray
    weights_mean: np.ndarray
    weights_cov: np.ndarray
    scaling: SUTScaling = field(default_factory=SUTScaling)


def default_regularizer(cov) -> np.ndarray:
    """Diagonal regularizer scaled to the covariance diagonal, floored at 1e-12."""
    diag = np.abs(np.diag(_as_matrix(cov)))
    return np.diag(np.maximum(REG_RELATIVE * diag, REG_FLOOR))


def _regularized_cholesky(cov: np.ndarray, regularizer=None) -> np.ndarray:
    if not np.isfinite(cov).all():
        raise DegenerateCovarianceError("covariance has non-finite entries")
    reg = default_regularizer(cov) if regularizer is None else _as_matrix(regularizer)
    try:
        return np.linalg.cholesky(cov + reg)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(
            "covariance is singular after regularization"
        ) from exc


def log_density(x, belief: GaussianBelief, regularizer=None) -> float:
    """Log of the normal density N(x | mean, cov)."""
    x = _as_vector(x)
    if x.size != belief.dim:
        raise ValueError(f"point of size {x.size} against belief of size {belief.dim}")
    chol = _regularized_cholesky(belief.cov, regularizer)
    white = np.linalg.solve(chol, x - belief.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * white @ white - 0.5 * logdet - 0.5 * belief.dim * math.log(2.0 * math.pi))


def mahalanobis_sq(x, belief: GaussianBelief, regularizer=None) -> float:
    """Squared Mahalanobis distance (x - mean)(cov + A)^-1(x - mean)^T.

    ``regularizer`` is the diagonal matrix A; ``None`` selects
    :func:`default_regularizer`. Pass zeros for the unregularized form.
    """
    x = _as_vector(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite point in mahalanobis_sq")
    if regularizer is not None and np.any(np.diag(_as_matrix(regularizer)) < 0.0):
        raise ValueError("regularizer entries must be non-negative")
    chol = _regularized_cholesky(belief.cov, regularizer)
    white = np.linalg.solve(chol, x - belief.mean)
    return float(white @ white)


def mahalanobis_sq_many(points, belief: GaussianBelief, regularizer=None) -> np.ndarray:
    """Row-wise squared Mahalanobis distances for an (m, n) array of points."""
    points = np.asarray(points, dtype=float).reshape(-1, belief.dim)
    chol = _regularized_cholesky(belief.cov, regularizer)
    white = np.linalg.solve(chol, (points - belief.mean).T)
    return np.sum(white * white, axis=0)


def condition(joint: JointGaussian, z_observed, regularizer=None) -> GaussianBelief:
    """Distribution of y given z = z_observed for a jointly Gaussian pair."""
    z = _as_vector(z_observed)
    chol = _regularized_cholesky(joint.cov_zz, regularizer)
    # gain = cov_yz cov_zz^-1, computed through the Cholesky factor
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, joint.cov_zy)).T
    mean = joint.mean_y + gain @ (z - joint.mean_z)
    cov = joint.cov_yy - gain @ joint.cov_zy
    cov = 0.5 * (cov + cov.T)
    idx = np.diag_indices_from(cov)
    cov[idx] = np.maximum(cov[idx], 0.0)
    return GaussianBelief(mean, cov)


def chi_square_cdf(x: float, dof: int) -> float:
    if x <= 0.0:
        return 0.0
    return float(gammainc(0.5 * dof, 0.5 * x))


def chi_square_quantile(dof: int, alpha: float, tol: float = 1e-12) -> float:
    """Inverse chi-square CDF by safeguarded Newton iteration on the incomplete gamma."""
    if int(dof) != dof or dof < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {dof}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    k = 0.5 * dof

    lo, hi = 0.0, max(1.0, float(dof))
    while chi_square_cdf(hi, dof) < alpha:
        lo, hi = hi, 2.0 * hi

    x = 0.5 * (lo + hi)
    for _ in range(200):
        err = chi_square_cdf(x, dof) - alpha
        if abs(err) <= tol:
            return x
        if err > 0.0:
            hi = x
        else:
            lo = x
        log_pdf = (k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - math.lgamma(k)
        pdf = math.exp(log_pdf)
        step = err / pdf if pdf > 0.0 else math.inf
        candidate = x - step
        # fall back to bisection whenever Newton leaves the bracket
        x = candidate if lo < candidate < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return x


def fd_jacobian(f: Callable, x0, steps, central: bool = False) -> np.ndarray:
    """Finite-difference Jacobian of a vector function.

    Forward differences by default, one probe per column with its own step.
    """
    x0 = _as_vector(x0)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), x0.shape)
    if np.any(steps <= 0.0):
        raise ValueError("finite-difference steps must be strictly positive")

    def evaluate(x):
        value = _as_vector(f(x))
        if not np.isfinite(value).all():
            raise PropagationError("non-finite function value during differencing", x)
        return value

    f0 = evaluate(x0)
    jac = np.empty((f0.size, x0.size))
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] += steps[j]
        if central:
            xm = x0.copy()
            xm[j] -= steps[j]
            jac[:, j] = (evaluate(xp) - evaluate(xm)) / (2.0 * steps[j])
        else:
            jac[:, j] = (evaluate(xp) - f0) / steps[j]
    return jac


def linear_propagate(belief: GaussianBelief, jacobian, mean_map: Callable) -> GaussianBelief:
    """First-order propagation: mean through ``mean_map``, covariance as J cov J^T."""
    jac = _as_matrix(jacobian)
    if jac.shape[1] != belief.dim:
        raise ValueError(f"Jacobian with {jac.shape[1]} columns for a belief of size {belief.dim}")
    mean = _as_vector(mean_map(belief.mean))
    cov = jac @ belief.cov @ jac.T
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def sigma_points(belief: GaussianBelief, scaling: SUTScaling = SUTScaling()) -> SigmaPointSet:
    n = belief.dim
    lam = scaling.alpha**2 * (n + scaling.kappa) - n
    spread = n + lam
    cov = belief.cov
    root = None
    jitter = 0.0
    while root is None:
        try:
            root = np.linalg.cholesky(spread * (cov + jitter * np.eye(n)))
        except np.linalg.LinAlgError:
            if jitter >= JITTER_MAX:
                raise DegenerateCovarianceError("covariance has no square root") from None
            jitter = max(jitter * 10.0, 1e-16 * max(1.0, float(np.max(np.diag(cov)))))
            jitter = min(jitter, JITTER_MAX)
    points = np.vstack([belief.mean, belief.mean + root.T, belief.mean - root.T])
    wm = np.full(2 * n + 1, 0.5 / spread)
    wc = wm.copy()
    wm[0] = lam / spread
    wc[0] = lam / spread + (1.0 - scaling.alpha**2 + scaling.beta)
    return SigmaPointSet(points, wm, wc, scaling)


def sut_propagate(
    belief: GaussianBelief, f: Callable, scaling: SUTScaling = SUTScaling()
) -> tuple[GaussianBelief, np.ndarray]:
    """Scaled unscented transform of ``belief`` through ``f``.

    Returns the output belief and the input-output cross covariance.
    """
    sp = sigma_points(belief, scaling)
    ys = np.array([_as_vector(f(chi)) for chi in sp.points])
    if not np.all(np.isfinite(ys)):
        raise PropagationError("non-finite value at a sigma point", belief.mean)
    # weighted sums are taken relative to the centre point: the weights are
    # O(1/alpha^2) and cancel catastrophically on absolute values
    y_mean = ys[0] + sp.weights_mean @ (ys - ys[0])
    x_mean = sp.points[0] + sp.weights_mean @ (sp.points - sp.points[0])
    dy = ys - y_mean
    dx = sp.points - x_mean
    cov = (dy.T * sp.weights_cov) @ dy
    cross = (dx.T * sp.weights_cov) @ dy
    return GaussianBelief(y_mean, 0.5 * (cov + cov.T)), cross
