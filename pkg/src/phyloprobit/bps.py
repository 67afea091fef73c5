"""Bouncy particle sampler transition kernel for truncated multivariate normals.

The target is a d-dimensional normal restricted to an orthant: each coordinate
carries a sign constraint (+1/-1), no constraint, or is clamped to an observed
value. The particle follows a piecewise linear trajectory; events are either
gradient bounces (Newtonian reflection against the energy gradient) or
boundary bounces (coordinate sign flips). Everything is expressed through an
abstract precision operator supplying products and single columns, so the
same kernel runs against dense matrices and the matrix-free tree operator.

Clamped coordinates are handled by masking the velocity and the cached
precision products, which makes the kernel target the conditional law of the
free block at no extra cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

logger = logging.getLogger(__name__)

# floor on event times; prevents infinite chattering at a boundary under
# floating-point cancellation
EVENT_TIME_FLOOR = 1e-12


class DensePrecision:
    """Precision operator backed by an explicit SPD matrix (tests, small d)."""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("precision matrix must be square")
        self.matrix = matrix
        self.dim = matrix.shape[0]

    def matvec(self, vector: np.ndarray) -> np.ndarray:
        return self.matrix @ vector

    def column(self, index: int) -> np.ndarray:
        return self.matrix[:, index].copy()


@dataclass
class TruncatedNormalTarget:
    """Gaussian with per-coordinate orthant constraints and clamped dimensions.

    signs: -1 / +1 for constrained coordinates, 0 for unconstrained.
    fixed: True marks coordinates clamped at their current value; they must
    carry no sign constraint.
    """

    mean: np.ndarray
    precision: object
    signs: np.ndarray
    fixed: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.signs = np.asarray(self.signs, dtype=np.int8)
        self.fixed = np.asarray(self.fixed, dtype=bool)
        d = self.precision.dim
        if self.mean.shape != (d,) or self.signs.shape != (d,) or self.fixed.shape != (d,):
            raise ValueError("mean, signs, and fixed must all have the operator dimension")
        if not np.all(np.isin(self.signs, (-1, 0, 1))):
            raise ValueError("signs must be -1, 0, or +1")
        if np.any(self.signs[self.fixed] != 0):
            raise ValueError("fixed dimensions cannot carry a sign constraint")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def validate_position(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError("position has the wrong dimension")
        if not np.all(np.isfinite(x)):
            raise ValueError("position must be finite")
        constrained = self.signs != 0
        if np.any(np.sign(x[constrained]) != self.signs[constrained]):
            bad = int(np.nonzero(np.sign(x) != self.signs)[0][0])
            raise ValueError(
                f"coordinate {bad} violates its sign constraint (value {x[bad]!r}); "
                "constrained coordinates must start strictly inside the orthant"
            )
        return x


@dataclass
class ParticleState:
    """Trajectory state: position, velocity, cached precision products."""

    position: np.ndarray
    velocity: np.ndarray
    grad: np.ndarray        # precision @ (position - mean), masked
    velocity_prod: np.ndarray | None = None  # precision @ velocity, masked
    remaining: float = 0.0
    events: dict = field(default_factory=dict)


def exponential_draw(rng: np.random.Generator) -> float:
    """Exp(1) via inverse CDF of one uniform draw (replayable across platforms)."""
    return -np.log1p(-rng.random())


def gradient_event_time(phi_vx: float, phi_vv: float, exp_draw: float) -> float:
    """Time until the energy climbed exp_draw above its minimum along the ray.

    Solves the quadratic energy-difference equation; the larger root is taken
    through the cancellation-proof form.
    """
    if not phi_vv > 0:
        raise ValueError("velocity-precision quadratic form must be positive")
    tau_min = max(0.0, -phi_vx / phi_vv)
    a = 0.5 * phi_vv
    b = phi_vx
    c = -0.5 * tau_min * tau_min * phi_vv - tau_min * phi_vx - exp_draw
    disc = b * b - 4.0 * a * c
    sq = np.sqrt(disc)
    if b >= 0:
        return -2.0 * c / (b + sq)
    return (sq - b) / (2.0 * a)


def boundary_event_time(x: np.ndarray, v: np.ndarray, signs: np.ndarray):
    """First time a sign-constrained coordinate reaches zero, and which one.

    Only coordinates moving toward their boundary (x_i v_i < 0) generate
    events; returns (+inf, -1) if there are none. Ties break to the smallest
    index.
    """
    towards = (signs != 0) & (x * v < 0)
    if not np.any(towards):
        return np.inf, -1
    idx = np.nonzero(towards)[0]
    times = np.abs(x[idx] / v[idx])
    k = int(np.argmin(times))
    return float(times[k]), int(idx[k])


def bounce_gradient(v: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Newtonian elastic reflection of the velocity against the gradient."""
    norm_sq = grad @ grad
    if norm_sq == 0.0:
        raise ValueError("cannot reflect against a zero gradient")
    return v - (2.0 * (v @ grad) / norm_sq) * grad

def bounce_boundary(v: np.ndarray, velocity_prod: np.ndarray, index: int,
                    precision_column: np.ndarray):
    """Flip one velocity coordinate and patch the cached precision product.

    The product update is a single column axpy, avoiding the full
    matrix-vector product after a boundary bounce.
    """
    v_new = v.copy()
    v_new[index] = -v[index]
    prod_new = velocity_prod + (2.0 * v_new[index]) * precision_column
    return v_new, prod_new


def bps_transition(target: TruncatedNormalTarget, x0: np.ndarray, travel_time: float,
                   rng: np.random.Generator, trace=None,
                   validate_caches: bool = False, events: dict | None = None) -> np.ndarray:
    """Advance the particle for the given travel time and return the endpoint.

    The velocity is refreshed from N(0, I) at entry (then masked) and never
    inside the trajectory. The map x0 -> x(travel_time) leaves the constrained
    Gaussian invariant.
    """
    if not travel_time > 0:
        raise ValueError("travel time must be > 0")
    x = target.validate_position(x0).copy()
    fixed = target.fixed
    if np.any((target.signs != 0) & (x == 0.0)):
        raise ValueError("constrained coordinates must not start exactly at zero")
    if fixed.all():
        return x

    v = rng.standard_normal(target.dim)
    v[fixed] = 0.0
    grad = target.precision.matvec(x - target.mean)
    grad[fixed] = 0.0
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite precision product; operator inconsistent")

    state = ParticleState(position=x, velocity=v, grad=grad, remaining=float(travel_time),
                          events={"gradient": 0, "boundary": 0})
    pending_flip = -1
    elapsed = 0.0
    while True:
        if pending_flip < 0:
            vel_prod = target.precision.matvec(state.velocity)
            vel_prod[fixed] = 0.0
        else:
            column = target.precision.column(pending_flip)
            column = column.copy()
            column[fixed] = 0.0
            vel_prod = state.velocity_prod + (2.0 * state.velocity[pending_flip]) * column
        state.velocity_prod = vel_prod

        phi_vx = state.velocity @ state.grad
        phi_vv = state.velocity @ vel_prod
        tau_gr = gradient_event_time(phi_vx, phi_vv, exponential_draw(rng))
        tau_bd, i_bd = boundary_event_time(state.position, state.velocity, target.signs)
        tau_event = max(min(tau_gr, tau_bd), EVENT_TIME_FLOOR)

        if tau_event >= state.remaining:
            state.position += state.remaining * state.velocity
            state.grad += state.remaining * vel_prod
            state.remaining = 0.0
            break

        state.position += tau_event * state.velocity
        state.grad += tau_event * vel_prod
        state.remaining -= tau_event
        elapsed += tau_event
        if tau_bd <= tau_gr:  # exact ties count as boundary events
            state.position[i_bd] = 0.0
            state.velocity[i_bd] = -state.velocity[i_bd]
            state.events["boundary"] += 1
            pending_flip = i_bd
            if trace is not None:
                trace("boundary", elapsed, i_bd)
        else:
            state.velocity = bounce_gradient(state.velocity, state.grad)
            state.events["gradient"] += 1
            pending_flip = -1
            if trace is not None:
                trace("gradient", elapsed, -1)
        if not np.isfinite(state.grad @ state.grad):
            raise FloatingPointError("non-finite trajectory state; operator inconsistent")

    if events is not None:
        events["gradient"] = events.get("gradient", 0) + state.events["gradient"]
        events["boundary"] = events.get("boundary", 0) + state.events["boundary"]
    if validate_caches:
        fresh = target.precision.matvec(state.position - target.mean)
        fresh[fixed] = 0.0
        err = np.max(np.abs(state.grad - fresh))
        scale = np.max(np.abs(state.grad))
        if err > 1e-8 * max(scale, 1e-300):
            raise RuntimeError(
                f"cached gradient drifted: max abs error {err:.3e} vs scale {scale:.3e}"
            )
    return state.position


def estimate_covariance_lambda_max(operator, rel_tol: float = 1e-3, max_iter: int = 200,
                                   cg_rtol: float = 1e-8) -> float:
    """Largest covariance eigenvalue by power iteration on the inverse of the
    precision operator, each application done with conjugate gradients."""
    d = operator.dim
    linop = LinearOperator((d, d), matvec=operator.matvec, dtype=float)
    z = np.full(d, 1.0 / np.sqrt(d))
    lam = 0.0
    for _ in range(max_iter):
        y, info = cg(linop, z, rtol=cg_rtol, maxiter=10 * d + 100)
        if info != 0:
            break
        lam_new = float(z @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0 or not np.isfinite(lam_new):
            break
        z = y / norm
        if abs(lam_new - lam) <= rel_tol * abs(lam_new):
            return lam_new
        lam = lam_new
    else:
        # ran out of iterations without meeting the tolerance; fall through
        pass
    logger.warning(
        "power iteration for the largest covariance eigenvalue did not converge; "
        "falling back to a stochastic trace upper bound"
    )
    rng = np.random.default_rng(0)
    probes = 8
    total = 0.0
    for _ in range(probes):
        probe = rng.choice((-1.0, 1.0), size=d)
        y, info = cg(linop, probe, rtol=1e-6, maxiter=10 * d + 100)
        if info != 0:
            raise RuntimeError("conjugate gradient failed while estimating the trace bound")
        total += probe @ y
    return max(total / probes, lam)


def tune_travel_time(target, multiplier: float = 0.01, rel_tol: float = 1e-3,
                     max_iter: int = 200) -> float:
    """Travel time proportional to the square root of the largest covariance
    eigenvalue, the scale of the target's high-density region."""
    operator = getattr(target, "precision", target)
    lam = estimate_covariance_lambda_max(operator, rel_tol=rel_tol, max_iter=max_iter)
    return multiplier * np.sqrt(lam)
