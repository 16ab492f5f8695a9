"""
Target conditional flows and vector fields.

Four constructions, each returning a point on the path and the path's
velocity at that point (a tangent at x_t):

- cfm_path: Gaussian conditional flow matching on Euclidean space,
  x_t = (1 - (1 - sigma) t) x0 + t x1
- rcfm_geodesic_path: geodesic flow, x_t = Exp_x1((1 - t) Log_x1(x0))
- sfm_path: stable Euclidean flow on the augmented state xi = [x, tau],
  x_t = x1 + exp(-lambda_x t) (x0 - x1)
- srfm_path: stable Riemannian flow, x_t = Exp_x1(exp(-lambda_x t) Log_x1(x0))
  with velocity lambda_x Log_xt(x1)

The stable constructions are gradient flows of the Lyapunov function
H(xi | xi1) = 1/2 (lambda_x |Log_x1(x)|^2 + lambda_tau (tau - tau1)^2).

Time arguments broadcast against the batch dimensions of the points, i.e.
against x[..., 0]. For chunks of shape (B, T_p, D) pass t with shape (B, 1).
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ManifoldError
from .manifolds import Euclidean, Manifold

logger = logging.getLogger(__name__)


# ============================================================================
# Data Structures
# ============================================================================

@dataclass(frozen=True)
class FlowParams:
    """
    Flow hyperparameters.

    Attributes:
        sigma: Terminal noise level of the Gaussian flow (>= 0)
        lambda_x: Spatial contraction rate (> 0)
        lambda_tau: Pseudo-time contraction rate (> 0)
        tau0: Pseudo-time at the prior
        tau1: Pseudo-time at the data
    """
    sigma: float = 0.0
    lambda_x: float = 2.5
    lambda_tau: float = 2.5
    tau0: float = 0.0
    tau1: float = 1.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError("flow.sigma", f"must be >= 0, got {self.sigma}")
        if not self.lambda_x > 0:
            raise ConfigError("flow.lambda_x", f"must be > 0, got {self.lambda_x}")
        if not self.lambda_tau > 0:
            raise ConfigError("flow.lambda_tau", f"must be > 0, got {self.lambda_tau}")
        if not self.tau0 < self.tau1:
            raise ConfigError("flow.tau0", f"must be < tau1 ({self.tau0} >= {self.tau1})")

    def to_dict(self) -> dict[str, float]:
        return {
            "sigma": self.sigma,
            "lambda_x": self.lambda_x,
            "lambda_tau": self.lambda_tau,
            "tau0": self.tau0,
            "tau1": self.tau1,
        }


@dataclass
class AugmentedState:
    """
    Augmented state xi = [x, tau].

    Also used for augmented tangents, where spatial is a tangent vector at
    the base point and tau is the pseudo-time velocity.
    """
    spatial: np.ndarray
    tau: np.ndarray | float


VectorField = Callable[[AugmentedState], AugmentedState]


def stability_matrix(params: FlowParams, intrinsic_dim: int) -> np.ndarray:
    """The diagonal matrix A = diag(lambda_x I, lambda_tau)."""
    return np.diag(np.r_[np.full(intrinsic_dim, params.lambda_x), params.lambda_tau])


def is_flat(manifold: Manifold) -> bool:
    """True when every factor is Euclidean."""
    return all(isinstance(p, Euclidean) for p in manifold.factors())


def _time(t, x: np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=np.float64)[..., None] * np.ones_like(x[..., :1])


# ============================================================================
# Time-Dependent Flows
# ============================================================================

def cfm_path(manifold: Manifold, t, x0, x1, params: FlowParams) -> tuple[np.ndarray, np.ndarray]:
    """
    Gaussian conditional flow and its (time-constant) field.

    Raises:
        ManifoldError: On a manifold with non-Euclidean factors
    """
    if not is_flat(manifold):
        raise ManifoldError(f"cfm_path supports Euclidean manifolds only, got {manifold}")
    x0, x1 = manifold.coerce(x0), manifold.coerce(x1)
    tt = _time(t, x1)
    shrink = 1.0 - params.sigma
    x_t = (1.0 - shrink * tt) * x0 + tt * x1
    u_t = np.broadcast_to(x1 - shrink * x0, x_t.shape).copy()
    return x_t, u_t


def rcfm_geodesic_path(manifold: Manifold, t, x0, x1) -> tuple[np.ndarray, np.ndarray]:
    """
    Geodesic interpolant from x0 (t=0) to x1 (t=1) and its velocity.

    t may lie outside [0, 1]; the geodesic is then extended, which is what an
    integrator sees when run past t=1.

    Example:
        >>> x_t, u_t = rcfm_geodesic_path(Sphere(3), 0.5, [1, 0, 0], [0, 1, 0])
        >>> np.allclose(x_t, [np.sqrt(0.5), np.sqrt(0.5), 0])
        True
    """
    if is_flat(manifold):
        return cfm_path(manifold, t, x0, x1, FlowParams(sigma=0.0))
    w = manifold.log(x1, x0)
    s = 1.0 - np.asarray(t, dtype=np.float64)
    x_t, velocity = manifold.geodesic(x1, w, s)
    return x_t, -velocity


# ============================================================================
# Stable Flows
# ============================================================================

def _tau_path(t, xi0: AugmentedState, xi1: AugmentedState, params: FlowParams):
    t = np.asarray(t, dtype=np.float64)
    tau0 = np.asarray(xi0.tau, dtype=np.float64)
    tau1 = np.asarray(xi1.tau, dtype=np.float64)
    tau_t = tau1 + np.exp(-params.lambda_tau * t) * (tau0 - tau1)
    return tau_t, -params.lambda_tau * (tau_t - tau1)


def sfm_path(manifold: Manifold, t, xi0: AugmentedState, xi1: AugmentedState,
             params: FlowParams) -> tuple[AugmentedState, AugmentedState]:
    """
    Stable Euclidean flow on the augmented state, defined for all t >= 0.

    Example:
        >>> xi_t, _ = sfm_path(Euclidean(1), 0.4, AugmentedState(np.zeros(1), 0.0),
        ...                    AugmentedState(np.ones(1), 1.0), FlowParams())
        >>> round(float(xi_t.spatial[0]), 6)
        0.632121
    """
    if not is_flat(manifold):
        raise ManifoldError(f"sfm_path supports Euclidean manifolds only, got {manifold}")
    x0, x1 = manifold.coerce(xi0.spatial), manifold.coerce(xi1.spatial)
    decay = np.exp(-params.lambda_x * _time(t, x1))
    x_t = x1 + decay * (x0 - x1)
    u_x = -params.lambda_x * (x_t - x1)
    tau_t, u_tau = _tau_path(t, xi0, xi1, params)
    return AugmentedState(x_t, tau_t), AugmentedState(u_x, u_tau)


def srfm_path(manifold: Manifold, t, xi0: AugmentedState, xi1: AugmentedState,
              params: FlowParams) -> tuple[AugmentedState, AugmentedState]:
    """
    Stable Riemannian flow Exp_x1(exp(-lambda_x t) Log_x1(x0)).

    The spatial velocity is lambda_x Log_xt(x1), evaluated in closed form as
    -lambda_x k gamma'(k) with k = exp(-lambda_x t) and gamma the geodesic
    from x1 through x0. On Euclidean manifolds this is sfm_path.

    Raises:
        CutLocusError: If x0 is antipodal to x1 on a sphere factor
    """
    if is_flat(manifold):
        return sfm_path(manifold, t, xi0, xi1, params)
    x0, x1 = manifold.coerce(xi0.spatial), manifold.coerce(xi1.spatial)
    w = manifold.log(x1, x0)
    k = np.exp(-params.lambda_x * np.asarray(t, dtype=np.float64))
    x_t, velocity = manifold.geodesic(x1, w, k)
    u_x = -params.lambda_x * _time(k, x_t) * velocity
    tau_t, u_tau = _tau_path(t, xi0, xi1, params)
    return AugmentedState(x_t, tau_t), AugmentedState(u_x, u_tau)


def exact_stable_field(manifold: Manifold, xi1: AugmentedState, params: FlowParams) -> VectorField:
    """
    Autonomous target field u(xi) = (lambda_x Log_x(x1), -lambda_tau (tau - tau1)).

    The returned callable is the reference field a perfectly trained
    SRFMP model would output.
    """
    x1 = manifold.coerce(xi1.spatial)
    tau1 = np.asarray(xi1.tau, dtype=np.float64)

    def field(xi: AugmentedState) -> AugmentedState:
        if is_flat(manifold):
            u_x = params.lambda_x * (x1 - manifold.coerce(xi.spatial))
        else:
            u_x = params.lambda_x * manifold.log(xi.spatial, x1)
        return AugmentedState(u_x, -params.lambda_tau * (np.asarray(xi.tau) - tau1))

    return field


# ============================================================================
# Lyapunov Function
# ============================================================================

def lyapunov_value(manifold: Manifold, xi: AugmentedState, xi1: AugmentedState,
                   params: FlowParams) -> np.ndarray:
    """
    H(xi | xi1) = 1/2 (lambda_x |Log_x1(x)|^2_g + lambda_tau (tau - tau1)^2).

    Returns:
        Nonnegative value per batch element (a float for unbatched input)
    """
    x1 = manifold.coerce(xi1.spatial)
    delta = manifold.log(x1, xi.spatial)
    spatial = manifold.squared_norm(np.broadcast_to(x1, delta.shape), delta)
    dtau = np.asarray(xi.tau, dtype=np.float64) - np.asarray(xi1.tau, dtype=np.float64)
    value = 0.5 * (params.lambda_x * spatial + params.lambda_tau * dtau ** 2)
    return float(value) if np.ndim(value) == 0 else value


def lasalle_check(manifold: Manifold, xi: AugmentedState, xi1: AugmentedState,
                  params: FlowParams, field: VectorField) -> np.ndarray:
    """
    Directional derivative of H along a vector field at xi.

    grad H = (-lambda_x Log_x(x1), lambda_tau (tau - tau1)), paired with the
    field through the metric at x. For a stable field the result is <= 0;
    positive values are logged as warnings.

    Returns:
        L_u H per batch element (a float for unbatched input)
    """
    x = manifold.coerce(xi.spatial)
    grad_x = -params.lambda_x * manifold.log(x, xi1.spatial)
    grad_tau = params.lambda_tau * (
        np.asarray(xi.tau, dtype=np.float64) - np.asarray(xi1.tau, dtype=np.float64)
    )
    u = field(xi)
    value = manifold.inner(x, grad_x, manifold.coerce(u.spatial)) + grad_tau * np.asarray(u.tau)
    if np.any(value > 0):
        logger.warning("LaSalle check: field increases H (max L_u H = %.6g)", float(np.max(value)))
    return float(value) if np.ndim(value) == 0 else value
