#!/usr/bin/env python3
"""
Riemannian Geometry Kernel

Closed-form geometry for the manifolds actions live on:
- Euclidean space R^d
- Hypersphere S^d, stored as unit vectors in R^(d+1)
- SPD(n), symmetric positive-definite matrices with the affine-invariant metric,
  stored flattened row-major
- Products of the above, stored as concatenated coordinates

Every operation accepts arrays with leading batch dimensions (..., ambient_dim).
An action chunk of T_p steps on M is the T_p-fold product of M and is handled
by giving the step axis as one of those batch dimensions.

Manifold strings follow the grammar ``R<d>``, ``S<d>`` (d is the intrinsic
dimension, so ``S2`` is the unit sphere in R^3), ``SPD<n>`` and ``x``-separated
products such as ``R3xS3xR1``.
"""

import logging
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import CutLocusError, DegenerateInputError, ManifoldError, PreconditionError

logger = logging.getLogger(__name__)


# ============================================================================
# Constants
# ============================================================================

POINT_TOL = 1e-9            # on-manifold tolerance (unit norm, symmetry)
TANGENT_TOL = 1e-9          # tangency tolerance (<x, v> = 0, symmetry)
ANTIPODAL_TOL = 1e-12       # <x, y> below -1 + tol is the sphere cut locus
SPD_EIGEN_FLOOR = 1e-8      # eigenvalue floor used by project_to_manifold
SMALL_ANGLE = 1e-8          # below this, sin(a)/a uses its Taylor expansion

_TOKEN_RE = re.compile(r"(SPD|R|S)([1-9]\d*)")


# ============================================================================
# Utility Functions
# ============================================================================

def _sinc(a: np.ndarray) -> np.ndarray:
    """sin(a)/a, accurate near zero."""
    small = np.abs(a) < SMALL_ANGLE
    safe = np.where(small, 1.0, a)
    return np.where(small, 1.0 - a * a / 6.0, np.sin(safe) / safe)


def _sym(m: np.ndarray) -> np.ndarray:
    """Symmetric part of a stack of square matrices."""
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _eig_apply(u: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Rebuild U diag(values) U^T for stacks of eigenbases."""
    return (u * values[..., None, :]) @ np.swapaxes(u, -1, -2)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1)


# ============================================================================
# Manifold Base Class
# ============================================================================

class Manifold(ABC):
    """
    Base class for manifold specifications.

    Subclasses are frozen dataclasses, so two specs compare equal when they
    describe the same geometry. Points and tangent vectors are plain float64
    arrays in ambient coordinates.
    """

    @property
    @abstractmethod
    def ambient_dim(self) -> int:
        """Length of the flat ambient coordinate vector."""

    @property
    @abstractmethod
    def dim(self) -> int:
        """Intrinsic dimension."""

    # -- core geometry -----------------------------------------------------

    @abstractmethod
    def exp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Exponential map Exp_x(v)."""

    @abstractmethod
    def log(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Logarithmic map Log_x(y)."""

    @abstractmethod
    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Geodesic distance."""

    @abstractmethod
    def inner(self, x: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Riemannian inner product g_x(u, v)."""

    @abstractmethod
    def project_point(self, raw: np.ndarray) -> np.ndarray:
        """Map ambient coordinates onto the manifold."""

    @abstractmethod
    def project_tangent(self, x: np.ndarray, raw: np.ndarray) -> np.ndarray:
        """Orthogonal projection of ambient coordinates onto T_x M."""

    @abstractmethod
    def geodesic(self, x: np.ndarray, w: np.ndarray, s) -> tuple[np.ndarray, np.ndarray]:
        """
        Evaluate gamma(s) = Exp_x(s w) and its velocity gamma'(s).

        Valid for any real s, including negative values and s > 1.
        """

    @abstractmethod
    def metric_lower(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Ambient covector c with <c, w> = g_x(v, w) for every tangent w."""

    @abstractmethod
    def isotropic_tangent(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Turn an ambient standard-normal draw into an isotropic tangent at x."""

    @abstractmethod
    def random_point(self, rng: np.random.Generator, size: tuple[int, ...] = ()) -> np.ndarray:
        """Draw points spread over a unit-scale region of the manifold."""

    @abstractmethod
    def check_point(self, x: np.ndarray) -> np.ndarray:
        """Validate points, returning them as float64 arrays."""

    @abstractmethod
    def check_tangent(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Validate tangent vectors at x, returning them as float64 arrays."""

    # -- derived -------------------------------------------------------------

    def squared_norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.inner(x, v, v)

    def norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.squared_norm(x, v), 0.0))

    def random_tangent(
        self, x: np.ndarray, rng: np.random.Generator, scale: float = 1.0
    ) -> np.ndarray:
        """Isotropic Gaussian tangent vectors at x with the given scale."""
        x = self.check_point(x)
        z = rng.standard_normal(x.shape)
        return scale * self.isotropic_tangent(x, z)

    def factors(self) -> tuple["Manifold", ...]:
        return (self,)

    def coerce(self, a) -> np.ndarray:
        """Convert to float64 and check the trailing (ambient) dimension."""
        arr = np.asarray(a, dtype=np.float64)
        if arr.ndim == 0 or arr.shape[-1] != self.ambient_dim:
            raise ManifoldError(
                f"{self}: expected trailing dimension {self.ambient_dim}, "
                f"got shape {arr.shape}"
            )
        return arr

    def __str__(self) -> str:
        return format_manifold(self)


# ============================================================================
# Euclidean Space
# ============================================================================

@dataclass(frozen=True)
class Euclidean(Manifold):
    """Flat space R^dim; Exp is addition and Log is subtraction."""
    dimension: int

    def __post_init__(self):
        if self.dimension < 1:
            raise ManifoldError(f"Euclidean dimension must be >= 1, got {self.dimension}")

    @property
    def ambient_dim(self) -> int:
        return self.dimension

    @property
    def dim(self) -> int:
        return self.dimension

    def exp(self, x, v):
        return self.coerce(x) + self.coerce(v)

    def log(self, x, y):
        return self.coerce(y) - self.coerce(x)

    def distance(self, x, y):
        return np.linalg.norm(self.coerce(y) - self.coerce(x), axis=-1)

    def inner(self, x, u, v):
        return _dot(self.coerce(u), self.coerce(v))

    def project_point(self, raw):
        return self.coerce(raw).copy()

    def project_tangent(self, x, raw):
        return self.coerce(raw).copy()

    def geodesic(self, x, w, s):
        x, w = self.coerce(x), self.coerce(w)
        s = np.asarray(s, dtype=np.float64)[..., None]
        return x + s * w, np.broadcast_to(w, np.broadcast_shapes(x.shape, w.shape, s.shape)).copy()

    def metric_lower(self, x, v):
        return self.coerce(v)

    def isotropic_tangent(self, x, z):
        return self.coerce(z)

    def random_point(self, rng, size=()):
        return rng.standard_normal((*size, self.dimension))

    def check_point(self, x):
        x = self.coerce(x)
        if not np.all(np.isfinite(x)):
            raise PreconditionError(f"{self}: non-finite point coordinates")
        return x

    def check_tangent(self, x, v):
        return self.check_point(v)


# ============================================================================
# Hypersphere
# ============================================================================

@dataclass(frozen=True)
class Sphere(Manifold):
    """
    Unit hypersphere embedded in R^ambient.

    Points are unit vectors; the tangent space at x is the orthogonal
    complement of x, with the metric induced by the ambient dot product.
    """
    ambient: int

    def __post_init__(self):
        if self.ambient < 2:
            raise ManifoldError(f"Sphere ambient dimension must be >= 2, got {self.ambient}")

    @property
    def ambient_dim(self) -> int:
        return self.ambient

    @property
    def dim(self) -> int:
        return self.ambient - 1

    def exp(self, x, v):
        x = self.check_point(x)
        v = self.check_tangent(x, v)
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        y = np.cos(n) * x + _sinc(n) * v
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def log(self, x, y):
        x = self.check_point(x)
        y = self.check_point(y)
        c = _dot(x, y)[..., None]
        if np.any(c < -1.0 + ANTIPODAL_TOL):
            raise CutLocusError(f"{self}: logarithmic map undefined for antipodal points")
        u = y - c * x
        nu = np.linalg.norm(u, axis=-1, keepdims=True)
        theta = np.arctan2(nu, c)
        nonzero = nu > 0.0
        factor = np.where(nonzero, theta / np.where(nonzero, nu, 1.0), 1.0)
        return u * factor

    def distance(self, x, y):
        x, y = self.coerce(x), self.coerce(y)
        chord = np.linalg.norm(x - y, axis=-1)
        return 2.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))

    def inner(self, x, u, v):
        x = self.coerce(x)
        return _dot(self.check_tangent(x, u), self.check_tangent(x, v))

    def project_point(self, raw):
        raw = self.coerce(raw)
        n = np.linalg.norm(raw, axis=-1, keepdims=True)
        if np.any(n == 0.0) or not np.all(np.isfinite(n)):
            raise DegenerateInputError(f"{self}: cannot project a zero or non-finite vector")
        return raw / n

    def project_tangent(self, x, raw):
        x, raw = self.coerce(x), self.coerce(raw)
        return raw - _dot(x, raw)[..., None] * x

    def geodesic(self, x, w, s):
        x, w = self.coerce(x), self.coerce(w)
        s = np.asarray(s, dtype=np.float64)[..., None]
        n = np.linalg.norm(w, axis=-1, keepdims=True)
        a = s * n
        point = np.cos(a) * x + s * _sinc(a) * w
        point = point / np.linalg.norm(point, axis=-1, keepdims=True)
        velocity = -n * np.sin(a) * x + np.cos(a) * w
        return point, self.project_tangent(point, velocity)

    def metric_lower(self, x, v):
        return self.coerce(v)

    def isotropic_tangent(self, x, z):
        return self.project_tangent(x, z)

    def random_point(self, rng, size=()):
        return self.project_point(rng.standard_normal((*size, self.ambient)))

    def check_point(self, x):
        x = self.coerce(x)
        if not np.all(np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= POINT_TOL):
            raise PreconditionError(f"{self}: point is not unit norm within {POINT_TOL}")
        return x

    def check_tangent(self, x, v):
        v = self.coerce(v)
        radial = np.abs(_dot(np.asarray(x, dtype=np.float64), v))
        scale = np.maximum(1.0, np.linalg.norm(v, axis=-1))
        if not np.all(radial <= TANGENT_TOL * scale):
            raise PreconditionError(f"{self}: vector is not tangent to the sphere at its base")
        return v


# ============================================================================
# SPD Matrices (affine-invariant metric)
# ============================================================================

@dataclass(frozen=True)
class SPD(Manifold):
    """
    Symmetric positive-definite n x n matrices, affine-invariant metric.

    g_S(U, V) = tr(S^-1 U S^-1 V)
    Exp_S(V) = S^1/2 expm(S^-1/2 V S^-1/2) S^1/2
    Log_S(Y) = S^1/2 logm(S^-1/2 Y S^-1/2) S^1/2
    """
    order: int

    def __post_init__(self):
        if self.order < 2:
            raise ManifoldError(f"SPD matrix order must be >= 2, got {self.order}")

    @property
    def ambient_dim(self) -> int:
        return self.order * self.order

    @property
    def dim(self) -> int:
        return self.order * (self.order + 1) // 2

    # -- matrix helpers ----------------------------------------------------

    def _mat(self, a: np.ndarray) -> np.ndarray:
        return a.reshape(*a.shape[:-1], self.order, self.order)

    def _flat(self, m: np.ndarray) -> np.ndarray:
        return m.reshape(*m.shape[:-2], self.ambient_dim)

    def _roots(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (S^1/2, S^-1/2) for flat points x."""
        w, u = np.linalg.eigh(self._mat(x))
        if np.any(w <= 0.0):
            raise PreconditionError(f"{self}: matrix is not positive definite")
        root = np.sqrt(w)
        return _eig_apply(u, root), _eig_apply(u, 1.0 / root)

    def _inverse(self, x: np.ndarray) -> np.ndarray:
        w, u = np.linalg.eigh(self._mat(x))
        if np.any(w <= 0.0):
            raise PreconditionError(f"{self}: matrix is not positive definite")
        return _eig_apply(u, 1.0 / w)

    # -- geometry --------------------------------------------------------------

    def exp(self, x, v):
        x = self.check_point(x)
        v = self.check_tangent(x, v)
        s, si = self._roots(x)
        m = _sym(si @ self._mat(v) @ si)
        w, u = np.linalg.eigh(m)
        return self._flat(_sym(s @ _eig_apply(u, np.exp(w)) @ s))

    def log(self, x, y):
        x = self.check_point(x)
        y = self.check_point(y)
        s, si = self._roots(x)
        m = _sym(si @ self._mat(y) @ si)
        w, u = np.linalg.eigh(m)
        if np.any(w <= 0.0):
            raise PreconditionError(f"{self}: matrix is not positive definite")
        return self._flat(_sym(s @ _eig_apply(u, np.log(w)) @ s))

    def distance(self, x, y):
        x, y = self.coerce(x), self.coerce(y)
        _, si = self._roots(x)
        w = np.linalg.eigvalsh(_sym(si @ self._mat(y) @ si))
        if np.any(w <= 0.0):
            raise PreconditionError(f"{self}: matrix is not positive definite")
        return np.sqrt(np.sum(np.log(w) ** 2, axis=-1))

    def inner(self, x, u, v):
        x = self.coerce(x)
        inv = self._inverse(x)
        a = inv @ self._mat(self.check_tangent(x, u))
        b = inv @ self._mat(self.check_tangent(x, v))
        return np.einsum("...ij,...ji->...", a, b)

    def project_point(self, raw):
        m = _sym(self._mat(self.coerce(raw)))
        w, u = np.linalg.eigh(m)
        low = np.min(w, axis=-1) < SPD_EIGEN_FLOOR
        if not np.any(low):
            return self._flat(m)
        logger.debug("SPD projection: eigenvalue floor applied to %d matrices", int(np.sum(low)))
        floored = _sym(_eig_apply(u, np.maximum(w, SPD_EIGEN_FLOOR)))
        return self._flat(np.where(low[..., None, None], floored, m))

    def project_tangent(self, x, raw):
        self.coerce(x)
        return self._flat(_sym(self._mat(self.coerce(raw))))

    def geodesic(self, x, w, s):
        x, w = self.coerce(x), self.coerce(w)
        s = np.asarray(s, dtype=np.float64)
        root, iroot = self._roots(x)
        m = _sym(iroot @ self._mat(w) @ iroot)
        vals, vecs = np.linalg.eigh(m)
        grow = np.exp(s[..., None] * vals)
        point = _sym(root @ _eig_apply(vecs, grow) @ root)
        velocity = _sym(root @ _eig_apply(vecs, vals * grow) @ root)
        return self._flat(point), self._flat(velocity)

    def metric_lower(self, x, v):
        inv = self._inverse(self.coerce(x))
        return self._flat(inv @ self._mat(self.coerce(v)) @ inv)

    def isotropic_tangent(self, x, z):
        root, _ = self._roots(self.coerce(x))
        return self._flat(root @ _sym(self._mat(self.coerce(z))) @ root)

    def random_point(self, rng, size=()):
        z = rng.standard_normal((*size, self.order, self.order))
        w, u = np.linalg.eigh(0.5 * _sym(z))
        return self._flat(_sym(_eig_apply(u, np.exp(w))))

    def check_point(self, x):
        x = self.coerce(x)
        m = self._mat(x)
        if not np.all(np.isfinite(m)):
            raise PreconditionError(f"{self}: non-finite matrix entries")
        scale = np.maximum(1.0, np.max(np.abs(m), axis=(-1, -2)))
        asym = np.max(np.abs(m - np.swapaxes(m, -1, -2)), axis=(-1, -2))
        if not np.all(asym <= POINT_TOL * scale):
            raise PreconditionError(f"{self}: matrix is not symmetric within {POINT_TOL}")
        if np.any(np.linalg.eigvalsh(_sym(m))[..., 0] <= 0.0):
            raise PreconditionError(f"{self}: matrix is not positive definite")
        return x

    def check_tangent(self, x, v):
        v = self.coerce(v)
        m = self._mat(v)
        scale = np.maximum(1.0, np.max(np.abs(m), axis=(-1, -2)))
        asym = np.max(np.abs(m - np.swapaxes(m, -1, -2)), axis=(-1, -2))
        if not np.all(asym <= TANGENT_TOL * scale):
            raise PreconditionError(f"{self}: tangent matrix is not symmetric within {TANGENT_TOL}")
        return v

    def min_eigenvalue(self, x) -> np.ndarray:
        """Smallest eigenvalue of each matrix."""
        return np.linalg.eigvalsh(self._mat(self.coerce(x)))[..., 0]


# ============================================================================
# Product Manifold
# ============================================================================

@dataclass(frozen=True)
class Product(Manifold):
    """
    Cartesian product of manifolds with the product metric.

    Coordinates are the concatenation of the factor coordinates; exp/log act
    factorwise and the distance is the root of the summed squared factor
    distances.
    """
    parts: tuple[Manifold, ...]

    def __post_init__(self):
        if len(self.parts) == 0:
            raise ManifoldError("Product manifold needs at least one factor")
        flat: list[Manifold] = []
        for part in self.parts:
            flat.extend(part.factors())
        object.__setattr__(self, "parts", tuple(flat))

    @property
    def ambient_dim(self) -> int:
        return sum(p.ambient_dim for p in self.parts)

    @property
    def dim(self) -> int:
        return sum(p.dim for p in self.parts)

    def factors(self) -> tuple[Manifold, ...]:
        return self.parts

    def slices(self) -> list[slice]:
        """Coordinate slice of each factor inside the flat ambient vector."""
        out, start = [], 0
        for part in self.parts:
            out.append(slice(start, start + part.ambient_dim))
            start += part.ambient_dim
        return out

    def _split(self, a: np.ndarray) -> list[np.ndarray]:
        a = self.coerce(a)
        return [a[..., sl] for sl in self.slices()]

    def _map(self, name: str, *arrays) -> np.ndarray:
        pieces = zip(*(self._split(a) for a in arrays))
        return np.concatenate(
            [getattr(part, name)(*args) for part, args in zip(self.parts, pieces)], axis=-1
        )

    def exp(self, x, v):
        return self._map("exp", x, v)

    def log(self, x, y):
        return self._map("log", x, y)

    def distance(self, x, y):
        total = 0.0
        for part, a, b in zip(self.parts, self._split(x), self._split(y)):
            total = total + part.distance(a, b) ** 2
        return np.sqrt(total)

    def inner(self, x, u, v):
        total = 0.0
        for part, a, b, c in zip(self.parts, self._split(x), self._split(u), self._split(v)):
            total = total + part.inner(a, b, c)
        return total

    def project_point(self, raw):
        return np.concatenate(
            [part.project_point(a) for part, a in zip(self.parts, self._split(raw))], axis=-1
        )

    def project_tangent(self, x, raw):
        return self._map("project_tangent", x, raw)

    def geodesic(self, x, w, s):
        points, velocities = [], []
        for part, a, b in zip(self.parts, self._split(x), self._split(w)):
            p, v = part.geodesic(a, b, s)
            points.append(p)
            velocities.append(v)
        return np.concatenate(points, axis=-1), np.concatenate(velocities, axis=-1)

    def metric_lower(self, x, v):
        return self._map("metric_lower", x, v)

    def isotropic_tangent(self, x, z):
        return self._map("isotropic_tangent", x, z)

    def random_point(self, rng, size=()):
        return np.concatenate([part.random_point(rng, size) for part in self.parts], axis=-1)

    def check_point(self, x):
        for part, a in zip(self.parts, self._split(x)):
            part.check_point(a)
        return self.coerce(x)

    def check_tangent(self, x, v):
        for part, a, b in zip(self.parts, self._split(x), self._split(v)):
            part.check_tangent(a, b)
        return self.coerce(v)


ManifoldSpec = Manifold


# ============================================================================
# Spec Strings
# ============================================================================

def parse_manifold(text: str) -> Manifold:
    """
    Parse a manifold string such as ``S2`` or ``R3xS3xR1``.

    Raises:
        ManifoldError: If any factor token is malformed or out of range
    """
    if not isinstance(text, str) or not text:
        raise ManifoldError(f"Malformed manifold string: {text!r}")
    parts: list[Manifold] = []
    for token in text.split("x"):
        match = _TOKEN_RE.fullmatch(token)
        if match is None:
            raise ManifoldError(f"Malformed manifold factor {token!r} in {text!r}")
        kind, number = match.group(1), int(match.group(2))
        if kind == "R":
            parts.append(Euclidean(number))
        elif kind == "S":
            parts.append(Sphere(number + 1))
        else:
            parts.append(SPD(number))
    return parts[0] if len(parts) == 1 else Product(tuple(parts))


def format_manifold(spec: Manifold) -> str:
    """Inverse of parse_manifold."""
    if isinstance(spec, Euclidean):
        return f"R{spec.dimension}"
    if isinstance(spec, Sphere):
        return f"S{spec.ambient - 1}"
    if isinstance(spec, SPD):
        return f"SPD{spec.order}"
    if isinstance(spec, Product):
        return "x".join(format_manifold(p) for p in spec.parts)
    raise ManifoldError(f"Unknown manifold type: {type(spec).__name__}")


def euclidean_mask(spec: Manifold) -> np.ndarray:
    """Boolean mask over ambient coordinates that belong to Euclidean factors."""
    mask = []
    for part in spec.factors():
        mask.extend([isinstance(part, Euclidean)] * part.ambient_dim)
    return np.array(mask, dtype=bool)


# ============================================================================
# Functional Interface
# ============================================================================

def exp_map(spec: Manifold, x, v) -> np.ndarray:
    """
    Exponential map Exp_x(v).

    Example:
        >>> exp_map(Sphere(3), [1, 0, 0], [0, np.pi / 2, 0])
        array([6.123234e-17, 1.000000e+00, 0.000000e+00])
    """
    return spec.exp(x, v)


def log_map(spec: Manifold, x, y) -> np.ndarray:
    """Logarithmic map Log_x(y); raises CutLocusError for antipodal sphere points."""
    return spec.log(x, y)


def distance(spec: Manifold, x, y) -> np.ndarray:
    return spec.distance(x, y)


def project_to_manifold(raw, spec: Manifold) -> np.ndarray:
    return spec.project_point(raw)


def project_to_tangent(spec: Manifold, x, raw) -> np.ndarray:
    return spec.project_tangent(x, raw)


def inner(spec: Manifold, x, u, v) -> np.ndarray:
    return spec.inner(x, u, v)
