"""
Prior (source) distributions over manifolds.

Each factor of the action manifold gets its own prior:
- EuclideanGaussian: N(mean, scale^2 I) on R^d
- SphereUniform: normalized zero-mean isotropic Gaussian draws on S^d
- WrappedGaussian: Gaussian in the tangent space at a mean point, pushed
  through the exponential map (sphere or SPD)

Action-chunk priors tile one draw across the prediction horizon, so a chunk
sample has the form [a_b, a_b, ..., a_b].

All randomness goes through numpy Generators over the PCG64 bit generator;
make_rng(seed) is the single place a seed becomes a stream.
"""

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError
from .manifolds import SPD, Euclidean, Manifold, Product, Sphere

logger = logging.getLogger(__name__)


DEFAULT_WRAPPED_SCALE = 0.5


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


# ============================================================================
# Factor Priors
# ============================================================================

@dataclass(frozen=True)
class EuclideanGaussian:
    """Isotropic Gaussian on a Euclidean factor. mean=None means the origin."""
    mean: tuple[float, ...] | None = None
    scale: float = 1.0
    kind = "euclidean_gaussian"


@dataclass(frozen=True)
class SphereUniform:
    """Uniform distribution on a sphere factor."""
    kind = "sphere_uniform"


@dataclass(frozen=True)
class WrappedGaussian:
    """
    Wrapped Gaussian on a sphere or SPD factor.

    mean=None selects the north pole (0, ..., 0, 1) for spheres and the
    identity matrix for SPD. scale=0 is a point mass at the mean.
    """
    mean: tuple[float, ...] | None = None
    scale: float = DEFAULT_WRAPPED_SCALE
    kind = "wrapped_gaussian"


FactorPrior = EuclideanGaussian | SphereUniform | WrappedGaussian


def _default_mean(part: Manifold) -> np.ndarray:
    if isinstance(part, Sphere):
        mean = np.zeros(part.ambient_dim)
        mean[-1] = 1.0
        return mean
    if isinstance(part, SPD):
        return np.eye(part.order).reshape(-1)
    return np.zeros(part.ambient_dim)


def _mean_point(part: Manifold, prior: FactorPrior) -> np.ndarray:
    if prior.mean is None:
        return _default_mean(part)
    return np.asarray(prior.mean, dtype=np.float64)


def _sample_factor(part: Manifold, prior: FactorPrior, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    if isinstance(prior, EuclideanGaussian):
        return _mean_point(part, prior) + prior.scale * rng.standard_normal((n, part.ambient_dim))
    if isinstance(prior, SphereUniform):
        return part.project_point(rng.standard_normal((n, part.ambient_dim)))
    mean = _mean_point(part, prior)
    base = np.broadcast_to(mean, (n, part.ambient_dim))
    z = rng.standard_normal((n, part.ambient_dim))
    v = prior.scale * part.isotropic_tangent(base, z)
    return part.exp(base, v)


# ============================================================================
# Prior Specification
# ============================================================================

@dataclass
class PriorSpec:
    """
    Per-factor prior for a manifold plus the seed of its default stream.

    Attributes:
        manifold: Target manifold (single factor or product)
        factors: One factor prior per manifold factor, in order
        seed: Seed used when sampling without an explicit generator
    """
    manifold: Manifold
    factors: tuple[FactorPrior, ...]
    seed: int = 0

    def __post_init__(self):
        self.factors = tuple(self.factors)
        parts = self.manifold.factors()
        if len(parts) != len(self.factors):
            raise ConfigError(
                "prior",
                f"{len(self.factors)} factor priors for {len(parts)} manifold factors "
                f"({self.manifold})",
            )
        for i, (part, prior) in enumerate(zip(parts, self.factors)):
            where = f"prior[{i}]"
            if isinstance(prior, EuclideanGaussian):
                if not isinstance(part, Euclidean):
                    raise ConfigError(f"{where}.kind", f"euclidean_gaussian on {part}")
                if prior.mean is not None and len(prior.mean) != part.ambient_dim:
                    raise ConfigError(f"{where}.mean", f"expected {part.ambient_dim} values")
                if not prior.scale > 0:
                    raise ConfigError(f"{where}.scale", "must be > 0")
            elif isinstance(prior, SphereUniform):
                if not isinstance(part, Sphere):
                    raise ConfigError(f"{where}.kind", f"sphere_uniform on {part}")
            elif isinstance(prior, WrappedGaussian):
                if not isinstance(part, (Sphere, SPD)):
                    raise ConfigError(f"{where}.kind", f"wrapped_gaussian on {part}")
                if not prior.scale >= 0:
                    raise ConfigError(f"{where}.scale", "must be >= 0")
                if prior.mean is not None:
                    mean = np.asarray(prior.mean, dtype=np.float64)
                    if mean.shape != (part.ambient_dim,):
                        raise ConfigError(f"{where}.mean", f"expected {part.ambient_dim} values")
                    try:
                        part.check_point(mean)
                    except ValueError as exc:
                        raise ConfigError(f"{where}.mean", str(exc)) from exc
            else:
                raise ConfigError(f"{where}.kind", f"unknown prior {prior!r}")

    def rng(self) -> np.random.Generator:
        return make_rng(self.seed)

    # -- run-config form -------------------------------------------------------

    @classmethod
    def from_config(cls, manifold: Manifold, entries: list[dict[str, Any]] | None,
                    seed: int = 0) -> "PriorSpec":
        """
        Build from the JSON list form, e.g.
        ``[{"kind": "wrapped_gaussian", "mean": [0, 0, 1], "scale": 0.3}]``.

        An empty or missing list selects default_prior(manifold).
        """
        if not entries:
            return default_prior(manifold, seed)
        factors: list[FactorPrior] = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict) or "kind" not in entry:
                raise ConfigError(f"prior[{i}]", "expected an object with a 'kind' key")
            kind = entry["kind"]
            extra = set(entry) - {"kind", "mean", "scale"}
            if extra:
                raise ConfigError(f"prior[{i}]", f"unknown keys {sorted(extra)}")
            mean = entry.get("mean")
            mean = None if mean is None else tuple(float(m) for m in mean)
            if kind == "euclidean_gaussian":
                factors.append(EuclideanGaussian(mean, float(entry.get("scale", 1.0))))
            elif kind == "sphere_uniform":
                factors.append(SphereUniform())
            elif kind == "wrapped_gaussian":
                factors.append(
                    WrappedGaussian(mean, float(entry.get("scale", DEFAULT_WRAPPED_SCALE)))
                )
            else:
                raise ConfigError(f"prior[{i}].kind", f"unknown prior kind {kind!r}")
        return cls(manifold, tuple(factors), seed)

    def to_config(self) -> list[dict[str, Any]]:
        out = []
        for prior in self.factors:
            entry: dict[str, Any] = {"kind": prior.kind}
            if not isinstance(prior, SphereUniform):
                if prior.mean is not None:
                    entry["mean"] = list(prior.mean)
                entry["scale"] = prior.scale
            out.append(entry)
        return out


def default_prior(manifold: Manifold, seed: int = 0) -> PriorSpec:
    """
    Standard per-space priors: Gaussian on Euclidean factors, uniform on
    spheres and a wrapped Gaussian around the identity on SPD factors.
    """
    factors: list[FactorPrior] = []
    for part in manifold.factors():
        if isinstance(part, Euclidean):
            factors.append(EuclideanGaussian())
        elif isinstance(part, Sphere):
            factors.append(SphereUniform())
        else:
            factors.append(WrappedGaussian())
    return PriorSpec(manifold, tuple(factors), seed)


# ============================================================================
# Sampling
# ============================================================================

def sample_prior(prior: PriorSpec, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """
    Draw n points from the prior.

    Args:
        prior: Prior specification
        n: Number of samples (>= 1)
        rng: Generator to draw from; defaults to a fresh stream from prior.seed

    Returns:
        Array of shape (n, ambient_dim), every row on the manifold

    Raises:
        ValueError: If n < 1
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = prior.rng() if rng is None else rng
    pieces = [
        _sample_factor(part, factor, n, rng)
        for part, factor in zip(prior.manifold.factors(), prior.factors)
    ]
    return np.concatenate(pieces, axis=-1)


def sample_chunk_prior(prior: PriorSpec, T_p: int, n: int | None = None,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """
    Draw action chunks whose T_p entries are copies of one prior draw.

    Returns:
        (T_p, ambient_dim) when n is None, else (n, T_p, ambient_dim)
    """
    if T_p < 1:
        raise ValueError(f"prediction horizon must be >= 1, got {T_p}")
    draws = sample_prior(prior, 1 if n is None else n, rng)
    chunks = np.repeat(draws[:, None, :], T_p, axis=1)
    return chunks[0] if n is None else chunks


def chunk_manifold(manifold: Manifold, T_p: int) -> Product:
    """The T_p-fold product manifold an action chunk lives on, as an explicit spec."""
    return Product(tuple([manifold] * T_p))
