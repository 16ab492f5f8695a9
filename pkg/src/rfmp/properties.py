"""
Property Suite

Executable invariants for every component: geometry, priors, flows,
network gradients, optimizer, integrators and tasks. Each property is a
function of a seeded generator returning (passed, detail); run_properties()
collects them into a machine-readable report:

    {"properties": [{"name", "passed", "detail"}, ...], "passed": n, "failed": m}

A mutation hook (``exp-sign-flip``) swaps in a broken exponential map so
the suite can be shown to catch it.
"""

import logging
import tempfile
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import IntegratorConfig, PolicyConfig, TrainConfig
from .distributions import (
    PriorSpec,
    SphereUniform,
    WrappedGaussian,
    default_prior,
    make_rng,
    sample_chunk_prior,
    sample_prior,
)
from .errors import ConfigError, CutLocusError, ProtocolError
from .flows import (
    AugmentedState,
    FlowParams,
    cfm_path,
    exact_stable_field,
    lasalle_check,
    lyapunov_value,
    rcfm_geodesic_path,
    sfm_path,
    srfm_path,
)
from .inference import horizon_config, integrate_projected_euler, integrate_srfmp, jerkiness
from .manifolds import SPD, Euclidean, Manifold, Product, Sphere, format_manifold, parse_manifold
from .nnet import (
    Checkpoint,
    ModelLayout,
    VectorFieldModel,
    backward,
    forward,
    init_model,
    load_checkpoint,
    make_inputs,
    save_checkpoint,
    split_output,
)
from .tasks import (
    ReachEnv,
    gen_spd_dataset,
    gen_strokes,
    sphere_to_stereographic,
    stereographic_to_sphere,
    strokes_to_sphere,
)
from .training import AdamState, adamw_step, assemble_batch, ema_update, flow_targets, \
    make_training_pair

logger = logging.getLogger(__name__)


# ============================================================================
# Constants
# ============================================================================

GEOMETRY_SUITE = ("R2", "S2", "S3", "SPD2", "SPD3", "R3xS3xR1")
FLOW_SUITE = ("R2", "S2", "SPD2", "R3xS3xR1")

MUTATIONS = ("exp-sign-flip",)

ROUNDTRIP_PAIRS = 1000
FD_TRIPLES = 100
FD_STEP = 1e-5
LYAPUNOV_INSTANCES = 200

PropertyFn = Callable[[np.random.Generator], tuple[bool, str]]

_REGISTRY: list[tuple[str, PropertyFn]] = []


def prop(name: str):
    """Register a property under a dotted name."""
    def register(fn: PropertyFn) -> PropertyFn:
        _REGISTRY.append((name, fn))
        return fn
    return register


def property_names() -> list[str]:
    return [name for name, _ in _REGISTRY]


# ============================================================================
# Helpers
# ============================================================================

def _max_error(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _check(error: float, tol: float, label: str = "max error") -> tuple[bool, str]:
    return error <= tol, f"{label} {error:.3e} (tol {tol:.0e})"


def _combine(results: list[tuple[str, bool, str]]) -> tuple[bool, str]:
    failed = [f"{tag}: {detail}" for tag, ok, detail in results if not ok]
    if failed:
        return False, "; ".join(failed)
    return True, "; ".join(f"{tag}: {detail}" for tag, _, detail in results)


def _tangents(manifold: Manifold, x: np.ndarray, rng: np.random.Generator,
              max_norm: float) -> np.ndarray:
    """Tangents at x with metric norm uniform in [0, max_norm]."""
    v = manifold.random_tangent(x, rng)
    n = manifold.norm(x, v)[..., None]
    r = rng.uniform(0.0, max_norm, size=n.shape)
    return v * (r / np.maximum(n, 1e-300))


def _pairs(manifold: Manifold, rng: np.random.Generator, n: int,
           radius: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Point pairs at distance <= radius (well inside the sphere cut locus)."""
    x0 = manifold.random_point(rng, (n,))
    x1 = manifold.exp(x0, _tangents(manifold, x0, rng, radius))
    return x0, x1


def _slices(m: Manifold) -> list[slice]:
    return m.slices() if isinstance(m, Product) else [slice(0, m.ambient_dim)]


def _central_difference(manifold: Manifold, path: Callable, t: np.ndarray) -> np.ndarray:
    x_t = path(t)
    ahead = manifold.log(x_t, path(t + FD_STEP))
    behind = manifold.log(x_t, path(t - FD_STEP))
    return (ahead - behind) / (2.0 * FD_STEP)


# ============================================================================
# Geometry
# ============================================================================

@prop("manifolds.exp_log_roundtrip")
def _exp_log_roundtrip(rng):
    results = []
    for text in GEOMETRY_SUITE:
        m = parse_manifold(text)
        x = m.random_point(rng, (ROUNDTRIP_PAIRS,))
        v = _tangents(m, x, rng, 1.0)
        results.append((text, *_check(_max_error(m.log(x, m.exp(x, v)), v), 1e-8)))
    return _combine(results)


@prop("manifolds.norm_preservation")
def _norm_preservation(rng):
    results = []
    for text in GEOMETRY_SUITE:
        m = parse_manifold(text)
        x = m.random_point(rng, (ROUNDTRIP_PAIRS,))
        v = _tangents(m, x, rng, 1.0)
        results.append((text, *_check(_max_error(m.distance(x, m.exp(x, v)), m.norm(x, v)), 1e-8)))
    return _combine(results)


@prop("manifolds.distance_symmetry_and_identity")
def _distance_symmetry(rng):
    results = []
    for text in GEOMETRY_SUITE:
        m = parse_manifold(text)
        x, y = m.random_point(rng, (200,)), m.random_point(rng, (200,))
        error = max(_max_error(m.distance(x, y), m.distance(y, x)),
                    float(np.max(m.distance(x, x))))
        results.append((text, *_check(error, 1e-12)))
    return _combine(results)


@prop("manifolds.triangle_inequality")
def _triangle_inequality(rng):
    results = []
    for text in GEOMETRY_SUITE:
        m = parse_manifold(text)
        x, y, z = (m.random_point(rng, (200,)) for _ in range(3))
        excess = m.distance(x, z) - m.distance(x, y) - m.distance(y, z)
        results.append((text, *_check(max(float(np.max(excess)), 0.0), 1e-8, "max excess")))
    return _combine(results)


@prop("manifolds.product_factorization")
def _product_factorization(rng):
    m = parse_manifold("R3xS3xR1")
    x = m.random_point(rng, (100,))
    v = _tangents(m, x, rng, 1.0)
    y = m.random_point(rng, (100,))
    exp_parts = np.concatenate(
        [p.exp(x[:, sl], v[:, sl]) for p, sl in zip(m.factors(), m.slices())], axis=-1)
    log_parts = np.concatenate(
        [p.log(x[:, sl], y[:, sl]) for p, sl in zip(m.factors(), m.slices())], axis=-1)
    dist_parts = np.sqrt(sum(p.distance(x[:, sl], y[:, sl]) ** 2
                             for p, sl in zip(m.factors(), m.slices())))
    error = max(_max_error(m.exp(x, v), exp_parts), _max_error(m.log(x, y), log_parts),
                _max_error(m.distance(x, y), dist_parts))
    return _check(error, 1e-12)


@prop("manifolds.tangent_projection_orthogonal")
def _tangent_projection(rng):
    results = []
    for text in GEOMETRY_SUITE:
        m = parse_manifold(text)
        x = m.random_point(rng, (200,))
        raw = rng.standard_normal(x.shape)
        p = m.project_tangent(x, raw)
        error = _max_error(m.project_tangent(x, p), p)
        if isinstance(m, Sphere):
            w = m.random_tangent(x, rng)
            error = max(error, float(np.max(np.abs(np.sum((raw - p) * w, axis=-1)))))
        results.append((text, *_check(error, 1e-12)))
    return _combine(results)


@prop("manifolds.spec_string_roundtrip")
def _spec_roundtrip(rng):
    texts = [*GEOMETRY_SUITE, "R1", "S1", "SPD4", "S2xSPD2xR5"]
    bad = [t for t in texts if format_manifold(parse_manifold(t)) != t]
    return not bad, f"{len(texts)} strings" if not bad else f"mismatch for {bad}"


@prop("manifolds.worked_examples")
def _worked_examples(rng):
    sphere, spd, plane = Sphere(3), SPD(2), Euclidean(2)
    checks = [
        _max_error(sphere.exp([1, 0, 0], [0, np.pi / 2, 0]), [0, 1, 0]),
        _max_error(spd.exp([1, 0, 0, 1], [np.log(2), 0, 0, np.log(3)]), [2, 0, 0, 3]),
        _max_error(plane.exp([1, 1], [2, -1]), [3, 0]),
        _max_error(sphere.log([1, 0, 0], [0, 1, 0]), [0, np.pi / 2, 0]),
        _max_error(spd.distance([1, 0, 0, 1], [np.e ** 2, 0, 0, 1]), 2.0),
        _max_error(spd.inner([1, 0, 0, 1], [1, 0, 0, 0], [1, 0, 0, 0]), 1.0),
        _max_error(spd.project_point([1, 0.5, 0.4, 1]), [1, 0.45, 0.45, 1]),
    ]
    return _check(max(checks), 1e-12)


@prop("manifolds.cut_locus_detected")
def _cut_locus(rng):
    try:
        Sphere(3).log([0, 0, 1], [0, 0, -1])
    except CutLocusError:
        return True, "antipodal log raises CutLocusError"
    return False, "antipodal log returned a value"


# ============================================================================
# Priors
# ============================================================================

@prop("distributions.samples_on_manifold")
def _samples_on_manifold(rng):
    results = []
    for text in GEOMETRY_SUITE:
        m = parse_manifold(text)
        samples = sample_prior(default_prior(m, seed=int(rng.integers(1 << 31))), 500)
        m.check_point(samples)
        ok = True
        for part, sl in zip(m.factors(), _slices(m)):
            if isinstance(part, SPD):
                ok = ok and bool(np.all(part.min_eigenvalue(samples[:, sl]) > 0))
        results.append((text, ok, "on manifold" if ok else "non-positive eigenvalue"))
    return _combine(results)


@prop("distributions.sphere_uniform_covariance")
def _sphere_covariance(rng):
    m = Sphere(3)
    samples = sample_prior(PriorSpec(m, (SphereUniform(),)), 100_000, rng)
    cov = samples.T @ samples / len(samples)
    return _check(_max_error(cov, np.eye(3) / 3.0), 0.02)


@prop("distributions.wrapped_gaussian_mean")
def _wrapped_mean(rng):
    m = Sphere(3)
    mu = np.array([0.0, 0.0, 1.0])
    samples = sample_prior(PriorSpec(m, (WrappedGaussian(mu, 0.5),)), 10_000, rng)
    m.check_point(samples)
    se = samples[:, :2].std(axis=0) / np.sqrt(len(samples))
    offset = np.abs(samples[:, :2].mean(axis=0))
    return bool(np.all(offset <= 3.0 * se)), f"offset {offset.max():.2e} vs 3se {3 * se.min():.2e}"


@prop("distributions.point_mass_limit")
def _point_mass(rng):
    mu = [0.0, 0.0, 1.0]
    samples = sample_prior(PriorSpec(Sphere(3), (WrappedGaussian(mu, 0.0),)), 3, rng)
    return _check(_max_error(samples, np.tile(mu, (3, 1))), 0.0)


@prop("distributions.chunk_prior_tiled")
def _chunk_tiled(rng):
    m = parse_manifold("R3xS3xR1")
    chunks = sample_chunk_prior(default_prior(m), 16, n=8, rng=rng)
    error = _max_error(chunks, np.repeat(chunks[:, :1], 16, axis=1))
    return _check(error, 0.0)


@prop("distributions.deterministic_streams")
def _deterministic_streams(rng):
    prior = default_prior(parse_manifold("R3xS3xR1"), seed=int(rng.integers(1 << 31)))
    a, b = sample_prior(prior, 64), sample_prior(prior, 64)
    return a.tobytes() == b.tobytes(), "identical seeds give identical streams"


# ============================================================================
# Flows
# ============================================================================

def _augmented_pair(m: Manifold, rng: np.random.Generator, n: int):
    x0, x1 = _pairs(m, rng, n)
    return AugmentedState(x0, rng.uniform(-1, 1, n)), AugmentedState(x1, np.ones(n))


@prop("flows.finite_difference_cfm")
def _fd_cfm(rng):
    m = Euclidean(2)
    params = FlowParams(sigma=0.1)
    x0, x1 = _pairs(m, rng, FD_TRIPLES)
    t = rng.uniform(0, 1, FD_TRIPLES)
    fd = _central_difference(m, lambda s: cfm_path(m, s, x0, x1, params)[0], t)
    return _check(_max_error(fd, cfm_path(m, t, x0, x1, params)[1]), 1e-5)


@prop("flows.finite_difference_rcfm")
def _fd_rcfm(rng):
    results = []
    for text in FLOW_SUITE:
        m = parse_manifold(text)
        x0, x1 = _pairs(m, rng, FD_TRIPLES)
        t = rng.uniform(0, 1, FD_TRIPLES)
        fd = _central_difference(m, lambda s: rcfm_geodesic_path(m, s, x0, x1)[0], t)
        results.append((text, *_check(_max_error(fd, rcfm_geodesic_path(m, t, x0, x1)[1]), 1e-5)))
    return _combine(results)


def _fd_stable(m: Manifold, path_fn, rng) -> tuple[bool, str]:
    params = FlowParams()
    xi0, xi1 = _augmented_pair(m, rng, FD_TRIPLES)
    t = rng.uniform(0, 2, FD_TRIPLES)
    fd_x = _central_difference(m, lambda s: path_fn(m, s, xi0, xi1, params)[0].spatial, t)
    tau = lambda s: path_fn(m, s, xi0, xi1, params)[0].tau  # noqa: E731
    fd_tau = (tau(t + FD_STEP) - tau(t - FD_STEP)) / (2.0 * FD_STEP)
    u = path_fn(m, t, xi0, xi1, params)[1]
    return _check(max(_max_error(fd_x, u.spatial), _max_error(fd_tau, u.tau)), 1e-5)


@prop("flows.finite_difference_sfm")
def _fd_sfm(rng):
    return _fd_stable(Euclidean(3), sfm_path, rng)


@prop("flows.finite_difference_srfm")
def _fd_srfm(rng):
    return _combine([(text, *_fd_stable(parse_manifold(text), srfm_path, rng))
                     for text in FLOW_SUITE])


@prop("flows.lyapunov_decreasing")
def _lyapunov_decreasing(rng):
    results = []
    params = FlowParams()
    grid = np.linspace(0.0, 5.0, 100)
    for text in FLOW_SUITE:
        m = parse_manifold(text)
        xi0, xi1 = _augmented_pair(m, rng, LYAPUNOV_INSTANCES)
        values = np.stack([
            lyapunov_value(m, srfm_path(m, t, xi0, xi1, params)[0], xi1, params) for t in grid
        ])
        prev, nxt = values[:-1], values[1:]
        violations = int(np.sum((prev > 1e-12) & (nxt >= prev)) + np.sum(nxt > prev + 1e-12))
        results.append((text, violations == 0, f"{violations} violations"))
    return _combine(results)


@prop("flows.rcfm_boundaries")
def _rcfm_boundaries(rng):
    results = []
    for text in FLOW_SUITE:
        m = parse_manifold(text)
        x0, x1 = _pairs(m, rng, 100)
        error = max(float(np.max(m.distance(rcfm_geodesic_path(m, 0.0, x0, x1)[0], x0))),
                    float(np.max(m.distance(rcfm_geodesic_path(m, 1.0, x0, x1)[0], x1))))
        results.append((text, *_check(error, 1e-9)))
    return _combine(results)


@prop("flows.euclidean_degeneration")
def _euclidean_degeneration(rng):
    m = Euclidean(4)
    params = FlowParams()
    xi0, xi1 = _augmented_pair(m, rng, 50)
    t = rng.uniform(0, 3, 50)
    a, ua = srfm_path(m, t, xi0, xi1, params)
    b, ub = sfm_path(m, t, xi0, xi1, params)
    c, uc = rcfm_geodesic_path(m, t, xi0.spatial, xi1.spatial)
    d, ud = cfm_path(m, t, xi0.spatial, xi1.spatial, FlowParams(sigma=0.0))
    error = max(_max_error(a.spatial, b.spatial), _max_error(ua.spatial, ub.spatial),
                _max_error(c, d), _max_error(uc, ud))
    return _check(error, 0.0)


@prop("flows.stable_rcfm_reparametrization")
def _reparametrization(rng):
    results = []
    params = FlowParams(lambda_x=2.5, lambda_tau=2.5)
    for text in FLOW_SUITE:
        m = parse_manifold(text)
        xi0, xi1 = _augmented_pair(m, rng, 100)
        t = rng.uniform(0, 2, 100)
        stable = srfm_path(m, t, xi0, xi1, params)[0].spatial
        geodesic = rcfm_geodesic_path(m, 1.0 - np.exp(-2.5 * t), xi0.spatial, xi1.spatial)[0]
        results.append((text, *_check(_max_error(stable, geodesic), 1e-10)))
    return _combine(results)


@prop("flows.lasalle_sign")
def _lasalle_sign(rng):
    params = FlowParams()
    results = []
    for text in FLOW_SUITE:
        m = parse_manifold(text)
        xi0, xi1 = _augmented_pair(m, rng, 100)
        field = exact_stable_field(m, xi1, params)

        def outward(xi):
            u = field(xi)
            return AugmentedState(-u.spatial, -u.tau)

        inward = lasalle_check(m, xi0, xi1, params, field)
        flipped = lasalle_check(m, xi0, xi1, params, outward)
        ok = bool(np.all(inward <= 1e-12) and np.all(flipped >= -1e-12))
        results.append((text, ok, f"max inward {np.max(inward):.2e}"))
    return _combine(results)


# ============================================================================
# Network
# ============================================================================

GRADIENT_LAYOUTS = (("R2", "rfmp", False), ("S2", "srfmp", False), ("SPD2", "rfmp", False),
                    ("R3xS3xR1", "srfmp", True))


def _random_model(m: Manifold, mode: str, separate: bool, rng) -> VectorFieldModel:
    layout = ModelLayout(horizon=2, action_dim=m.ambient_dim, obs_dim=3, embedding_dim=4,
                         hidden=(8, 8), mode=mode, separate_tau_mlp=separate, tau_hidden=(8, 8))
    model = init_model(layout, rng)
    for name, weight in model.params.items():
        if not weight.any():
            model.params[name] = rng.uniform(-0.5, 0.5, size=weight.shape)
    return model


def _gradient_case(text: str, mode: str, separate: bool, rng) -> tuple[bool, str]:
    m = parse_manifold(text)
    model = _random_model(m, mode, separate, rng)
    x = m.random_point(rng, (3, 2))
    u = m.random_tangent(x, rng)
    inputs = make_inputs(model, x, rng.uniform(0, 1, 3), rng.standard_normal((3, 3)))
    tau_targets = rng.standard_normal(3) if mode == "srfmp" else None
    _, grads = backward(model, m, inputs, x, u, tau_targets)
    h = 1e-6
    worst = 0.0
    for name, weight in model.params.items():
        for idx in np.ndindex(weight.shape):
            original = weight[idx]
            weight[idx] = original + h
            up = backward(model, m, inputs, x, u, tau_targets)[0]
            weight[idx] = original - h
            down = backward(model, m, inputs, x, u, tau_targets)[0]
            weight[idx] = original
            fd = (up - down) / (2.0 * h)
            g = grads[name][idx]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-4))
    return _check(worst, 1e-4, "max relative error")


@prop("nnet.gradient_check")
def _gradient_check(rng):
    return _combine([(f"{text}/{mode}", *_gradient_case(text, mode, separate, rng))
                     for text, mode, separate in GRADIENT_LAYOUTS])


@prop("nnet.zero_initial_field")
def _zero_initial_field(rng):
    m = Sphere(3)
    layout = ModelLayout(horizon=4, action_dim=3, obs_dim=2, mode="srfmp")
    model = init_model(layout, rng)
    out = forward(model, m.random_point(rng, (5, 4)), rng.uniform(0, 1, 5),
                  rng.standard_normal((5, 2)))
    return _check(float(np.max(np.abs(out))), 0.0, "max output")


@prop("nnet.output_tangency")
def _output_tangency(rng):
    m = Sphere(3)
    model = _random_model(m, "rfmp", False, rng)
    x = m.random_point(rng, (16, 2))
    raw = forward(model, x, rng.uniform(0, 1, 16), rng.standard_normal((16, 3)))
    v = m.project_tangent(x, split_output(model, raw)[0])
    return _check(float(np.max(np.abs(np.sum(x * v, axis=-1)))), 1e-9, "max radial")


@prop("nnet.checkpoint_roundtrip")
def _checkpoint_roundtrip(rng):
    m = parse_manifold("R3xS3xR1")
    model = _random_model(m, "srfmp", True, rng)
    ckpt = Checkpoint(model, m, FlowParams(), {"ema": model.copy().params},
                      {"note": "roundtrip"})
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
    x = m.random_point(rng, (4, 2))
    t, o = rng.uniform(0, 1, 4), rng.standard_normal((4, 3))
    same = forward(model, x, t, o).tobytes() == forward(loaded.model, x, t, o).tobytes()
    same = same and str(loaded.manifold) == str(m) and loaded.flow == ckpt.flow
    return same, "bit-exact reload" if same else "reloaded checkpoint differs"


# ============================================================================
# Training
# ============================================================================

@prop("training.adamw_quadratic_oracle")
def _adamw_oracle(rng):
    layout = ModelLayout(horizon=1, action_dim=1, obs_dim=0, hidden=(1,))
    model = VectorFieldModel(layout, {"w": np.array([5.0, 5.0])})
    config = TrainConfig(learning_rate=0.01, weight_decay=0.0)
    state = AdamState(0, {"w": np.zeros(2)}, {"w": np.zeros(2)})
    w, m, v = 5.0, 0.0, 0.0
    norms, error = [], 0.0
    for k in range(1, 101):
        adamw_step(model, {"w": model.params["w"].copy()}, state, config)
        g = w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        error = max(error, _max_error(model.params["w"], [w, w]))
        norms.append(float(np.linalg.norm(model.params["w"])))
    monotone = all(b < a for a, b in zip(norms[4:], norms[5:]))
    ok, detail = _check(error, 1e-10, "oracle error")
    return ok and monotone and norms[-1] < np.hypot(5, 5), detail


@prop("training.ema_geometric_convergence")
def _ema_geometric(rng):
    layout = ModelLayout(horizon=1, action_dim=1, obs_dim=0, hidden=(1,))
    ema = VectorFieldModel(layout, {"w": np.zeros(3)})
    model = VectorFieldModel(layout, {"w": np.ones(3)})
    error = 0.0
    for k in range(1, 51):
        ema_update(ema, model, 0.9)
        error = max(error, _max_error(ema.params["w"], 1.0 - 0.9 ** k))
    return _check(error, 1e-12)


@prop("training.interpolant_equivalence")
def _interpolant_equivalence(rng):
    dataset = gen_strokes("L", 3, 0.05, int(rng.integers(1 << 31)), length=24)
    policy = PolicyConfig(T_p=4, T_a=2, T_o=2)
    windows = [(i, s) for i in range(3) for s in (2, 9, 20)]
    batch = assemble_batch(dataset, windows, policy, default_prior(dataset.manifold), rng)
    params = FlowParams(sigma=0.0, lambda_x=2.5, lambda_tau=2.5)
    stable = flow_targets(dataset.manifold, batch, "srfmp", params)[0]
    batch.t = 1.0 - np.exp(-2.5 * batch.t)
    linear = flow_targets(dataset.manifold, batch, "rfmp", params, flow="cfm")[0]
    return _check(_max_error(stable, linear), 1e-10)


@prop("training.observation_window")
def _observation_window(rng):
    demo = gen_strokes("S", 1, 0.0, 0, length=30).demos[0]
    ok = True
    for _ in range(50):
        _, obs = make_training_pair(demo, 10, 4, 4, rng)
        gap = int(obs[-1])
        c = 10 - gap
        ok = ok and gap in (2, 3, 4) and np.array_equal(obs[2:4], demo.observations[c])
    _, obs2 = make_training_pair(demo, 10, 1, 2, rng)
    ok = ok and obs2.shape == (4,) and np.array_equal(obs2[2:], demo.observations[8])
    return ok, "conditioning index within [s-T_o, s-2]"


# ============================================================================
# Integration
# ============================================================================

@prop("inference.manifold_closure")
def _manifold_closure(rng):
    results = []
    config = IntegratorConfig(nfe=20, t_end=1.0)
    for text in GEOMETRY_SUITE:
        m = parse_manifold(text)
        a = rng.standard_normal((m.ambient_dim, m.ambient_dim))
        scale = 0.5 / np.sqrt(m.ambient_dim)

        def field(x, t):
            z = scale * (x @ a.T) / (1.0 + np.linalg.norm(x, axis=-1, keepdims=True))
            return m.isotropic_tangent(x, z)

        x0 = m.random_point(rng, (32,))
        traj = integrate_projected_euler(m, field, x0, config)
        m.check_point(traj.points)
        ok = all(bool(np.all(part.min_eigenvalue(traj.points[..., sl]) > 0))
                 for part, sl in zip(m.factors(), _slices(m)) if isinstance(part, SPD))
        results.append((text, ok, f"{len(traj)} iterates on manifold"))

    # a constant field that drives one eigenvalue to zero within a few steps
    spd = SPD(2)
    push = np.array([-2.0, 0.0, 0.0, 0.0])
    traj = integrate_projected_euler(spd, lambda x, t: push, np.eye(2).ravel(), IntegratorConfig())
    spd.check_point(traj.points)
    floor = float(np.min(spd.min_eigenvalue(traj.points)))
    results.append(("SPD2 boundary", floor > 0.0, f"smallest eigenvalue {floor:.1e}"))
    return _combine(results)


@prop("inference.exact_rcfm_recovery")
def _exact_rcfm_recovery(rng):
    m = Sphere(3)
    x0, x1 = _pairs(m, rng, 100)
    traj = integrate_projected_euler(m, lambda x, t: m.log(x, x1) / (1.0 - t), x0,
                                     IntegratorConfig(nfe=100))
    ratio = float(np.max(m.distance(traj.final, x1) / np.maximum(m.distance(x0, x1), 1e-12)))
    return _check(ratio, 0.02, "max distance ratio")


@prop("inference.single_step_convergence")
def _single_step(rng):
    params = FlowParams()
    results = []
    for text, tol in (("R2", 1e-12), ("S2", 1e-10), ("SPD2", 1e-10)):
        m = parse_manifold(text)
        xi0, xi1 = _augmented_pair(m, rng, 100)
        traj = integrate_srfmp(m, exact_stable_field(m, xi1, params), xi0, params,
                               IntegratorConfig(nfe=1))
        results.append((text, *_check(float(np.max(m.distance(traj.final, xi1.spatial))), tol)))
    return _combine(results)


@prop("inference.srfmp_refinement_idempotent")
def _refinement_idempotent(rng):
    params = FlowParams()
    results = []
    for text in FLOW_SUITE:
        m = parse_manifold(text)
        _, xi1 = _augmented_pair(m, rng, 20)
        traj = integrate_srfmp(m, exact_stable_field(m, xi1, params), xi1, params,
                               IntegratorConfig(nfe=6))
        moves = max(float(np.max(m.distance(a, b))) for a, b in zip(traj.points, traj.points[1:]))
        results.append((text, *_check(moves, 1e-10, "max move")))
    return _combine(results)


def _to_horizon(t_end: float, params: FlowParams) -> IntegratorConfig:
    return horizon_config(IntegratorConfig(), params, t_end, "srfmp")


@prop("inference.integration_time_robustness")
def _integration_time(rng):
    params = FlowParams()
    results = []
    for text in ("R2", "S2"):
        m = parse_manifold(text)
        xi0, xi1 = _augmented_pair(m, rng, 50)
        field = exact_stable_field(m, xi1, params)
        end1 = integrate_srfmp(m, field, xi0, params, _to_horizon(1.0, params)).final
        end2 = integrate_srfmp(m, field, xi0, params, _to_horizon(2.0, params)).final
        stable_gap = float(np.max(m.distance(end1, end2)))

        def path_field(x, t):
            return rcfm_geodesic_path(m, t, xi0.spatial, xi1.spatial)[1]

        r1 = integrate_projected_euler(m, path_field, xi0.spatial, IntegratorConfig(50, 1.0)).final
        r2 = integrate_projected_euler(m, path_field, xi0.spatial, IntegratorConfig(100, 2.0)).final
        drift = float(np.mean(m.distance(r1, r2)))
        ok = stable_gap <= 1e-8 and drift > 1e-3
        results.append((text, ok, f"stable {stable_gap:.1e}, rcfm drift {drift:.3f}"))
    return _combine(results)


@prop("inference.jerkiness_examples")
def _jerkiness_examples(rng):
    t = np.arange(10.0)
    checks = [
        abs(jerkiness(np.ones((10, 2)), 0.1)),
        abs(jerkiness(np.stack([t ** 2, 3 * t ** 2 - t], axis=1), 1.0)),
        abs(jerkiness((t ** 3)[:, None], 1.0) - 36.0),
    ]
    return _check(max(checks), 1e-9)


# ============================================================================
# Tasks
# ============================================================================

@prop("tasks.stereographic_roundtrip")
def _stereographic_roundtrip(rng):
    axis = np.linspace(-1.5, 1.5, 31)
    grid = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
    points = stereographic_to_sphere(grid)
    error = max(_max_error(sphere_to_stereographic(points), grid),
                _max_error(np.linalg.norm(points, axis=-1), 1.0))
    return _check(error, 1e-10)


@prop("tasks.dataset_determinism")
def _dataset_determinism(rng):
    seed = int(rng.integers(1 << 31))
    a = gen_strokes("TwoMode", 4, 0.05, seed, length=20)
    b = gen_strokes("TwoMode", 4, 0.05, seed, length=20)
    same = all(x.actions.tobytes() == y.actions.tobytes() for x, y in zip(a.demos, b.demos))
    same = same and gen_spd_dataset(100, seed).tobytes() == gen_spd_dataset(100, seed).tobytes()
    return same, "bit-identical regeneration"


@prop("tasks.sphere_demonstrations_valid")
def _sphere_demos(rng):
    dataset = strokes_to_sphere(gen_strokes("L", 5, 0.1, int(rng.integers(1 << 31)), length=32))
    for demo in dataset.demos:
        dataset.manifold.check_point(demo.actions)
        dataset.manifold.check_point(demo.observations)
    return True, f"{len(dataset.demos)} demonstrations on S2"


@prop("tasks.spd_dataset_positive")
def _spd_positive(rng):
    points = gen_spd_dataset(200, int(rng.integers(1 << 31)), jitter=0.2)
    low = float(np.min(SPD(2).min_eigenvalue(points)))
    return low > 0, f"min eigenvalue {low:.3e}"


@prop("tasks.reach_env_protocol")
def _reach_protocol(rng):
    env = ReachEnv.random(int(rng.integers(1 << 31)), max_steps=5)
    _, done, score = env.step(env.goal)
    ok = done and score == 1.0
    try:
        env.step(env.goal)
        ok = False
    except ProtocolError:
        pass
    idle = ReachEnv.random(int(rng.integers(1 << 31)), max_steps=5)
    for _ in range(5):
        _, done, score = idle.step(idle.start)
    sphere = ReachEnv.random(int(rng.integers(1 << 31)), sphere=True)
    obs, _, _ = sphere.step([3.0, -1.0, 2.0])
    ok = ok and done and score == 0.0 and abs(np.linalg.norm(obs[:3]) - 1.0) <= 1e-12
    return ok, "goal step, idle episode and sphere projection"


# ============================================================================
# Runner
# ============================================================================

@contextmanager
def mutation(name: str | None) -> Iterator[None]:
    """
    Temporarily install a known-bad implementation.

    ``exp-sign-flip`` replaces Exp_x(v) by Exp_x(-v) on every manifold.

    Raises:
        ConfigError: For an unknown mutation name
    """
    if name is None:
        yield
        return
    if name not in MUTATIONS:
        raise ConfigError("mutation", f"unknown mutation {name!r}; choose from {MUTATIONS}")
    originals = {cls: cls.exp for cls in (Euclidean, Sphere, SPD)}

    def flipped(original):
        def exp(self, x, v):
            return original(self, x, -np.asarray(v, dtype=np.float64))
        return exp

    try:
        for cls, original in originals.items():
            cls.exp = flipped(original)
        logger.warning("Mutation %s installed", name)
        yield
    finally:
        for cls, original in originals.items():
            cls.exp = original


def run_properties(seed: int = 0, names: list[str] | None = None,
                   mutation_name: str | None = None) -> dict:
    """
    Run the property suite.

    Args:
        seed: Base seed; property i draws from make_rng(seed + i)
        names: Optional subset of property names
        mutation_name: Optional mutation to install for the run

    Returns:
        Report dict with per-property results and pass/fail counts
    """
    selected = [(i, name, fn) for i, (name, fn) in enumerate(_REGISTRY)
                if names is None or name in names]
    records = []
    with mutation(mutation_name):
        for i, name, fn in selected:
            start = time.perf_counter()
            try:
                passed, detail = fn(make_rng(seed + i))
            except Exception as exc:
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            elapsed = time.perf_counter() - start
            logger.debug("%s: %s (%.2fs) %s", name, "PASS" if passed else "FAIL", elapsed, detail)
            records.append({"name": name, "passed": bool(passed), "detail": detail})
    n_passed = sum(r["passed"] for r in records)
    return {"properties": records, "passed": n_passed, "failed": len(records) - n_passed}
