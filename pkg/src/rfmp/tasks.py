"""
Synthetic Tasks

Desk-scale datasets and a closed-loop environment:

- 2-D stroke demonstrations (L, S and a two-mode shape with an upper and a
  lower route between the same endpoints), optionally lifted onto the unit
  sphere with an inverse stereographic projection
- a smooth curve of 2x2 SPD matrices with wrapped-Gaussian jitter
- a reach environment (planar or on the sphere) plus an expert that
  generates demonstrations for it

Demonstrations use one convention throughout: observations[k] is the state
at step k and actions[k] is the position commanded to reach that state, so
a policy that has seen o^(s-1) predicts a^s, a^(s+1), ... next.

Dataset files are a one-line JSON header followed by a CSV body with
columns ``demo_id, step, o0.., a0..``; floats are written with repr so a
reload is bit-exact.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TaskConfig
from .distributions import make_rng
from .errors import FileFormatError, ProtocolError
from .manifolds import SPD, Euclidean, Manifold, Sphere, parse_manifold
from .training import Dataset, Demonstration

logger = logging.getLogger(__name__)


# ============================================================================
# Constants
# ============================================================================

COORD_LIMIT = 1.5           # stroke coordinates stay in [-1.5, 1.5]
TWO_MODE_HEIGHT = 0.8       # apex of the upper/lower routes
REACH_MIN_SEPARATION = 0.5  # start/goal distance lower bound
REACH_MAX_STEP = 0.1        # expert displacement per step

PLANE = Euclidean(2)
SPHERE = Sphere(3)


# ============================================================================
# Strokes
# ============================================================================

def _stroke_template(shape: str, u: np.ndarray, index: int) -> np.ndarray:
    if shape == "L":
        # down the left edge, then along the bottom; equal arclength per leg
        first = np.minimum(u, 0.5) * 2.0
        second = np.maximum(u - 0.5, 0.0) * 2.0
        return np.stack([-0.8 + 1.6 * second, 0.8 - 1.6 * first], axis=1)
    if shape == "S":
        return np.stack([0.6 * np.sin(2.0 * np.pi * u), 0.9 - 1.8 * u], axis=1)
    if shape == "TwoMode":
        sign = 1.0 if index % 2 == 0 else -1.0
        return np.stack([-1.0 + 2.0 * u, sign * TWO_MODE_HEIGHT * np.sin(np.pi * u)], axis=1)
    raise ValueError(f"Unknown stroke shape {shape!r}")


def gen_strokes(shape: str, n_demos: int, noise: float, seed: int, length: int = 64) -> Dataset:
    """
    Planar stroke demonstrations.

    Each demo is the template shape plus a per-demo offset and a smooth
    sinusoidal perturbation, both scaled by `noise`, clipped to [-1.5, 1.5].
    TwoMode alternates between the upper and lower route by demo index.

    Args:
        shape: "L", "S" or "TwoMode"
        n_demos: Number of demonstrations (>= 1)
        noise: Perturbation scale (0 gives identical copies of the template)
        seed: Generator seed
        length: Steps per demonstration

    Returns:
        Dataset on R2 whose observations equal the positions
    """
    if n_demos < 1:
        raise ValueError(f"n_demos must be >= 1, got {n_demos}")
    rng = make_rng(seed)
    u = np.linspace(0.0, 1.0, length)
    demos = []
    for i in range(n_demos):
        offset = noise * rng.standard_normal(2)
        amplitude = noise * rng.standard_normal(2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        wiggle = amplitude * np.sin(np.pi * u[:, None] + phase)
        path = np.clip(_stroke_template(shape, u, i) + offset + wiggle, -COORD_LIMIT, COORD_LIMIT)
        demos.append(Demonstration(path.copy(), path))
    meta = {"task": "strokes", "shape": shape, "noise": noise, "seed": seed, "n_demos": n_demos}
    return Dataset(PLANE, demos, meta)


def stereographic_to_sphere(p, bound: float = COORD_LIMIT) -> np.ndarray:
    """
    Inverse stereographic map onto S^2, centred at the north pole.

    (u, v) -> (2u, 2v, 1 - r^2) / (1 + r^2) with r^2 = u^2 + v^2, after
    clipping (u, v) to [-bound, bound]^2. The unit disc maps to the upper
    hemisphere.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), -bound, bound)
    r2 = np.sum(p * p, axis=-1, keepdims=True)
    out = np.concatenate([2.0 * p, 1.0 - r2], axis=-1) / (1.0 + r2)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def sphere_to_stereographic(x) -> np.ndarray:
    """Inverse of stereographic_to_sphere: (x, y, z) -> (x, y) / (1 + z)."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., :2] / (1.0 + x[..., 2:3])


def strokes_to_sphere(dataset: Dataset, bound: float = COORD_LIMIT) -> Dataset:
    """Lift planar stroke observations and actions onto S^2."""
    demos = [
        Demonstration(stereographic_to_sphere(d.observations, bound),
                      stereographic_to_sphere(d.actions, bound))
        for d in dataset.demos
    ]
    return Dataset(SPHERE, demos, {**dataset.metadata, "sphere": True, "bound": bound})


# ============================================================================
# SPD Curve
# ============================================================================

def spd_curve(u) -> np.ndarray:
    """
    Smooth curve on SPD(2): R(theta) diag(e^a, e^b) R(theta)^T with
    theta = pi u / 2, a = 1.2 (u - 0.5), b = -0.6 (u - 0.5).

    Returns:
        Flattened 2x2 matrices, shape (*u.shape, 4)
    """
    u = np.asarray(u, dtype=np.float64)
    theta = 0.5 * np.pi * u
    c, s = np.cos(theta), np.sin(theta)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    scales = np.stack([np.exp(1.2 * (u - 0.5)), np.exp(-0.6 * (u - 0.5))], -1)
    mats = (rot * scales[..., None, :]) @ np.swapaxes(rot, -1, -2)
    mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return mats.reshape(*u.shape, 4)


def _jitter(spd: SPD, points: np.ndarray, jitter: float, rng: np.random.Generator) -> np.ndarray:
    if jitter == 0:
        return points
    z = rng.standard_normal(points.shape)
    return spd.exp(points, jitter * spd.isotropic_tangent(points, z))


def gen_spd_dataset(n: int, seed: int, jitter: float = 0.05) -> np.ndarray:
    """
    Points along spd_curve at random parameters with wrapped-Gaussian jitter.

    Returns:
        Array (n, 4) of flattened SPD matrices; jitter=0 puts every point on the curve
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = make_rng(seed)
    points = spd_curve(rng.uniform(0.0, 1.0, size=n))
    return _jitter(SPD(2), points, jitter, rng)


def gen_spd_demos(n_demos: int, length: int, seed: int, jitter: float = 0.05) -> Dataset:
    """Demonstrations that traverse the SPD curve from u=0 to u=1, observations = states."""
    if n_demos < 1:
        raise ValueError(f"n_demos must be >= 1, got {n_demos}")
    rng = make_rng(seed)
    spd = SPD(2)
    u = np.linspace(0.0, 1.0, length)
    demos = []
    for _ in range(n_demos):
        path = _jitter(spd, spd_curve(u), jitter, rng)
        demos.append(Demonstration(path.copy(), path))
    meta = {"task": "spd", "jitter": jitter, "seed": seed, "n_demos": n_demos}
    return Dataset(spd, demos, meta)


# ============================================================================
# Reach Environment
# ============================================================================

def sample_reach_task(rng: np.random.Generator,
                      sphere: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw (start, goal) in [-1, 1]^2 at least REACH_MIN_SEPARATION apart."""
    while True:
        start, goal = rng.uniform(-1.0, 1.0, size=(2, 2))
        if np.linalg.norm(goal - start) >= REACH_MIN_SEPARATION:
            break
    if sphere:
        return stereographic_to_sphere(start), stereographic_to_sphere(goal)
    return start, goal


@dataclass
class ReachEnv:
    """
    Move an agent to a goal by commanding absolute positions.

    Planar actions are clipped to [-bound, bound]^2; sphere actions are
    projected onto the sphere. Observations are [agent position, goal].
    """
    start: np.ndarray
    goal: np.ndarray
    sphere: bool = False
    max_steps: int = 100
    tolerance: float = 0.05
    bound: float = COORD_LIMIT
    position: np.ndarray = field(init=False)
    steps: int = field(init=False, default=0)
    done: bool = field(init=False, default=False)
    _positions: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        self.manifold.check_point(self.start)
        self.manifold.check_point(self.goal)
        self.initial_distance = float(self.manifold.distance(self.start, self.goal))
        self.reset()

    @classmethod
    def random(cls, seed: int, sphere: bool = False, **kwargs) -> "ReachEnv":
        start, goal = sample_reach_task(make_rng(seed), sphere)
        return cls(start, goal, sphere, **kwargs)

    @property
    def manifold(self) -> Manifold:
        return SPHERE if self.sphere else PLANE

    @property
    def distance(self) -> float:
        return float(self.manifold.distance(self.position, self.goal))

    @property
    def reached(self) -> bool:
        return self.distance <= self.tolerance

    @property
    def positions(self) -> list[np.ndarray]:
        return list(self._positions)

    def score(self) -> float:
        if self.initial_distance == 0:
            return 1.0
        return 1.0 - float(np.clip(self.distance / self.initial_distance, 0.0, 1.0))

    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.goal])

    def reset(self) -> np.ndarray:
        self.position = self.start.copy()
        self.steps = 0
        self.done = False
        self._positions = [self.position.copy()]
        return self.observation()

    def step(self, action) -> tuple[np.ndarray, bool, float]:
        """
        Move to the commanded position.

        Returns:
            (observation, done, score)

        Raises:
            ProtocolError: If the episode has already ended
        """
        if self.done:
            raise ProtocolError("ReachEnv.step called after the episode ended; call reset()")
        action = np.asarray(action, dtype=np.float64)
        if self.sphere:
            self.position = self.manifold.project_point(action)
        else:
            self.position = np.clip(action, -self.bound, self.bound)
        self.steps += 1
        self._positions.append(self.position.copy())
        self.done = self.reached or self.steps >= self.max_steps
        return self.observation(), self.done, self.score()


def reach_env_step(env: ReachEnv, action) -> tuple[np.ndarray, bool, float]:
    return env.step(action)


def _expert_path(manifold: Manifold, start: np.ndarray, goal: np.ndarray, length: int,
                 max_step: float) -> np.ndarray:
    path = [start, start]
    position = start
    while len(path) < length:
        d = float(manifold.distance(position, goal))
        if d > 0:
            fraction = min(1.0, max_step / d)
            position = manifold.exp(position, fraction * manifold.log(position, goal))
        path.append(position)
    return np.stack(path)


def gen_reach_demos(n_demos: int, seed: int, sphere: bool = False, length: int = 64,
                    max_step: float = REACH_MAX_STEP) -> Dataset:
    """
    Expert demonstrations for ReachEnv.

    The expert holds its start position for one step, then moves toward the
    goal by at most max_step per step (along the geodesic in sphere mode)
    and stays there.
    """
    if n_demos < 1:
        raise ValueError(f"n_demos must be >= 1, got {n_demos}")
    rng = make_rng(seed)
    manifold = SPHERE if sphere else PLANE
    demos = []
    for _ in range(n_demos):
        start, goal = sample_reach_task(rng, sphere)
        path = _expert_path(manifold, start, goal, length, max_step)
        observations = np.concatenate([path, np.broadcast_to(goal, path.shape)], axis=1)
        demos.append(Demonstration(observations, path))
    meta = {"task": "reach", "sphere": sphere, "seed": seed, "n_demos": n_demos}
    return Dataset(manifold, demos, meta)


def generate_task_dataset(task: TaskConfig, seed: int) -> Dataset:
    """Dataset for a task config section."""
    if task.name == "strokes":
        dataset = gen_strokes(task.shape, task.n_demos, task.noise, seed, task.length)
        return strokes_to_sphere(dataset, task.bound) if task.sphere else dataset
    if task.name == "reach":
        return gen_reach_demos(task.n_demos, seed, task.sphere, task.length)
    if task.name == "spd":
        return gen_spd_demos(task.n_demos, task.length, seed, task.jitter)
    raise ValueError(f"Unknown task {task.name!r}")


# ============================================================================
# Metrics
# ============================================================================

def nearest_distance(manifold: Manifold, samples, data) -> np.ndarray:
    """Geodesic distance from each sample to its nearest data point."""
    samples = manifold.coerce(samples).reshape(-1, manifold.ambient_dim)
    data = manifold.coerce(data).reshape(-1, manifold.ambient_dim)
    return np.array([np.min(manifold.distance(s[None, :], data)) for s in samples])


# ============================================================================
# Dataset Files
# ============================================================================

def write_dataset(path: Path | str, dataset: Dataset) -> None:
    """
    Write a dataset file: JSON header line, then CSV rows.

    Raises:
        OSError: If the file cannot be written
    """
    obs_dim, action_dim = dataset.obs_dim, dataset.action_dim
    header = {
        "manifold": str(dataset.manifold),
        "obs_dim": obs_dim,
        "action_dim": action_dim,
        "n_demos": len(dataset.demos),
        "metadata": dataset.metadata,
    }
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        writer = csv.writer(f)
        writer.writerow(
            ["demo_id", "step", *[f"o{i}" for i in range(obs_dim)],
             *[f"a{i}" for i in range(action_dim)]]
        )
        for demo_id, demo in enumerate(dataset.demos):
            for step, (obs, action) in enumerate(zip(demo.observations, demo.actions)):
                writer.writerow([demo_id, step, *map(repr, map(float, obs)),
                                 *map(repr, map(float, action))])
    logger.debug("Wrote %d demonstrations to %s", len(dataset.demos), path)


def read_dataset(path: Path | str) -> Dataset:
    """
    Read a dataset file written by write_dataset.

    Raises:
        FileNotFoundError: If the file doesn't exist
        FileFormatError: If the header or rows are malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        try:
            header = json.loads(f.readline())
            manifold_text = header["manifold"]
            obs_dim, action_dim = int(header["obs_dim"]), int(header["action_dim"])
            n_demos = int(header["n_demos"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"Malformed dataset header in {path}: {exc}") from exc
        manifold = parse_manifold(manifold_text)
        reader = csv.reader(f)
        if next(reader, None) is None:
            raise FileFormatError(f"Missing column header in {path}")
        rows: dict[int, list[list[float]]] = {}
        for row in reader:
            if len(row) != 2 + obs_dim + action_dim:
                raise FileFormatError(f"Malformed dataset row in {path}: {row[:2]}")
            try:
                rows.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise FileFormatError(f"Non-numeric dataset row in {path}: {row[:2]}") from exc
    demos = []
    for demo_id in sorted(rows):
        values = np.array(rows[demo_id])
        demos.append(Demonstration(values[:, :obs_dim], values[:, obs_dim:]))
    if len(demos) != n_demos:
        raise FileFormatError(f"{path}: header announces {n_demos} demos, found {len(demos)}")
    return Dataset(manifold, demos, header.get("metadata", {}))
