"""
Inference: projected Euler integration and the receding-horizon policy.

Integration happens in the tangent space and is mapped back with the
exponential map, x_{k+1} = Exp_{x_k}(dt * P_{x_k} v(x_k, t_k)), so every
iterate stays on the manifold.

Two schedules:
- RFMP: N uniform steps of size T/N from t=0 (T defaults to 1; larger T
  extends the flow past its training horizon)
- SRFMP: a first step of 1/lambda_x, which lands on the target for the exact
  stable field, followed by N-1 refinement steps of size epsilon; T is not
  used (horizon_config adds refinement steps to reach a given T). With
  srfmp_first_step disabled SRFMP uses uniform T/N steps as well.

The policy samples a chunk of T_p actions from the tiled prior, integrates
the learned field conditioned on the latest observations and executes the
first T_a actions.
"""

import csv
import json
import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .config import IntegratorConfig, PolicyConfig
from .distributions import PriorSpec, default_prior, make_rng, sample_chunk_prior
from .errors import ConfigError, IntegrationDivergedError, ProtocolError
from .flows import AugmentedState, FlowParams
from .manifolds import Manifold, euclidean_mask
from .nnet import Checkpoint, VectorFieldModel, forward, split_output
from .training import Normalizer, observation_dim, observation_vector

logger = logging.getLogger(__name__)


# ============================================================================
# Data Structures
# ============================================================================

@dataclass
class Trajectory:
    """
    Integrator output.

    Attributes:
        points: Iterates, shape (N+1, *x0.shape)
        times: Integration time of each iterate, shape (N+1,)
        taus: Pseudo-time iterates (SRFMP only), shape (N+1, *tau.shape)
    """
    points: np.ndarray
    times: np.ndarray
    taus: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.points[-1]

    def __len__(self) -> int:
        return len(self.points)


def _check_finite(values, step: int) -> None:
    if not np.all(np.isfinite(values)):
        raise IntegrationDivergedError(f"non-finite field value at integration step {step}")


def refine_step(config: IntegratorConfig, params: FlowParams) -> float:
    return config.refine_step if config.refine_step is not None else 1.0 / (4.0 * params.lambda_x)


def srfmp_schedule(config: IntegratorConfig, params: FlowParams) -> np.ndarray:
    """Step sizes used by integrate_srfmp."""
    if not config.srfmp_first_step:
        return np.full(config.nfe, config.t_end / config.nfe)
    return np.r_[1.0 / params.lambda_x, np.full(config.nfe - 1, refine_step(config, params))]


def horizon_config(config: IntegratorConfig, params: FlowParams, t_end: float,
                   mode: str) -> IntegratorConfig:
    """
    Integrator settings that run to time t_end.

    Uniform schedules only change t_end. The SRFMP first-step schedule has no
    free horizon, so the number of refinement steps is chosen to reach t_end
    (at least one step).
    """
    if mode != "srfmp" or not config.srfmp_first_step:
        return replace(config, t_end=t_end)
    extra = (t_end - 1.0 / params.lambda_x) / refine_step(config, params)
    return replace(config, t_end=t_end, nfe=max(1, 1 + int(round(extra))))


# ============================================================================
# Integrators
# ============================================================================

def integrate_projected_euler(manifold: Manifold, field: Callable, x0,
                              config: IntegratorConfig) -> Trajectory:
    """
    N projected Euler steps of size T/N for a time-dependent field.

    Args:
        manifold: Manifold of one point (batch dimensions allowed)
        field: field(x, t) returning (ambient) vectors at x
        x0: Starting point(s)
        config: nfe and t_end are used

    Returns:
        Trajectory with N+1 iterates

    Raises:
        IntegrationDivergedError: If the field returns non-finite values
    """
    x = manifold.check_point(x0)
    dt = config.t_end / config.nfe
    points, times = [x], [0.0]
    for k in range(config.nfe):
        t = k * dt
        v = np.asarray(field(x, t), dtype=np.float64)
        _check_finite(v, k)
        x = manifold.exp(x, dt * manifold.project_tangent(x, v))
        _check_finite(x, k)
        x = manifold.project_point(x)
        points.append(x)
        times.append((k + 1) * dt)
    return Trajectory(np.stack(points), np.asarray(times))


def integrate_srfmp(manifold: Manifold, field: Callable[[AugmentedState], AugmentedState],
                    xi0: AugmentedState, params: FlowParams,
                    config: IntegratorConfig) -> Trajectory:
    """
    Integrate an autonomous augmented field with the SRFMP step schedule.

    With the exact stable field the first step of size 1/lambda_x lands on
    the target (x_t + lambda_x (x1 - x_t) / lambda_x = x1 in Euclidean space,
    a full Log step on a manifold); later steps only refine.
    """
    x = manifold.check_point(xi0.spatial)
    tau = np.asarray(xi0.tau, dtype=np.float64)
    points, taus, times = [x], [tau], [0.0]
    elapsed = 0.0
    for k, dt in enumerate(srfmp_schedule(config, params)):
        u = field(AugmentedState(x, tau))
        _check_finite(u.spatial, k)
        _check_finite(u.tau, k)
        x = manifold.exp(x, dt * manifold.project_tangent(x, u.spatial))
        tau = tau + dt * np.asarray(u.tau, dtype=np.float64)
        _check_finite(x, k)
        x = manifold.project_point(x)
        elapsed += dt
        points.append(x)
        taus.append(tau)
        times.append(elapsed)
    return Trajectory(np.stack(points), np.asarray(times), np.stack(taus))


# ============================================================================
# Policy
# ============================================================================

@dataclass
class Policy:
    """
    A trained vector field wrapped for action generation.

    Observations passed in are raw (unnormalized); returned actions are in
    data coordinates.
    """
    model: VectorFieldModel
    manifold: Manifold
    flow: FlowParams
    normalizer: Normalizer
    prior: PriorSpec
    horizons: PolicyConfig = field(default_factory=PolicyConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    def __post_init__(self):
        layout = self.model.layout
        if layout.horizon != self.horizons.T_p:
            raise ConfigError(
                "policy.T_p",
                f"model predicts {layout.horizon}-step chunks, policy uses {self.horizons.T_p}",
            )
        expected = observation_dim(len(self.normalizer.obs_mean), self.horizons.T_o)
        if layout.obs_dim != expected:
            raise ConfigError(
                "policy.T_o",
                f"model takes {layout.obs_dim} observation inputs, T_o={self.horizons.T_o} "
                f"with {len(self.normalizer.obs_mean)}-wide steps gives {expected}",
            )

    @property
    def mode(self) -> str:
        return self.model.layout.mode

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, horizons: PolicyConfig,
                        integrator: IntegratorConfig, prior: PriorSpec | None = None) -> "Policy":
        """Build a policy, using EMA weights when requested and available."""
        model = checkpoint.model
        if integrator.use_ema:
            ema = checkpoint.ema_model
            if ema is None:
                logger.warning("Checkpoint has no EMA weights; using raw weights")
            else:
                model = ema
        normalizer = (
            Normalizer.from_arrays(checkpoint.groups["normalizer"])
            if "normalizer" in checkpoint.groups
            else Normalizer.identity(
                checkpoint.manifold.ambient_dim,
                (model.layout.obs_dim - (1 if horizons.T_o > 2 else 0)) // 2,
            )
        )
        prior = prior or default_prior(checkpoint.manifold)
        return cls(model, checkpoint.manifold, checkpoint.flow, normalizer, prior, horizons,
                   integrator)

    # -- fields ----------------------------------------------------------------

    def _spatial(self, x: np.ndarray, time_input, obs: np.ndarray):
        raw = forward(self.model, x, time_input, obs)
        spatial, tau = split_output(self.model, raw)
        return self.manifold.project_tangent(x, spatial), tau

    def sample_chunks(self, observations: np.ndarray, rng: np.random.Generator,
                      x0: np.ndarray | None = None) -> tuple[np.ndarray, Trajectory]:
        """
        Generate one action chunk per observation vector.

        Args:
            observations: Normalized observation vectors (B, obs_dim)
            rng: Source of the prior draws
            x0: Optional starting chunks (B, T_p, D) in normalized coordinates

        Returns:
            (chunks in data coordinates (B, T_p, D), integration trajectory in
            normalized coordinates)
        """
        observations = np.asarray(observations, dtype=np.float64).reshape(
            -1, self.model.layout.obs_dim
        ) if self.model.layout.obs_dim else np.zeros((1 if x0 is None else len(x0), 0))
        batch = len(observations)
        if x0 is None:
            x0 = sample_chunk_prior(self.prior, self.horizons.T_p, n=batch, rng=rng)

        if self.mode == "srfmp":
            def stable_field(xi: AugmentedState) -> AugmentedState:
                v_x, v_tau = self._spatial(xi.spatial, xi.tau, observations)
                return AugmentedState(v_x, v_tau)

            xi0 = AugmentedState(x0, np.full(batch, self.flow.tau0))
            trajectory = integrate_srfmp(self.manifold, stable_field, xi0, self.flow,
                                         self.integrator)
        else:
            def time_field(x: np.ndarray, t: float) -> np.ndarray:
                return self._spatial(x, np.full(batch, t), observations)[0]

            trajectory = integrate_projected_euler(self.manifold, time_field, x0, self.integrator)

        chunks = self.normalizer.denormalize_actions(trajectory.final)
        return chunks, trajectory

    def observation(self, history) -> np.ndarray:
        """
        Normalized observation vector from the most recent observations.

        Uses o^(s-1) = history[-1] and o^c = history[-2], with gap 2 when
        T_o > 2.

        Raises:
            ProtocolError: If fewer than T_o observations are available
        """
        if len(history) < self.horizons.T_o:
            raise ProtocolError(
                f"policy needs {self.horizons.T_o} observations, history has {len(history)}"
            )
        latest = self.normalizer.normalize_obs(np.asarray(history[-1], dtype=np.float64))
        earlier = self.normalizer.normalize_obs(np.asarray(history[-2], dtype=np.float64))
        return observation_vector(latest, earlier, 2, self.horizons.T_o)

    def act(self, history, rng: np.random.Generator,
            trace: list[Trajectory] | None = None) -> np.ndarray:
        """
        Next T_a actions for an observation history (policy_act).

        Args:
            history: Sequence of raw per-step observations, oldest first
            rng: Prior draws come from this generator
            trace: Optional list collecting the integration trajectory

        Returns:
            Array (T_a, D) of actions on the manifold
        """
        chunks, trajectory = self.sample_chunks(self.observation(history)[None], rng)
        if trace is not None:
            trace.append(trajectory)
        return chunks[0, : self.horizons.T_a]


def policy_act(policy: Policy, history, rng: np.random.Generator) -> np.ndarray:
    return policy.act(history, rng)


# ============================================================================
# Metrics
# ============================================================================

def jerkiness(actions, dt: float, manifold: Manifold | None = None) -> float:
    """
    Mean squared third-order finite difference of Euclidean coordinates / dt^6.

    Args:
        actions: Sequence of actions (L, D), L >= 4
        dt: Time between actions
        manifold: Restricts the metric to Euclidean factors; None treats every
            coordinate as Euclidean

    Raises:
        ValueError: If fewer than 4 actions are given

    Example:
        >>> jerkiness(np.arange(6.0)[:, None] ** 3, 1.0)
        36.0
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 1:
        actions = actions[:, None]
    if len(actions) < 4:
        raise ValueError(f"jerkiness needs at least 4 actions, got {len(actions)}")
    mask = np.ones(actions.shape[1], bool) if manifold is None else euclidean_mask(manifold)
    if not mask.any():
        return 0.0
    third = np.diff(actions[:, mask], n=3, axis=0)
    return float(np.mean(np.sum(third ** 2, axis=1)) / dt ** 6)


# ============================================================================
# Rollouts
# ============================================================================

class Environment(Protocol):
    manifold: Manifold

    def reset(self) -> np.ndarray: ...

    def step(self, action: np.ndarray) -> tuple[np.ndarray, bool, float]: ...

    @property
    def reached(self) -> bool: ...

    @property
    def positions(self) -> list[np.ndarray]: ...


@dataclass
class RolloutReport:
    """Per-trial records, trajectory rows and the aggregated summary."""
    records: list[dict[str, Any]]
    trajectory_rows: list[list[float]]
    summary: dict[str, Any]


def run_rollouts(policy: Policy, make_env: Callable[[int], Environment], n_trials: int,
                 seed: int, max_queries: int | None = None,
                 success_score: float = 1.0) -> RolloutReport:
    """
    Closed-loop evaluation with seeds seed, seed+1, ..., seed+n_trials-1.

    Each trial resets its environment, pads the history with the initial
    observation up to T_o entries and queries the policy until the episode
    ends. A trial succeeds when the agent reaches the goal or its score is
    at least success_score. Trials are independent and assembled in seed order.
    """
    records: list[dict[str, Any]] = []
    rows: list[list[float]] = []
    for trial in range(n_trials):
        trial_seed = seed + trial
        env = make_env(trial_seed)
        rng = make_rng(trial_seed)
        history = [env.reset()] * policy.horizons.T_o
        trace: list[Trajectory] = []
        done, score, queries = False, 0.0, 0
        started = time.perf_counter()
        while not done and (max_queries is None or queries < max_queries):
            actions = policy.act(history, rng, trace)
            queries += 1
            for action in actions:
                obs, done, score = env.step(action)
                history.append(obs)
                if done:
                    break
        wall_ms = 1000.0 * (time.perf_counter() - started)

        positions = np.asarray(env.positions)
        jerk = jerkiness(positions, 1.0, env.manifold) if len(positions) >= 4 else 0.0
        for query, trajectory in enumerate(trace):
            for step, (t, point) in enumerate(zip(trajectory.times, trajectory.points)):
                rows.append([trial, query, step, float(t), *np.ravel(point[0])])
        records.append({
            "trial": trial,
            "seed": trial_seed,
            "success": bool(env.reached or score >= success_score),
            "score": float(score),
            "jerkiness": jerk,
            "nfe": policy.integrator.nfe,
            "queries": queries,
            "steps": len(positions) - 1,
            "wall_time_ms": wall_ms,
        })
        logger.debug("trial %d: reached=%s score=%.3f", trial, env.reached, score)

    summary = {
        "success": float(np.mean([r["success"] for r in records])),
        "score": float(np.mean([r["score"] for r in records])),
        "jerkiness": float(np.mean([r["jerkiness"] for r in records])),
        "nfe": policy.integrator.nfe,
        "wall_time_ms": float(np.sum([r["wall_time_ms"] for r in records])),
        "mode": policy.mode,
        "t_end": policy.integrator.t_end,
        "n_trials": n_trials,
    }
    logger.info(
        "%d rollouts (%s, nfe=%d): success %.2f, score %.3f",
        n_trials, policy.mode, policy.integrator.nfe, summary["success"], summary["score"],
    )
    return RolloutReport(records, rows, summary)


def write_trajectory_csv(path: Path | str, rows: list[list[float]]) -> None:
    """Write `rollout_id, query, ode_step, t, coords...` rows."""
    width = max((len(r) for r in rows), default=4) - 4
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["rollout_id", "query", "ode_step", "t", *[f"c{i}" for i in range(width)]])
        for row in rows:
            ids = [int(v) for v in row[:3]]
            writer.writerow([*ids, *(repr(float(v)) for v in row[3:])])


def write_summary_json(path: Path | str, summary: dict[str, Any],
                       records: list[dict[str, Any]] | None = None,
                       metadata: dict[str, Any] | None = None) -> None:
    """Write a summary JSON; records and metadata are optional sections."""
    payload: dict[str, Any] = dict(summary)
    if records is not None:
        payload["trials"] = records
    if metadata is not None:
        payload["metadata"] = metadata
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
