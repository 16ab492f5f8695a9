"""
RFMP and SRFMP training.

Training pairs come from sliding windows over demonstrations: an action
chunk a1 = [a^s, ..., a^(s+T_p-1)] and the observation vector
o = [o^(s-1), o^c, s-c] with c drawn uniformly from [s-T_o, s-2] (the gap
s-c is dropped when T_o = 2). Each batch element draws its own prior chunk
a0 and flow time t ~ U[0, 1], and the network regresses the target field:

- rfmp: geodesic (rcfm) or Gaussian (cfm) conditional field at a_t, with
  the network conditioned on t
- srfmp: stable Riemannian field at xi_t = [a_t, tau_t], with the network
  conditioned on tau_t and predicting v_tau as well

Optimization is AdamW with decoupled weight decay and an EMA copy of the
weights; the EMA snapshot with the best validation loss is returned.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, PolicyConfig, TrainConfig
from .distributions import PriorSpec, default_prior, make_rng, sample_chunk_prior
from .errors import ConfigError, ManifoldError, TrainingDivergedError
from .flows import AugmentedState, FlowParams, cfm_path, is_flat, rcfm_geodesic_path, srfm_path
from .manifolds import Manifold, euclidean_mask
from .nnet import ModelLayout, VectorFieldModel, backward, init_model, make_inputs

logger = logging.getLogger(__name__)


STD_FLOOR = 1e-6
VALIDATION_SEED_OFFSET = 1_000_003


# ============================================================================
# Data Structures
# ============================================================================

@dataclass
class Demonstration:
    """One demonstration: per-step observations (L, d_o) and actions (L, D)."""
    observations: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("observations and actions must be 2-D arrays")
        if len(self.observations) != len(self.actions):
            raise ValueError(
                f"{len(self.observations)} observations but {len(self.actions)} actions"
            )

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class Dataset:
    """Demonstrations on a common action manifold."""
    manifold: Manifold
    demos: list[Demonstration]
    metadata: dict = field(default_factory=dict)

    @property
    def obs_dim(self) -> int:
        return self.demos[0].observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self.manifold.ambient_dim

    def validate(self, T_p: int, T_o: int) -> "Dataset":
        """
        Check shapes, on-manifold actions and minimum demonstration length.

        Raises:
            ManifoldError: If actions do not match or lie off the manifold
            ConfigError: If a demonstration is shorter than T_o + T_p
        """
        if not self.demos:
            raise ConfigError("paths.dataset", "dataset has no demonstrations")
        for i, demo in enumerate(self.demos):
            if demo.actions.shape[1] != self.manifold.ambient_dim:
                raise ManifoldError(
                    f"demo {i}: action width {demo.actions.shape[1]} does not match "
                    f"{self.manifold} (ambient {self.manifold.ambient_dim})"
                )
            if demo.observations.shape[1] != self.obs_dim:
                raise ConfigError("paths.dataset", f"demo {i}: inconsistent observation width")
            self.manifold.check_point(demo.actions)
            if len(demo) < T_o + T_p:
                raise ConfigError(
                    "task.length", f"demo {i} has {len(demo)} steps, need >= {T_o + T_p}"
                )
        return self


def observation_dim(step_obs_dim: int, T_o: int) -> int:
    """Length of the observation vector for per-step observations of width step_obs_dim."""
    return 2 * step_obs_dim + (1 if T_o > 2 else 0)


def observation_vector(o_prev: np.ndarray, o_c: np.ndarray, gap: int, T_o: int) -> np.ndarray:
    """[o^(s-1), o^c, s-c], without the gap when T_o = 2."""
    parts = [np.asarray(o_prev, dtype=np.float64), np.asarray(o_c, dtype=np.float64)]
    if T_o > 2:
        parts.append(np.array([float(gap)]))
    return np.concatenate(parts)


# ============================================================================
# Normalization
# ============================================================================

@dataclass
class Normalizer:
    """
    Per-dimension standardization of Euclidean action coordinates and of
    per-step observations. Sphere and SPD coordinates pass through exactly
    (mean 0, std 1).
    """
    action_mean: np.ndarray
    action_std: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray

    @classmethod
    def identity(cls, action_dim: int, obs_dim: int) -> "Normalizer":
        return cls(np.zeros(action_dim), np.ones(action_dim), np.zeros(obs_dim), np.ones(obs_dim))

    @classmethod
    def fit(cls, dataset: Dataset) -> "Normalizer":
        actions = np.concatenate([d.actions for d in dataset.demos])
        observations = np.concatenate([d.observations for d in dataset.demos])
        mask = euclidean_mask(dataset.manifold)
        action_mean = np.where(mask, actions.mean(axis=0), 0.0)
        action_std = np.where(mask, _safe_std(actions), 1.0)
        return cls(action_mean, action_std, observations.mean(axis=0), _safe_std(observations))

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a) - self.action_mean) / self.action_std

    def denormalize_actions(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a) * self.action_std + self.action_mean

    def normalize_obs(self, o: np.ndarray) -> np.ndarray:
        return (np.asarray(o) - self.obs_mean) / self.obs_std

    def apply(self, dataset: Dataset) -> Dataset:
        """A copy of the dataset in normalized coordinates."""
        demos = [
            Demonstration(self.normalize_obs(d.observations), self.normalize_actions(d.actions))
            for d in dataset.demos
        ]
        return Dataset(dataset.manifold, demos, dataset.metadata)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "action_mean": self.action_mean,
            "action_std": self.action_std,
            "obs_mean": self.obs_mean,
            "obs_std": self.obs_std,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Normalizer":
        return cls(arrays["action_mean"], arrays["action_std"], arrays["obs_mean"],
                   arrays["obs_std"])


def _safe_std(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    return np.where(std < STD_FLOOR, 1.0, std)


# ============================================================================
# Training Pairs and Batches
# ============================================================================

def valid_starts(length: int, T_p: int, T_o: int) -> range:
    """Chunk start indices s with s >= T_o and s + T_p <= length."""
    return range(T_o, length - T_p + 1)


def make_training_pair(demo: Demonstration, s: int, T_p: int, T_o: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Build (action chunk, observation vector) for chunk start s.

    Args:
        demo: Source demonstration
        s: Chunk start index
        T_p: Prediction horizon
        T_o: Observation horizon (>= 2)
        rng: Draws the conditioning index c in [s-T_o, s-2]

    Returns:
        Chunk of shape (T_p, D) and observation vector

    Raises:
        IndexError: If the window does not fit in the demonstration
        ValueError: If T_o < 2
    """
    if T_o < 2:
        raise ValueError(f"observation horizon must be >= 2, got {T_o}")
    if s - T_o < 0 or s + T_p > len(demo):
        raise IndexError(f"window s={s}, T_p={T_p}, T_o={T_o} outside demo of length {len(demo)}")
    c = s - 2 if T_o == 2 else int(rng.integers(s - T_o, s - 1))
    chunk = demo.actions[s:s + T_p]
    obs = observation_vector(demo.observations[s - 1], demo.observations[c], s - c, T_o)
    return chunk, obs


@dataclass
class TrainingBatch:
    """Targets a1 and prior draws a0 (B, T_p, D), observations (B, obs_dim), times (B,)."""
    target: np.ndarray
    source: np.ndarray
    obs: np.ndarray
    t: np.ndarray


def assemble_batch(dataset: Dataset, windows: list[tuple[int, int]], policy: PolicyConfig,
                   prior: PriorSpec, rng: np.random.Generator) -> TrainingBatch:
    """Draw a training batch for the given (demo index, start) windows."""
    chunks, observations = [], []
    for demo_idx, s in windows:
        chunk, obs = make_training_pair(dataset.demos[demo_idx], s, policy.T_p, policy.T_o, rng)
        chunks.append(chunk)
        observations.append(obs)
    source = sample_chunk_prior(prior, policy.T_p, n=len(windows), rng=rng)
    t = rng.uniform(0.0, 1.0, size=len(windows))
    return TrainingBatch(np.stack(chunks), source, np.stack(observations), t)


# ============================================================================
# Losses
# ============================================================================

def flow_targets(manifold: Manifold, batch: TrainingBatch, mode: str, params: FlowParams,
                 flow: str = "rcfm"):
    """
    Interpolants and target fields for a batch.

    Returns:
        (x_t, network time input, spatial targets, tau targets or None)
    """
    t = batch.t[:, None]
    if mode == "srfmp":
        xi0 = AugmentedState(batch.source, np.full((len(batch.t), 1), params.tau0))
        xi1 = AugmentedState(batch.target, np.full((len(batch.t), 1), params.tau1))
        xi_t, u_t = srfm_path(manifold, t, xi0, xi1, params)
        tau_t = np.asarray(xi_t.tau).reshape(-1)
        return xi_t.spatial, tau_t, u_t.spatial, np.asarray(u_t.tau).reshape(-1)
    if flow == "cfm":
        x_t, u_t = cfm_path(manifold, t, batch.source, batch.target, params)
    else:
        x_t, u_t = rcfm_geodesic_path(manifold, t, batch.source, batch.target)
    return x_t, batch.t, u_t, None


def loss_and_grads(model: VectorFieldModel, manifold: Manifold, batch: TrainingBatch,
                   params: FlowParams, flow: str = "rcfm"):
    """Loss of the model's mode on a batch, with parameter gradients."""
    x_t, time_input, u_x, u_tau = flow_targets(manifold, batch, model.layout.mode, params, flow)
    inputs = make_inputs(model, x_t, time_input, batch.obs)
    return backward(model, manifold, inputs, x_t, u_x, u_tau)


def rfmp_loss(model: VectorFieldModel, manifold: Manifold, batch: TrainingBatch,
              flow: str = "rcfm", params: FlowParams | None = None) -> float:
    """Mean squared Riemannian norm of v(a_t, t | o) - u_t(a_t | a1)."""
    return loss_and_grads(model, manifold, batch, params or FlowParams(), flow)[0]


def srfmp_loss(model: VectorFieldModel, manifold: Manifold, batch: TrainingBatch,
               params: FlowParams) -> float:
    """rfmp_loss on the augmented state, plus the squared pseudo-time residual."""
    return loss_and_grads(model, manifold, batch, params)[0]


# ============================================================================
# Optimizer and EMA
# ============================================================================

@dataclass
class AdamState:
    """AdamW first/second moments and step counter."""
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, model: VectorFieldModel) -> "AdamState":
        return cls(0, model.zeros_like(), model.zeros_like())


def adamw_step(model: VectorFieldModel, grads: dict[str, np.ndarray], state: AdamState,
               config: TrainConfig) -> tuple[VectorFieldModel, AdamState]:
    """
    One AdamW update, in place.

    Weight decay w <- w - lr * wd * w is applied separately from the
    bias-corrected adaptive step.
    """
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, weight in model.params.items():
        grad = grads[name]
        if weight.shape != grad.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {weight.shape}")
        weight -= config.learning_rate * config.weight_decay * weight
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        weight -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
    return model, state


def ema_decay_at(step: int, decay: float, warmup: bool = True) -> float:
    """Effective EMA decay at optimizer step `step`: min(decay, (1+step)/(10+step))."""
    if not warmup:
        return decay
    return min(decay, (1.0 + step) / (10.0 + step))


def ema_update(ema_model: VectorFieldModel, model: VectorFieldModel,
               decay: float) -> VectorFieldModel:
    """ema <- decay * ema + (1 - decay) * model, in place."""
    for name, weight in ema_model.params.items():
        weight *= decay
        weight += (1.0 - decay) * model.params[name]
    return ema_model


# ============================================================================
# Training Loop
# ============================================================================

@dataclass
class TrainResult:
    """
    Output of train().

    Attributes:
        model: Final online weights
        ema_model: EMA snapshot with the best validation loss (final EMA
            when there is no validation split)
        history: Rows (epoch, mean_loss, val_loss)
        normalizer: Statistics used to normalize the training data
        adam: Final optimizer state
        best_epoch: Epoch of the returned EMA snapshot (0 = initial weights)
    """
    model: VectorFieldModel
    ema_model: VectorFieldModel
    history: list[tuple[int, float, float]]
    normalizer: Normalizer
    adam: AdamState
    best_epoch: int = 0


def build_layout(dataset: Dataset, policy: PolicyConfig, model_config: ModelConfig,
                 mode: str) -> ModelLayout:
    return ModelLayout(
        horizon=policy.T_p,
        action_dim=dataset.action_dim,
        obs_dim=observation_dim(dataset.obs_dim, policy.T_o),
        embedding_dim=model_config.embedding_dim,
        hidden=tuple(model_config.hidden),
        mode=mode,
        activation=model_config.activation,
        separate_tau_mlp=model_config.separate_tau_mlp,
        tau_hidden=tuple(model_config.tau_hidden),
    )


def split_demos(dataset: Dataset, val_fraction: float) -> tuple[Dataset, Dataset | None]:
    """Hold out the last val_fraction of demonstrations (at least one stays for training)."""
    n_val = int(round(val_fraction * len(dataset.demos)))
    n_val = min(n_val, len(dataset.demos) - 1)
    if n_val <= 0:
        return dataset, None
    return (
        Dataset(dataset.manifold, dataset.demos[:-n_val], dataset.metadata),
        Dataset(dataset.manifold, dataset.demos[-n_val:], dataset.metadata),
    )


def training_windows(dataset: Dataset, policy: PolicyConfig) -> list[tuple[int, int]]:
    """(demo index, window start) for every valid training window of a dataset."""
    return [
        (i, s)
        for i, demo in enumerate(dataset.demos)
        for s in valid_starts(len(demo), policy.T_p, policy.T_o)
    ]


def evaluate_loss(model: VectorFieldModel, dataset: Dataset, policy: PolicyConfig,
                  prior: PriorSpec, params: FlowParams, seed: int,
                  flow: str = "rcfm", batch_size: int = 256) -> float:
    """Mean loss over every window of a dataset, with a fixed-seed draw of a0, t and c."""
    rng = make_rng(seed)
    windows = training_windows(dataset, policy)
    total = 0.0
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        batch = assemble_batch(dataset, chunk, policy, prior, rng)
        total += loss_and_grads(model, dataset.manifold, batch, params, flow)[0] * len(chunk)
    return total / len(windows)


def train(dataset: Dataset, config: TrainConfig, flow_params: FlowParams,
          policy: PolicyConfig | None = None, model_config: ModelConfig | None = None,
          prior: PriorSpec | None = None) -> TrainResult:
    """
    Train a vector-field model on demonstrations.

    Args:
        dataset: Demonstrations
        config: Optimizer/loop settings; config.mode selects rfmp or srfmp
        flow_params: lambda_x, lambda_tau, tau0, tau1, sigma
        policy: Horizons (defaults: T_p=16, T_a=8, T_o=2)
        model_config: Architecture (defaults: 3 x 256 SiLU)
        prior: Action prior in normalized coordinates (default per-factor prior)

    Returns:
        TrainResult; deterministic given config.seed

    Raises:
        ConfigError: If the dataset does not fit the horizons or flow
        TrainingDivergedError: If a batch loss becomes non-finite
    """
    policy = policy or PolicyConfig()
    model_config = model_config or ModelConfig()
    manifold = dataset.manifold
    prior = prior or default_prior(manifold, config.seed)
    if prior.manifold != manifold:
        raise ConfigError("prior", f"prior is for {prior.manifold}, dataset is on {manifold}")
    if config.flow == "cfm" and config.mode == "rfmp" and not is_flat(manifold):
        raise ConfigError("train.flow", "cfm needs a Euclidean manifold")
    dataset.validate(policy.T_p, policy.T_o)

    rng = make_rng(config.seed)
    train_set, val_set = split_demos(dataset, config.val_fraction)
    normalizer = (
        Normalizer.fit(train_set) if config.normalize
        else Normalizer.identity(dataset.action_dim, dataset.obs_dim)
    )
    train_set = normalizer.apply(train_set)
    if val_set is not None:
        val_set = normalizer.apply(val_set)
    layout = build_layout(dataset, policy, model_config, config.mode)
    model = init_model(layout, rng)
    ema = model.copy()
    best = ema.copy()
    best_val, best_epoch = np.inf, 0
    adam = AdamState.zeros(model)
    history: list[tuple[int, float, float]] = []

    windows = training_windows(train_set, policy)
    logger.info(
        "Training %s on %s: %d windows from %d demos (%d held out), %d epochs",
        config.mode, manifold, len(windows), len(train_set.demos),
        0 if val_set is None else len(val_set.demos), config.epochs,
    )
    report_every = max(1, config.epochs // 10)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(windows))
        losses, sizes = [], []
        for start in range(0, len(order), config.batch_size):
            picked = [windows[k] for k in order[start:start + config.batch_size]]
            batch = assemble_batch(train_set, picked, policy, prior, rng)
            loss, grads = loss_and_grads(model, manifold, batch, flow_params, config.flow)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {adam.step}")
            adamw_step(model, grads, adam, config)
            ema_update(ema, model, ema_decay_at(adam.step, config.ema_decay, config.ema_warmup))
            losses.append(loss)
            sizes.append(len(picked))
        mean_loss = float(np.average(losses, weights=sizes))

        if val_set is not None:
            val_loss = evaluate_loss(
                ema, val_set, policy, prior, flow_params,
                config.seed + VALIDATION_SEED_OFFSET, config.flow, config.batch_size,
            )
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch
                best = ema.copy()
        else:
            val_loss = float("nan")
            best, best_epoch = ema, epoch
        history.append((epoch, mean_loss, val_loss))

        if epoch % report_every == 0 or epoch == config.epochs:
            logger.info("epoch %4d | loss %.6f | val %.6f", epoch, mean_loss, val_loss)
        else:
            logger.debug("epoch %4d | loss %.6f | val %.6f", epoch, mean_loss, val_loss)

    if config.epochs:
        logger.info("Best validation EMA at epoch %d", best_epoch)
    return TrainResult(model, best.copy(), history, normalizer, adam, best_epoch)


def write_history_csv(path: Path | str, history: list[tuple[int, float, float]]) -> None:
    """Write loss history as `epoch,mean_loss,val_loss` rows."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "val_loss"])
        for epoch, loss, val in history:
            writer.writerow([epoch, repr(float(loss)), repr(float(val))])
