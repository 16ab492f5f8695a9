"""
Vector-Field Regressor

A multilayer perceptron v(x_t, t | o; theta) over flattened action chunks,
with a sinusoidal embedding of the flow time t (RFMP) or pseudo-time tau
(SRFMP) and the observation vector concatenated at the input:

    input = [chunk coords (T_p * D), embed(t or tau), observation]

In SRFMP mode the network also predicts the scalar pseudo-time velocity
v_tau, either as one extra output of the shared trunk or from a separate
small MLP (``separate_tau_mlp``).

Gradients are exact reverse mode, written out by hand for the dense layers
and the SiLU activation. The loss is the squared Riemannian norm of the
residual between the projected network output and the target field.

Checkpoints are little-endian binary files:
    magic "RFMPCKPT" | u32 version | u32 header length | JSON header |
    u32 group count | groups of named float64 arrays
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, FileFormatError
from .flows import FlowParams
from .manifolds import Manifold, parse_manifold

logger = logging.getLogger(__name__)


# ============================================================================
# Constants
# ============================================================================

MODES = ("rfmp", "srfmp")
ACTIVATIONS = ("silu", "identity")
EMBEDDING_BASE = 10000.0

CHECKPOINT_MAGIC = b"RFMPCKPT"
CHECKPOINT_VERSION = 1


# ============================================================================
# Data Structures
# ============================================================================

@dataclass(frozen=True)
class ModelLayout:
    """
    Input/output layout and architecture of a vector-field model.

    Attributes:
        horizon: Prediction horizon T_p (actions per chunk)
        action_dim: Ambient dimension of one action
        obs_dim: Length of the observation vector
        embedding_dim: Width of the sinusoidal time embedding (even)
        hidden: Hidden layer widths of the trunk
        mode: "rfmp" or "srfmp"
        activation: "silu" or "identity"
        separate_tau_mlp: Predict v_tau with its own MLP (srfmp only)
        tau_hidden: Hidden widths of the separate tau MLP
    """
    horizon: int
    action_dim: int
    obs_dim: int
    embedding_dim: int = 32
    hidden: tuple[int, ...] = (256, 256, 256)
    mode: str = "rfmp"
    activation: str = "silu"
    separate_tau_mlp: bool = False
    tau_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "tau_hidden", tuple(int(h) for h in self.tau_hidden))
        if self.horizon < 1:
            raise ConfigError("policy.T_p", f"must be >= 1, got {self.horizon}")
        if self.action_dim < 1:
            raise ConfigError("model.action_dim", f"must be >= 1, got {self.action_dim}")
        if self.obs_dim < 0:
            raise ConfigError("model.obs_dim", f"must be >= 0, got {self.obs_dim}")
        if self.embedding_dim < 2 or self.embedding_dim % 2:
            raise ConfigError(
                "model.embedding_dim", f"must be even and >= 2, got {self.embedding_dim}"
            )
        if any(h < 1 for h in self.hidden + self.tau_hidden):
            raise ConfigError("model.hidden", "layer widths must be >= 1")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError("model.activation", f"must be one of {ACTIVATIONS}")

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.action_dim

    @property
    def input_dim(self) -> int:
        return self.chunk_dim + self.embedding_dim + self.obs_dim

    @property
    def has_tau(self) -> bool:
        return self.mode == "srfmp"

    @property
    def trunk_output_dim(self) -> int:
        return self.chunk_dim + int(self.has_tau and not self.separate_tau_mlp)

    @property
    def output_dim(self) -> int:
        return self.chunk_dim + int(self.has_tau)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["tau_hidden"] = list(self.tau_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelLayout":
        return cls(**data)


@dataclass
class VectorFieldModel:
    """MLP weights keyed as ``<net>.<layer>.weight`` / ``<net>.<layer>.bias``."""
    layout: ModelLayout
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def nets(self) -> list[str]:
        if self.layout.has_tau and self.layout.separate_tau_mlp:
            return ["trunk", "tau"]
        return ["trunk"]

    def depth(self, net: str) -> int:
        hidden = self.layout.hidden if net == "trunk" else self.layout.tau_hidden
        return len(hidden) + 1

    def layers(self, net: str) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (self.params[f"{net}.{i}.weight"], self.params[f"{net}.{i}.bias"])
            for i in range(self.depth(net))
        ]

    def copy(self) -> "VectorFieldModel":
        return VectorFieldModel(self.layout, {k: v.copy() for k, v in self.params.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def _layer_sizes(layout: ModelLayout, net: str) -> list[int]:
    if net == "trunk":
        return [layout.input_dim, *layout.hidden, layout.trunk_output_dim]
    return [layout.input_dim, *layout.tau_hidden, 1]


def init_model(layout: ModelLayout, rng: np.random.Generator) -> VectorFieldModel:
    """
    Initialize weights uniformly in +-1/sqrt(fan_in); the last layer of
    every net starts at zero, so a fresh model outputs the zero field.
    """
    model = VectorFieldModel(layout)
    nets = ["trunk", "tau"] if layout.has_tau and layout.separate_tau_mlp else ["trunk"]
    for net in nets:
        sizes = _layer_sizes(layout, net)
        last = len(sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == last:
                weight = np.zeros((fan_out, fan_in))
                bias = np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
                bias = rng.uniform(-bound, bound, size=fan_out)
            model.params[f"{net}.{i}.weight"] = weight
            model.params[f"{net}.{i}.bias"] = bias
    logger.debug("Initialized %s model with %d parameters", layout.mode, parameter_count(model))
    return model


def parameter_count(model: VectorFieldModel) -> int:
    return int(sum(p.size for p in model.params.values()))


# ============================================================================
# Embedding and Activations
# ============================================================================

def embed_time(t, embedding_dim: int) -> np.ndarray:
    """
    Sinusoidal embedding [sin(t w_0), cos(t w_0), sin(t w_1), ...].

    Frequencies follow w_k = 10000^(-2k / embedding_dim), so w_0 = 1.

    Args:
        t: Scalar or array of times
        embedding_dim: Even embedding width >= 2

    Returns:
        Array of shape (*t.shape, embedding_dim)

    Raises:
        ConfigError: If embedding_dim is odd or < 2

    Example:
        >>> embed_time(0.0, 4)
        array([0., 1., 0., 1.])
    """
    if embedding_dim < 2 or embedding_dim % 2:
        raise ConfigError("model.embedding_dim", f"must be even and >= 2, got {embedding_dim}")
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(embedding_dim // 2)
    omega = EMBEDDING_BASE ** (-2.0 * k / embedding_dim)
    angles = t[..., None] * omega
    out = np.empty((*t.shape, embedding_dim))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return z * _sigmoid(z) if kind == "silu" else z


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind != "silu":
        return np.ones_like(z)
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


# ============================================================================
# Forward / Backward
# ============================================================================

def make_inputs(model: VectorFieldModel, chunk, t, obs) -> np.ndarray:
    """
    Assemble the network input batch.

    Args:
        model: Target model (fixes the layout)
        chunk: Action chunks (B, T_p, D) or a single chunk (T_p, D)
        t: Flow time or pseudo-time, scalar or (B,)
        obs: Observation vectors (B, obs_dim) or (obs_dim,)

    Raises:
        ConfigError: If any shape disagrees with the model layout
    """
    layout = model.layout
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim == 2:
        chunk = chunk[None]
    if chunk.shape[1:] != (layout.horizon, layout.action_dim):
        raise ConfigError(
            "model.layout",
            f"chunk shape {chunk.shape[1:]} != ({layout.horizon}, {layout.action_dim})",
        )
    batch = chunk.shape[0]
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, layout.obs_dim) if layout.obs_dim else \
        np.zeros((batch, 0))
    if obs.shape[0] != batch:
        raise ConfigError("model.layout", f"{obs.shape[0]} observations for {batch} chunks")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
    return np.concatenate(
        [chunk.reshape(batch, -1), embed_time(t, layout.embedding_dim), obs], axis=1
    )


def _mlp_forward(layers, a: np.ndarray, activation: str):
    acts, pre = [a], []
    last = len(layers) - 1
    for i, (weight, bias) in enumerate(layers):
        z = a @ weight.T + bias
        pre.append(z)
        a = z if i == last else _activate(z, activation)
        acts.append(a)
    return a, (acts, pre)


def _mlp_backward(layers, cache, grad: np.ndarray, activation: str, net: str, grads: dict):
    acts, pre = cache
    last = len(layers) - 1
    for i in range(last, -1, -1):
        weight, _ = layers[i]
        dz = grad if i == last else grad * _activate_grad(pre[i], activation)
        grads[f"{net}.{i}.weight"] = dz.T @ acts[i]
        grads[f"{net}.{i}.bias"] = dz.sum(axis=0)
        grad = dz @ weight


def forward_inputs(model: VectorFieldModel, inputs: np.ndarray):
    """Raw output for assembled inputs, plus the cache needed by backward."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.layout.input_dim:
        raise ConfigError(
            "model.layout", f"input width {inputs.shape[-1]} != {model.layout.input_dim}"
        )
    caches = {}
    outputs = []
    for net in model.nets():
        out, caches[net] = _mlp_forward(model.layers(net), inputs, model.layout.activation)
        outputs.append(out)
    return np.concatenate(outputs, axis=1), caches


def forward(model: VectorFieldModel, chunk, t, obs) -> np.ndarray:
    """
    Raw network output, shape (B, T_p * D [+ 1 in srfmp mode]).

    The spatial part is in ambient coordinates and is projected onto the
    tangent space at the chunk by the caller.
    """
    out, _ = forward_inputs(model, make_inputs(model, chunk, t, obs))
    return out


def split_output(model: VectorFieldModel, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Split raw output into spatial chunks (B, T_p, D) and v_tau (B,) or None."""
    layout = model.layout
    spatial = raw[:, : layout.chunk_dim].reshape(-1, layout.horizon, layout.action_dim)
    tau = raw[:, layout.chunk_dim] if layout.has_tau else None
    return spatial, tau


def backward(model: VectorFieldModel, manifold: Manifold, inputs: np.ndarray,
             base_points: np.ndarray, spatial_targets: np.ndarray,
             tau_targets: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """
    Loss and exact gradients for a batch.

    loss = mean_b [ sum_i |P_x(v_i) - u_i|^2_{g_x} + (v_tau - u_tau)^2 ]

    where P_x projects the raw per-step output onto the tangent space at the
    chunk's base point x and g is the manifold metric.

    Args:
        model: Model being trained
        manifold: Manifold of a single action
        inputs: Assembled inputs (B, input_dim)
        base_points: Chunks x_t the field is evaluated at (B, T_p, D)
        spatial_targets: Target tangents at base_points (B, T_p, D)
        tau_targets: Target pseudo-time velocities (B,), srfmp only

    Returns:
        (loss, gradients keyed like model.params)
    """
    raw, caches = forward_inputs(model, inputs)
    batch = raw.shape[0]
    spatial, tau = split_output(model, raw)
    projected = manifold.project_tangent(base_points, spatial)
    residual = projected - spatial_targets
    lowered = manifold.metric_lower(base_points, residual)
    per_sample = np.sum(residual * lowered, axis=(1, 2))

    grad_raw = np.zeros_like(raw)
    grad_raw[:, : model.layout.chunk_dim] = (
        2.0 * manifold.project_tangent(base_points, lowered) / batch
    ).reshape(batch, -1)
    if tau is not None:
        if tau_targets is None:
            raise ConfigError("mode", "srfmp model needs pseudo-time targets")
        tau_residual = tau - np.asarray(tau_targets, dtype=np.float64).reshape(-1)
        per_sample = per_sample + tau_residual ** 2
        grad_raw[:, model.layout.chunk_dim] = 2.0 * tau_residual / batch

    grads: dict[str, np.ndarray] = {}
    start = 0
    for net in model.nets():
        width = model.layers(net)[-1][0].shape[0]
        _mlp_backward(
            model.layers(net), caches[net], grad_raw[:, start:start + width],
            model.layout.activation, net, grads,
        )
        start += width
    return float(np.mean(per_sample)), grads


# ============================================================================
# Checkpoints
# ============================================================================

@dataclass
class Checkpoint:
    """
    A saved model with everything needed to run it.

    Attributes:
        model: Raw (online) weights
        manifold: Manifold of a single action
        flow: Flow parameters used in training
        groups: Extra named weight groups ("ema", "adam_m", "adam_v",
            "normalizer", ...)
        metadata: JSON-serializable run information
    """
    model: VectorFieldModel
    manifold: Manifold
    flow: FlowParams
    groups: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def ema_model(self) -> VectorFieldModel | None:
        if "ema" not in self.groups:
            return None
        return VectorFieldModel(self.model.layout, dict(self.groups["ema"]))


def _write_name(f, name: str):
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_name(f) -> str:
    (length,) = struct.unpack("<I", f.read(4))
    return f.read(length).decode("utf-8")


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> None:
    """
    Write a checkpoint; float payloads are stored bit-exactly as '<f8'.

    Raises:
        OSError: If the file cannot be written
    """
    header = {
        "manifold": str(checkpoint.manifold),
        "mode": checkpoint.model.layout.mode,
        "layout": checkpoint.model.layout.to_dict(),
        "flow": checkpoint.flow.to_dict(),
        "metadata": checkpoint.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    groups = {"model": checkpoint.model.params, **checkpoint.groups}

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(groups)))
        for group_name, arrays in groups.items():
            _write_name(f, group_name)
            f.write(struct.pack("<I", len(arrays)))
            for name, array in arrays.items():
                array = np.ascontiguousarray(array, dtype="<f8")
                _write_name(f, name)
                f.write(struct.pack("<I", array.ndim))
                f.write(struct.pack(f"<{array.ndim}I", *array.shape))
                f.write(array.tobytes())
    logger.debug("Saved checkpoint %s (%d groups)", path, len(groups))


def load_checkpoint(path: Path | str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file doesn't exist
        FileFormatError: If the magic string or version is wrong, or the file is truncated
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FileFormatError(f"Not an rfmp checkpoint: {path}")
        try:
            version, header_len = struct.unpack("<II", f.read(8))
            if version != CHECKPOINT_VERSION:
                raise FileFormatError(f"Unsupported checkpoint version {version}")
            header = json.loads(f.read(header_len).decode("utf-8"))
            (n_groups,) = struct.unpack("<I", f.read(4))
            groups: dict[str, dict[str, np.ndarray]] = {}
            for _ in range(n_groups):
                group_name = _read_name(f)
                (n_arrays,) = struct.unpack("<I", f.read(4))
                arrays = {}
                for _ in range(n_arrays):
                    name = _read_name(f)
                    (ndim,) = struct.unpack("<I", f.read(4))
                    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                    count = int(np.prod(shape, dtype=np.int64))
                    payload = f.read(8 * count)
                    if len(payload) != 8 * count:
                        raise FileFormatError(f"Truncated array {group_name}/{name}")
                    arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(
                        np.float64
                    )
                groups[group_name] = arrays
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FileFormatError(f"Truncated checkpoint {path}: {exc}") from exc

    layout = ModelLayout.from_dict(header["layout"])
    model = VectorFieldModel(layout, groups.pop("model"))
    return Checkpoint(
        model=model,
        manifold=parse_manifold(header["manifold"]),
        flow=FlowParams(**header["flow"]),
        groups=groups,
        metadata=header["metadata"],
    )
