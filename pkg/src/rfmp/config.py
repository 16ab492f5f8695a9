"""
Run configuration.

One JSON file per run, parsed into nested dataclass sections. Every key is
optional; defaults are the standard training and inference settings
(AdamW lr 1e-4, weight decay 1e-3, EMA decay 0.999, lambda_x = lambda_tau
= 2.5, tau in [0, 1], T_p = 16, T_a = 8, T_o = 2).

Example file:

    {
        "seed": 0,
        "manifold": "S2",
        "mode": "srfmp",
        "task": {"name": "strokes", "shape": "L", "sphere": true},
        "train": {"epochs": 300},
        "prior": [{"kind": "sphere_uniform"}]
    }

Command-line overrides use dotted paths (``--train.epochs 5``); values are
parsed as JSON and fall back to plain strings.
"""

import json
import logging
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError, ManifoldError
from .manifolds import SPD, Euclidean, Manifold, Sphere, parse_manifold

logger = logging.getLogger(__name__)


# ============================================================================
# Constants
# ============================================================================

TASKS = ("strokes", "reach", "spd")
STROKE_SHAPES = ("L", "S", "TwoMode")
TRAIN_FLOWS = ("rcfm", "cfm")
MODES = ("rfmp", "srfmp")

OVERRIDE_ALIASES = {
    "--t-end": "integrator.t_end",
    "--nfe": "integrator.nfe",
    "--seed": "seed",
    "--epochs": "train.epochs",
    "--n-trials": "rollout.n_trials",
}


# ============================================================================
# Sections
# ============================================================================

@dataclass
class TaskConfig:
    """Synthetic task and dataset generation."""
    name: str = "strokes"
    shape: str = "L"
    n_demos: int = 50
    length: int = 64
    noise: float = 0.05
    sphere: bool = False
    bound: float = 1.5
    jitter: float = 0.05


@dataclass
class FlowConfig:
    sigma: float = 0.0
    lambda_x: float = 2.5
    lambda_tau: float = 2.5
    tau0: float = 0.0
    tau1: float = 1.0


@dataclass
class ModelConfig:
    embedding_dim: int = 32
    hidden: list[int] = field(default_factory=lambda: [256, 256, 256])
    activation: str = "silu"
    separate_tau_mlp: bool = False
    tau_hidden: list[int] = field(default_factory=lambda: [64, 64])


@dataclass
class TrainConfig:
    """
    Optimizer and training-loop settings.

    seed and mode mirror the top-level run fields; RunConfig fills them in.
    """
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    ema_decay: float = 0.999
    ema_warmup: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 256
    flow: str = "rcfm"
    val_fraction: float = 0.1
    normalize: bool = True
    seed: int = 0
    mode: str = "rfmp"


@dataclass
class PolicyConfig:
    """Prediction (T_p), action (T_a) and observation (T_o) horizons."""
    T_p: int = 16
    T_a: int = 8
    T_o: int = 2


@dataclass
class IntegratorConfig:
    """
    ODE integration settings.

    refine_step None means 1 / (4 lambda_x). use_ema selects EMA weights
    at inference when a checkpoint carries them.
    """
    nfe: int = 10
    t_end: float = 1.0
    srfmp_first_step: bool = True
    refine_step: float | None = None
    use_ema: bool = True


@dataclass
class RolloutConfig:
    n_trials: int = 50
    max_steps: int = 100
    tolerance: float = 0.05
    success_score: float = 0.9


@dataclass
class SampleConfig:
    n_samples: int = 256
    horizons: list[float] = field(default_factory=lambda: [1.0, 2.0])


@dataclass
class PathsConfig:
    dataset: str = "runs/dataset.csv"
    checkpoint: str = "runs/model.ckpt"
    output_dir: str = "runs"


_SECTIONS: dict[str, type] = {
    "task": TaskConfig,
    "flow": FlowConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "policy": PolicyConfig,
    "integrator": IntegratorConfig,
    "rollout": RolloutConfig,
    "sample": SampleConfig,
    "paths": PathsConfig,
}
_DERIVED_KEYS = {"train": {"seed", "mode"}}


@dataclass
class RunConfig:
    """Complete configuration of one run."""
    seed: int = 0
    manifold: str = "R2"
    mode: str = "rfmp"
    task: TaskConfig = field(default_factory=TaskConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    prior: list[dict[str, Any]] = field(default_factory=list)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    # -- derived objects -------------------------------------------------------

    def manifold_spec(self) -> Manifold:
        try:
            return parse_manifold(self.manifold)
        except ManifoldError as exc:
            raise ConfigError("manifold", str(exc)) from exc

    def flow_params(self):
        from .flows import FlowParams

        return FlowParams(**asdict(self.flow))

    def prior_spec(self):
        from .distributions import PriorSpec

        return PriorSpec.from_config(self.manifold_spec(), self.prior, self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, mode=self.mode)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key in _DERIVED_KEYS["train"]:
            out["train"].pop(key)
        return out

    # -- validation ------------------------------------------------------------

    def validate(self) -> "RunConfig":
        """
        Check every field and cross-field constraint.

        Raises:
            ConfigError: Naming the first offending field
        """
        _check(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be an integer >= 0")
        spec = self.manifold_spec()
        _check(self.mode in MODES, "mode", f"must be one of {MODES}")

        task = self.task
        _check(task.name in TASKS, "task.name", f"must be one of {TASKS}")
        _check(task.shape in STROKE_SHAPES, "task.shape", f"must be one of {STROKE_SHAPES}")
        _check(task.n_demos >= 1, "task.n_demos", "must be >= 1")
        _check(task.noise >= 0, "task.noise", "must be >= 0")
        _check(task.jitter >= 0, "task.jitter", "must be >= 0")
        _check(task.bound > 0, "task.bound", "must be > 0")
        if task.name == "spd":
            _check(spec == SPD(2), "manifold", f"task 'spd' needs SPD2, got {self.manifold}")
        else:
            expected = Sphere(3) if task.sphere else Euclidean(2)
            _check(
                spec == expected, "manifold",
                f"task '{task.name}' (sphere={task.sphere}) needs {expected}, got {self.manifold}",
            )

        policy = self.policy
        _check(policy.T_p >= 1, "policy.T_p", "must be >= 1")
        _check(1 <= policy.T_a <= policy.T_p, "policy.T_a", "must satisfy 1 <= T_a <= T_p")
        _check(policy.T_o >= 2, "policy.T_o", "must be >= 2")
        _check(
            task.length >= policy.T_o + policy.T_p, "task.length",
            f"must be >= T_o + T_p = {policy.T_o + policy.T_p}",
        )

        model = self.model
        _check(
            model.embedding_dim >= 2 and model.embedding_dim % 2 == 0,
            "model.embedding_dim", "must be even and >= 2",
        )
        _check(
            all(isinstance(h, int) and h >= 1 for h in model.hidden + model.tau_hidden),
            "model.hidden", "layer widths must be integers >= 1",
        )
        _check(model.activation in ("silu", "identity"), "model.activation", "unknown activation")

        train = self.train
        _check(train.learning_rate > 0, "train.learning_rate", "must be > 0")
        _check(train.weight_decay >= 0, "train.weight_decay", "must be >= 0")
        _check(0 <= train.ema_decay <= 1, "train.ema_decay", "must be in [0, 1]")
        _check(0 <= train.beta1 < 1, "train.beta1", "must be in [0, 1)")
        _check(0 <= train.beta2 < 1, "train.beta2", "must be in [0, 1)")
        _check(train.eps > 0, "train.eps", "must be > 0")
        _check(train.epochs >= 0, "train.epochs", "must be >= 0")
        _check(train.batch_size >= 1, "train.batch_size", "must be >= 1")
        _check(0 <= train.val_fraction < 1, "train.val_fraction", "must be in [0, 1)")
        _check(train.flow in TRAIN_FLOWS, "train.flow", f"must be one of {TRAIN_FLOWS}")
        if train.flow == "cfm":
            _check(
                all(isinstance(p, Euclidean) for p in spec.factors()), "train.flow",
                "cfm needs a Euclidean manifold",
            )

        params = self.flow_params()

        integ = self.integrator
        _check(integ.nfe >= 1, "integrator.nfe", "must be >= 1")
        _check(integ.t_end > 0, "integrator.t_end", "must be > 0")
        if integ.refine_step is not None:
            _check(
                0 < integ.refine_step <= 1.0 / params.lambda_x, "integrator.refine_step",
                "must be in (0, 1/lambda_x]",
            )

        self.prior_spec()

        _check(self.rollout.n_trials >= 1, "rollout.n_trials", "must be >= 1")
        _check(self.rollout.max_steps >= 1, "rollout.max_steps", "must be >= 1")
        _check(self.rollout.tolerance > 0, "rollout.tolerance", "must be > 0")
        _check(0 < self.rollout.success_score <= 1, "rollout.success_score", "must be in (0, 1]")
        _check(self.sample.n_samples >= 1, "sample.n_samples", "must be >= 1")
        _check(
            len(self.sample.horizons) >= 1 and all(h > 0 for h in self.sample.horizons),
            "sample.horizons", "must be a non-empty list of positive times",
        )
        return self


def _check(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigError(name, message)


# ============================================================================
# Parsing
# ============================================================================

def _coerce(value: Any, annotation: Any, name: str) -> Any:
    """Coerce a JSON value to a dataclass field annotation."""
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(annotation)
        if value is None and type(None) in options:
            return None
        annotation = next(a for a in options if a is not type(None))
        origin = typing.get_origin(annotation)
    if annotation is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(name, f"expected true/false, got {value!r}")
    if annotation is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if annotation is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(name, f"expected a number, got {value!r}")
    if annotation is str:
        if isinstance(value, str):
            return value
        raise ConfigError(name, f"expected a string, got {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        (item,) = typing.get_args(annotation) or (Any,)
        if item is Any or typing.get_origin(item) is dict:
            return list(value)
        return [_coerce(v, item, f"{name}[{i}]") for i, v in enumerate(value)]
    return value


def _build_section(cls: type, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(section, "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in _DERIVED_KEYS.get(section, ()):
        known.pop(key)
    values = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        values[key] = _coerce(value, known[key].type, f"{section}.{key}")
    return cls(**values)


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from parsed JSON; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    top = {f.name: f for f in fields(RunConfig)}
    values: dict[str, Any] = {}
    for key, value in data.items():
        if key not in top:
            raise ConfigError(key, "unknown key")
        if key in _SECTIONS:
            values[key] = _build_section(_SECTIONS[key], value, key)
        else:
            values[key] = _coerce(value, top[key].type, key)
    return RunConfig(**values)


def parse_overrides(args: list[str]) -> dict[str, Any]:
    """
    Turn ``--section.key value`` / ``--section.key=value`` tokens into a
    {dotted_path: value} mapping. Values are parsed as JSON when possible.

    Raises:
        ConfigError: For flags that are neither dotted paths nor aliases
    """
    out: dict[str, Any] = {}
    i = 0
    while i < len(args):
        token = args[i]
        if not token.startswith("--"):
            raise ConfigError(token, "unexpected argument")
        if "=" in token:
            flag, raw = token.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(token.lstrip("-"), "missing value")
            flag, raw = token, args[i + 1]
            i += 2
        if flag in OVERRIDE_ALIASES:
            path = OVERRIDE_ALIASES[flag]
        elif "." in flag or flag[2:] in {f.name for f in fields(RunConfig)}:
            path = flag[2:]
        else:
            raise ConfigError(flag[2:], "unknown option")
        try:
            out[path] = json.loads(raw)
        except json.JSONDecodeError:
            out[path] = raw
    return out


def apply_overrides(data: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set dotted paths in a raw config mapping (before dataclass parsing)."""
    merged = json.loads(json.dumps(data))
    for path, value in overrides.items():
        keys = path.split(".")
        node = merged
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "cannot override inside a non-object value")
        node[keys[-1]] = value
    return merged


def load_run_config(path: Path | str | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """
    Load, override and validate a run configuration.

    Args:
        path: JSON file, or None for defaults only
        overrides: Dotted-path overrides from parse_overrides

    Returns:
        Validated RunConfig

    Raises:
        OSError: If the file cannot be read
        ConfigError: If the file is not valid JSON or any value is invalid
    """
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    config = config_from_dict(data).validate()
    logger.debug("Loaded run config: manifold=%s mode=%s", config.manifold, config.mode)
    return config
