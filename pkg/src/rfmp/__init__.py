"""
rfmp - Riemannian Flow Matching Policies

Flow-matching action policies on Euclidean, sphere, SPD and product
manifolds, with a stable (time-free) variant that integrates an augmented
state toward its equilibrium instead of a fixed time grid.

Synthetic strokes, SPD and reach tasks, a NumPy vector-field network and a
property suite that checks the geometric and training invariants.
"""

__version__ = "0.3.0"
__author__ = "rfmp contributors"
__license__ = "MIT"

# Geometry
try:
    from .manifolds import (
        Manifold,
        Euclidean,
        Sphere,
        SPD,
        Product,
        parse_manifold,
        format_manifold,
        exp_map,
        log_map,
        distance,
        project_to_manifold,
        project_to_tangent,
        inner,
    )
    from .distributions import (
        EuclideanGaussian,
        SphereUniform,
        WrappedGaussian,
        PriorSpec,
        default_prior,
        make_rng,
        sample_prior,
        sample_chunk_prior,
    )
    __all_geometry__ = [
        "Manifold",
        "Euclidean",
        "Sphere",
        "SPD",
        "Product",
        "parse_manifold",
        "format_manifold",
        "exp_map",
        "log_map",
        "distance",
        "project_to_manifold",
        "project_to_tangent",
        "inner",
        "EuclideanGaussian",
        "SphereUniform",
        "WrappedGaussian",
        "PriorSpec",
        "default_prior",
        "make_rng",
        "sample_prior",
        "sample_chunk_prior",
    ]
except ImportError:
    __all_geometry__ = []

# Flows and networks
try:
    from .flows import (
        FlowParams,
        AugmentedState,
        cfm_path,
        rcfm_geodesic_path,
        sfm_path,
        srfm_path,
        lyapunov_value,
        lasalle_check,
    )
    from .nnet import (
        ModelLayout,
        VectorFieldModel,
        Checkpoint,
        init_model,
        forward,
        embed_time,
        save_checkpoint,
        load_checkpoint,
    )
    __all_flows__ = [
        "FlowParams",
        "AugmentedState",
        "cfm_path",
        "rcfm_geodesic_path",
        "sfm_path",
        "srfm_path",
        "lyapunov_value",
        "lasalle_check",
        "ModelLayout",
        "VectorFieldModel",
        "Checkpoint",
        "init_model",
        "forward",
        "embed_time",
        "save_checkpoint",
        "load_checkpoint",
    ]
except ImportError:
    __all_flows__ = []

# Training and inference
try:
    from .training import (
        Demonstration,
        Dataset,
        Normalizer,
        make_training_pair,
        rfmp_loss,
        srfmp_loss,
        adamw_step,
        ema_update,
        train,
    )
    from .inference import (
        Policy,
        Trajectory,
        integrate_projected_euler,
        integrate_srfmp,
        policy_act,
        jerkiness,
        run_rollouts,
    )
    __all_policy__ = [
        "Demonstration",
        "Dataset",
        "Normalizer",
        "make_training_pair",
        "rfmp_loss",
        "srfmp_loss",
        "adamw_step",
        "ema_update",
        "train",
        "Policy",
        "Trajectory",
        "integrate_projected_euler",
        "integrate_srfmp",
        "policy_act",
        "jerkiness",
        "run_rollouts",
    ]
except ImportError:
    __all_policy__ = []

# Tasks and configuration
try:
    from .tasks import (
        ReachEnv,
        gen_strokes,
        gen_spd_dataset,
        gen_reach_demos,
        stereographic_to_sphere,
        read_dataset,
        write_dataset,
    )
    from .config import RunConfig, load_run_config
    from .errors import (
        RfmpError,
        ManifoldError,
        ConfigError,
        DivergenceError,
        FileFormatError,
        ProtocolError,
    )
    __all_tasks__ = [
        "ReachEnv",
        "gen_strokes",
        "gen_spd_dataset",
        "gen_reach_demos",
        "stereographic_to_sphere",
        "read_dataset",
        "write_dataset",
        "RunConfig",
        "load_run_config",
        "RfmpError",
        "ManifoldError",
        "ConfigError",
        "DivergenceError",
        "FileFormatError",
        "ProtocolError",
    ]
except ImportError:
    __all_tasks__ = []

__all__ = __all_geometry__ + __all_flows__ + __all_policy__ + __all_tasks__

_component_status = {
    "geometry": bool(__all_geometry__),
    "flows": bool(__all_flows__),
    "policy": bool(__all_policy__),
    "tasks": bool(__all_tasks__),
}


def get_version_info():
    """Get version information"""
    return {
        "version": __version__,
        "author": __author__,
        "license": __license__,
    }


def get_component_status():
    """Report which component groups imported successfully"""
    return dict(_component_status)
