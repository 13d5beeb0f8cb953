"""Reduced-order modeling with latent neural ODEs and graph-convolutional decoders."""

from .data import (
    ScalingParams,
    SignalTable,
    SnapshotDataset,
    SplitSpec,
    apply_scaling,
    compute_scaling,
    invert_scaling,
    load_dataset,
    split_dataset,
    store_dataset,
)
from .decoder import DecoderConfig, decode
from .dynamics import DynNetConfig, LatentTrajectory, euler_rollout
from .errors import (
    ConfigurationError,
    DivergenceError,
    GeometryError,
    GraphRomError,
    StorageError,
    ValidationError,
)
from .interp import (
    GprModel,
    LatentTable,
    OutOfHullError,
    build_latent_table,
    estimate_lipschitz,
    gpr_fit,
    gpr_predict,
    matern15,
    multilinear_interp,
    verify_bound,
    zero_shot_predict,
)
from .mesh import MeshGraph, load_mesh, save_mesh
from .metrics import (
    BifurcationReport,
    EvalReport,
    aggregate_errors,
    amplitude,
    bifurcation_diagram,
    nrmse,
    relative_error,
)
from .pde import (
    AdvDiffProblem,
    GeometrySpec,
    build_geometry,
    generate_benchmark,
    solve_trajectory,
)
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
