"""Deterministic simulator for decentralized federated optimization.

Gossip averaging over configurable communication topologies, proximal
(anchor-tethered) local updates with an extrapolated aggregation step,
the standard decentralized baselines, non-IID partitioners, and an
oracle harness that replays the update algebra numerically.
"""
from .analysis import (
    StabilityProbeConfig,
    StabilityReport,
    consensus_distance,
    kappa_psi,
    rate_fit,
    stability_probe,
)
from .data import (
    LabeledDataset,
    Partition,
    load_csv,
    make_synthetic_blobs,
    partition_dirichlet,
    partition_iid,
    partition_pathological,
)
from .engine import (
    PartitionSpec,
    ProblemSpec,
    RoundRecord,
    RunConfig,
    RunResult,
    rounds_to_threshold,
    run,
    sweep,
)
from .kernels import active_backend
from .numerics import RngStream, axpy, power_iteration, second_eigenvalue_magnitude
from .optimizers import AlgorithmKind, ClientState, HyperParams, extrapolate, gamma_weights, mix
from .problems import (
    LogisticProblem,
    MlpProblem,
    NoiseConfig,
    Problem,
    QuadraticProblem,
    SmoothnessProfile,
    estimate_smoothness,
)
from .topology import (
    Graph,
    MixingMatrix,
    TopologySpec,
    build_graph,
    metropolis_weights,
    sample_round_topology,
    validate,
)

__version__ = "0.1.0"
