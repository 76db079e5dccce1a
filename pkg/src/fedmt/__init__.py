"""Federated learning with mixed-type labels: desired-space servers, other-space clients."""

from .datagen import FederatedDataset, SemgTaskSpec, SyntheticTaskSpec, flip_labels, generate
from .errors import ConfigInvalid, FedMTError, RunError
from .federation import FederationConfig, RoundTrace, Strategy, Weighting, aggregate, run_fedmt, run_strategy
from .harness import ExperimentConfig, MetricsStore, load_config, parse_config, run_experiment, run_sweep
from .losses import LabeledBatch, LossKind, Space, backward_corrected_ce, forward_corrected_ce, plain_ce, weighted_mse
from .model import SgdConfig, init_mlp, init_ntk
from .ntk import build_gram, corollary_checks, effective_min_eigenvalue, rate_envelope
from .projection import (
    LabelSpaceSpec,
    ProjectionMatrix,
    build_hierarchical_q,
    build_q,
    build_semg_q,
    build_symmetric_noise_t,
    identity,
)

__version__ = "0.1.0"
