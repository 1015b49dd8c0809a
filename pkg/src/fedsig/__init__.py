"""Federated online signature verification with a from-scratch 1-D CNN.

The package trains a small 1-D convolutional verifier on pen trajectories,
either centrally or with synchronous federated averaging across simulated
agents, and ships an experiment harness that emits plot-ready CSV/JSON
results plus rendered figures.
"""

__version__ = "0.1.0"

from .data import (
    Corpus,
    Label,
    ProcessedSignature,
    RawSignature,
    load_corpus,
    merge_corpora,
    normalize,
    pad,
    parse_svc_file,
    partition_agents,
    preprocess,
    preprocess_corpus,
    split_train_test,
    synth_generate,
)
from .federated import (
    AgentState,
    FedConfig,
    FedHistory,
    aggregate,
    init_global,
    local_training,
    run_federated,
)
from .harness import ExperimentConfig, run_experiment
from .metrics import RocCurve, ScoreSet, accuracy, roc_and_eer, score_batch, summarize_instances
from .network import (
    Batch,
    ModelConfig,
    ModelParams,
    backward,
    build_model,
    flatten_params,
    forward,
    load_checkpoint,
    save_checkpoint,
    unflatten_params,
)
from .optim import AdamaxState, adamax_step, make_batches, sgd_step
from .training import train_epochs

__all__ = [
    "__version__",
    # data
    "Corpus", "Label", "ProcessedSignature", "RawSignature",
    "load_corpus", "merge_corpora", "normalize", "pad", "parse_svc_file",
    "partition_agents", "preprocess", "preprocess_corpus", "split_train_test",
    "synth_generate",
    # model
    "Batch", "ModelConfig", "ModelParams", "backward", "build_model",
    "flatten_params", "forward", "load_checkpoint", "save_checkpoint",
    "unflatten_params",
    # optimization / training
    "AdamaxState", "adamax_step", "make_batches", "sgd_step", "train_epochs",
    # federated
    "AgentState", "FedConfig", "FedHistory", "aggregate", "init_global",
    "local_training", "run_federated",
    # metrics
    "RocCurve", "ScoreSet", "accuracy", "roc_and_eer", "score_batch",
    "summarize_instances",
    # harness
    "ExperimentConfig", "run_experiment",
]
