"""Synchronous federated averaging over simulated agents.

One iteration: every agent copies the current global parameters, trains
locally for E epochs on its private partition, and returns only its updated
weights; the coordinator replaces the global model with the dataset-size
weighted mean of the returned parameter vectors.  Agents are simulated
in-process; the aggregation protocol is exact, the transport is not.

All randomness is derived from the master seed, per agent and per iteration,
so results are bit-identical regardless of how agent work is scheduled.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ProcessedSignature
from .ioutil import atomic_write_text
from .metrics import evaluate
from .network import ModelConfig, ModelParams, build_model, save_checkpoint
from .training import train_epochs

__all__ = [
    "FedConfig",
    "AgentState",
    "IterationRecord",
    "FedHistory",
    "init_global",
    "local_training",
    "aggregate",
    "run_federated",
]


@dataclass(frozen=True)
class FedConfig:
    """Hyperparameters for one federated run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    num_agents: int = 2
    local_epochs: int = 15
    iterations: int = 200
    local_batch_size: int = 32
    learning_rate: float = 0.001
    init_ratio: float = 0.0
    local_optimizer: str = "sgd"
    master_seed: int = 0
    # centralized pretraining recipe used when init_ratio > 0
    init_epochs: int = 200
    init_batch_size: int = 160
    init_learning_rate: float = 0.01

    def __post_init__(self):
        if self.num_agents < 1:
            raise ValueError("num_agents must be at least 1")
        if self.local_epochs < 0 or self.iterations < 0:
            raise ValueError("local_epochs and iterations must be nonnegative")
        if not 0.0 <= self.init_ratio <= 1.0:
            raise ValueError(f"init_ratio must lie in [0, 1], got {self.init_ratio}")
        if self.local_optimizer not in ("sgd", "adamax"):
            raise ValueError(f"unknown local optimizer {self.local_optimizer!r}")

    def agent_seed(self, agent_index: int, iteration: int) -> tuple[int, int, int]:
        """Batch-shuffle seed for one agent at one iteration; a pure function
        of (master seed, agent, iteration) so scheduling cannot perturb it."""
        return (self.master_seed, agent_index, iteration)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "num_agents": self.num_agents,
            "local_epochs": self.local_epochs,
            "iterations": self.iterations,
            "local_batch_size": self.local_batch_size,
            "learning_rate": self.learning_rate,
            "init_ratio": self.init_ratio,
            "local_optimizer": self.local_optimizer,
            "master_seed": self.master_seed,
            "init_epochs": self.init_epochs,
            "init_batch_size": self.init_batch_size,
            "init_learning_rate": self.init_learning_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def with_overrides(self, **kwargs) -> "FedConfig":
        return replace(self, **kwargs)


@dataclass
class AgentState:
    """An agent's identity and its private, preprocessed partition."""

    agent_index: int
    data: list[ProcessedSignature]

    def __post_init__(self):
        if not self.data:
            raise ValueError(f"agent {self.agent_index} has an empty partition")

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass
class IterationRecord:
    iteration: int
    agent_losses: list[list[float]]  # per agent, per local epoch
    eer: float
    accuracy: float
    checkpoint: str | None = None  # saved post-aggregation model, if any

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "agent_losses": self.agent_losses,
            "eer": self.eer,
            "accuracy": self.accuracy,
            "checkpoint": self.checkpoint,
        }


@dataclass
class FedHistory:
    """Per-iteration records of a federated run plus the final global model.

    Metrics are computed with each iteration's post-aggregation model in eval
    mode on the held-out test set.
    """

    records: list[IterationRecord]
    final_params: ModelParams
    config: FedConfig

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "iterations": [r.to_dict() for r in self.records],
        }

    def save_json(self, path: str | Path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def init_global(
    fed_config: FedConfig, init_data: list[ProcessedSignature] | None
) -> ModelParams:
    """Produce the initial global model w0.

    With ``init_ratio == 0`` this is the seeded random initialization.  With a
    positive ratio the model is pretrained centrally (Adamax recipe) on the
    volunteer corpus ``init_data`` before any federated iteration runs.
    """
    params = build_model(fed_config.model)
    if fed_config.init_ratio == 0.0:
        return params
    if not init_data:
        raise ValueError("init_ratio > 0 requires a nonempty initialization corpus")
    params, _ = train_epochs(
        params,
        init_data,
        fed_config.model,
        optimizer="adamax",
        lr=fed_config.init_learning_rate,
        epochs=fed_config.init_epochs,
        batch_size=fed_config.init_batch_size,
        seed=(fed_config.master_seed, 0xB00),  # pretraining stream
    )
    return params


def local_training(
    agent: AgentState,
    global_params: ModelParams,
    config: ModelConfig,
    epochs: int,
    batch_size: int,
    lr: float,
    seed,
    optimizer: str = "sgd",
) -> tuple[ModelParams, list[float]]:
    """Train a copy of the global model on the agent's partition.

    Returns the updated parameters (including refreshed batch-norm running
    statistics) and the mean loss per local epoch; the global parameters are
    never mutated.  Only weights and loss scalars leave the agent.
    """
    return train_epochs(
        global_params.copy(),
        agent.data,
        config,
        optimizer=optimizer,
        lr=lr,
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
    )


def aggregate(contributions: list[tuple[ModelParams, int]]) -> ModelParams:
    """Dataset-size weighted mean of every tensor, running stats included.

    The weighted terms are accumulated in sorted order per element, so the
    result is bit-identical under any permutation of the contributions.
    """
    if not contributions:
        raise ValueError("nothing to aggregate")
    sizes = [size for _, size in contributions]
    if any(size <= 0 for size in sizes):
        raise ValueError(f"contribution sizes must be positive, got {sizes}")
    total = float(sum(sizes))
    first = contributions[0][0]
    names = first.names
    for params, _ in contributions[1:]:
        if params.names != names:
            raise ValueError("contributions have mismatched parameter sets")
    weights = np.array(sizes, dtype=np.float64) / total
    merged = {}
    for name in names:
        stacked = np.stack([params[name] for params, _ in contributions])
        terms = weights.reshape((-1,) + (1,) * (stacked.ndim - 1)) * stacked
        terms.sort(axis=0, kind="stable")
        merged[name] = terms.sum(axis=0)
    return ModelParams(merged)


def run_federated(
    fed_config: FedConfig,
    partitions: list[list[ProcessedSignature]],
    test_set: list[ProcessedSignature],
    init_data: list[ProcessedSignature] | None = None,
    max_workers: int = 1,
    checkpoint_dir: str | Path | None = None,
) -> FedHistory:
    """Run the full synchronous loop for ``fed_config.iterations`` rounds.

    ``partitions`` holds one preprocessed sample list per agent.  Agents
    within an iteration may run on a thread pool (``max_workers``); the
    barrier before aggregation and the per-agent seed streams keep the result
    bit-identical for any worker count.  With ``checkpoint_dir`` set, every
    iteration's post-aggregation model is saved there and referenced from its
    history record.
    """
    if len(partitions) != fed_config.num_agents:
        raise ValueError(
            f"expected {fed_config.num_agents} partitions, got {len(partitions)}"
        )
    agents = [AgentState(k, part) for k, part in enumerate(partitions)]
    global_params = init_global(fed_config, init_data)

    records: list[IterationRecord] = []
    for iteration in range(1, fed_config.iterations + 1):
        def train_one(agent: AgentState):
            return local_training(
                agent,
                global_params,
                fed_config.model,
                epochs=fed_config.local_epochs,
                batch_size=fed_config.local_batch_size,
                lr=fed_config.learning_rate,
                seed=fed_config.agent_seed(agent.agent_index, iteration),
                optimizer=fed_config.local_optimizer,
            )

        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = list(pool.map(train_one, agents))  # barrier: collected in agent order
        else:
            results = [train_one(agent) for agent in agents]

        global_params = aggregate(
            [(params, agent.size) for (params, _), agent in zip(results, agents)]
        )
        checkpoint = None
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"iter_{iteration:04d}.fsig"
            save_checkpoint(path, global_params, fed_config.model)
            checkpoint = path.name
        _, roc = evaluate(global_params, test_set, fed_config.model)
        records.append(
            IterationRecord(
                iteration=iteration,
                agent_losses=[losses for _, losses in results],
                eer=roc.eer,
                accuracy=roc.accuracy_at_half,
                checkpoint=checkpoint,
            )
        )
    return FedHistory(records=records, final_params=global_params, config=fed_config)
