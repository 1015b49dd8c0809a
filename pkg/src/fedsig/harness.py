"""Experiment harness: configuration, the four study protocols, and reports.

Every experiment is driven by an ``ExperimentConfig`` (JSON file and/or CLI
flags) and a master seed; together they fully determine every emitted number.
Results land in the output directory as schema-stable CSV files plus a
``summary.json``, with figures rendered from the same CSVs unless disabled.

Studies:
  * ``centralized-kernel-sweep``: train the verifier centrally for each
    kernel size, several instances each.
  * ``fl-local-epochs`` / ``fl-init-ratio`` / ``fl-scalability``: federated
    runs sweeping E, the initialization ratio r, or the agent count K.
  * ``single-run``: one centralized or federated run with full artifacts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Corpus,
    ProcessedSignature,
    load_corpus,
    merge_corpora,
    partition_agents,
    preprocess_corpus,
    split_train_test,
    synth_generate,
)
from .federated import FedConfig, FedHistory, run_federated
from .ioutil import atomic_write_text
from .metrics import RocCurve, ScoreSet, evaluate, summarize_instances
from .network import ModelConfig, ModelParams, build_model, save_checkpoint
from .training import train_epochs

__all__ = [
    "DataConfig",
    "CentralizedConfig",
    "ExperimentConfig",
    "EXPERIMENT_KINDS",
    "DESK_PRESET",
    "derive_seed",
    "run_experiment",
]

EXPERIMENT_KINDS = (
    "centralized-kernel-sweep",
    "fl-local-epochs",
    "fl-init-ratio",
    "fl-scalability",
    "single-run",
)

# per-kind default sweeps at full scale; odd kernel sizes bracket the
# accuracy/EER peak, the rest follow the study protocols
DEFAULT_SWEEPS = {
    "centralized-kernel-sweep": [3, 11, 21, 31, 41, 51, 61, 71],
    "fl-local-epochs": [1, 5, 15, 25, 50],
    "fl-init-ratio": [0.0, 0.05, 0.125, 0.25, 0.375, 0.5, 1.0],
    "fl-scalability": [2, 5, 10, 20],
}

SWEEP_PARAM = {
    "centralized-kernel-sweep": "kernel_size",
    "fl-local-epochs": "local_epochs",
    "fl-init-ratio": "init_ratio",
    "fl-scalability": "num_agents",
}

# seed stream ids for SeedSequence derivation
_STREAM_DATA = 1
_STREAM_SPLIT = 2
_STREAM_MODEL = 3
_STREAM_FED = 4
_STREAM_CARVE = 5
_STREAM_TRAIN = 6


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed derived from integer parts via SeedSequence."""
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "svc"
    num_users: int = 10
    genuine_per_user: int = 12
    forged_per_user: int = 12
    length_min: int = 40
    length_max: int = 64
    task1_dir: str | None = None
    task2_dir: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "svc"):
            raise ValueError(f"unknown data source {self.source!r}")

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "num_users": self.num_users,
            "genuine_per_user": self.genuine_per_user,
            "forged_per_user": self.forged_per_user,
            "length_min": self.length_min,
            "length_max": self.length_max,
            "task1_dir": self.task1_dir,
            "task2_dir": self.task2_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(**d)


@dataclass(frozen=True)
class CentralizedConfig:
    optimizer: str = "adamax"
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 160

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CentralizedConfig":
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "single-run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    centralized: CentralizedConfig = field(default_factory=CentralizedConfig)
    sweep: tuple = ()
    instances: int = 10
    out: str = "results"
    seed: int = 0
    figures: bool = True
    train_per_class: int = 16
    agent_users: int | None = None  # explicit agent-user pool (init-ratio study)
    mode: str = "centralized"  # single-run flavor: "centralized" | "federated"

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; choose from {EXPERIMENT_KINDS}")
        if self.mode not in ("centralized", "federated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.instances < 1:
            raise ValueError("instances must be at least 1")
        object.__setattr__(self, "sweep", tuple(self.sweep))

    def effective_sweep(self) -> list:
        if self.kind == "single-run":
            return []
        values = list(self.sweep) if self.sweep else list(DEFAULT_SWEEPS[self.kind])
        if not values:
            raise ValueError("sweep values must be nonempty")
        return values

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "fed": self.fed.to_dict(),
            "centralized": self.centralized.to_dict(),
            "sweep": list(self.effective_sweep()) if self.kind != "single-run" else [],
            "instances": self.instances,
            "out": self.out,
            "seed": self.seed,
            "figures": self.figures,
            "train_per_class": self.train_per_class,
            "agent_users": self.agent_users,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "fed" in d:
            fed = dict(d["fed"])
            fed.setdefault("model", d["model"].to_dict() if "model" in d else ModelConfig().to_dict())
            d["fed"] = FedConfig.from_dict(fed)
        if "centralized" in d:
            d["centralized"] = CentralizedConfig.from_dict(d["centralized"])
        return cls(**d)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


# Desk-scale preset: synthetic corpus and a shrunken model, sized so every
# experiment kind finishes in well under ten minutes on one CPU core.
DESK_PRESET = {
    "data": {
        "source": "synthetic",
        "num_users": 10,
        "genuine_per_user": 12,
        "forged_per_user": 12,
        "length_min": 40,
        "length_max": 64,
        "task1_dir": None,
        "task2_dir": None,
    },
    "model": {"kernel_size": 9, "channel_widths": [4, 8, 16], "max_length": 64},
    "fed": {
        "num_agents": 2,
        "local_epochs": 15,
        "iterations": 20,
        "local_batch_size": 16,
        "learning_rate": 0.05,
        "init_epochs": 50,
        "init_batch_size": 32,
    },
    "centralized": {"optimizer": "adamax", "learning_rate": 0.01, "epochs": 50, "batch_size": 32},
    "instances": 3,
    "train_per_class": 8,
    "sweeps": {
        "centralized-kernel-sweep": [3, 9, 15],
        "fl-local-epochs": [1, 5, 15],
        "fl-init-ratio": [0.0, 0.4, 1.0],
        "fl-scalability": [1, 2, 5],
    },
}


def apply_desk_preset(raw: dict, kind: str) -> dict:
    """Fold the desk preset under an explicit config dict (config wins)."""
    merged = dict(raw)
    for section in ("data", "model", "fed", "centralized"):
        preset = dict(DESK_PRESET[section])
        preset.update(merged.get(section, {}))
        merged[section] = preset
    merged.setdefault("instances", DESK_PRESET["instances"])
    merged.setdefault("train_per_class", DESK_PRESET["train_per_class"])
    if kind in DESK_PRESET["sweeps"]:
        merged.setdefault("sweep", DESK_PRESET["sweeps"][kind])
    return merged


# fixed co-variables of each federated study: the local-epochs protocol
# pretrains on a quarter of the data (ratio 1/3 of the agent pool) and the
# scalability protocol on a full half (ratio 1.0)
KIND_DEFAULTS = {
    "fl-local-epochs": {"fed": {"init_ratio": 1.0 / 3.0}},
    "fl-scalability": {"fed": {"init_ratio": 1.0}},
}


def apply_kind_defaults(raw: dict, kind: str) -> dict:
    merged = dict(raw)
    for section, fields in KIND_DEFAULTS.get(kind, {}).items():
        block = dict(merged.get(section, {}))
        for key, value in fields.items():
            block.setdefault(key, value)
        merged[section] = block
    return merged


def max_workers() -> int:
    """Thread cap for intra-iteration agent training (FEDSIG_THREADS)."""
    return max(1, int(os.environ.get("FEDSIG_THREADS", "1")))


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_summary(out_dir: Path, payload: dict) -> None:
    atomic_write_text(out_dir / "summary.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


def fmt_value(value) -> str:
    return f"{value:g}" if isinstance(value, float) else str(value)


def load_experiment_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.data.source == "synthetic":
        return synth_generate(
            cfg.data.num_users,
            cfg.data.genuine_per_user,
            cfg.data.forged_per_user,
            (cfg.data.length_min, cfg.data.length_max),
            seed=derive_seed(cfg.seed, _STREAM_DATA),
            max_length=cfg.model.max_length,
        )
    if not cfg.data.task1_dir:
        raise ValueError("svc data source requires task1_dir")
    corpus = load_corpus(cfg.data.task1_dir, task=1)
    if cfg.data.task2_dir:
        corpus = merge_corpora(corpus, load_corpus(cfg.data.task2_dir, task=2))
    # inventory of what was actually read, next to the results
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(
        out_dir / "corpus_manifest.json",
        json.dumps(corpus.manifest(), indent=2, sort_keys=True) + "\n",
    )
    return corpus


@dataclass
class FederatedData:
    init_data: list[ProcessedSignature] | None
    partitions: list[list[ProcessedSignature]]
    test_data: list[ProcessedSignature]
    init_users: list[int]
    agent_user_sets: list[list[int]]


def carve_federated_data(
    corpus: Corpus,
    train_per_class: int,
    num_agents: int,
    init_ratio: float,
    t_max: int,
    seed: int,
    agent_users: int | None = None,
) -> FederatedData:
    """Split users into an initialization pool and per-agent partitions.

    Users (never samples) are assigned to roles.  The initialization pool
    holds ``round(init_ratio * n_agent_users)`` users; when ``agent_users``
    is not given, the agent pool takes all remaining users, i.e.
    ``n_agent = n_total - n_init``.  Each agent trains on its users' training
    split; the test set is the held-out split of the agent users only.  For
    uniform corpora this makes |P_init| = r * sum(|P_k|) exact in samples.
    """
    train_c, test_c = split_train_test(corpus, train_per_class, seed=derive_seed(seed, _STREAM_SPLIT))
    uids = corpus.user_ids
    order = [uids[i] for i in np.random.default_rng((seed, _STREAM_CARVE)).permutation(len(uids))]
    if agent_users is None:
        n_init = int(round(len(uids) * init_ratio / (1.0 + init_ratio))) if init_ratio > 0 else 0
        n_agent = len(uids) - n_init
    else:
        n_agent = agent_users
        n_init = int(round(init_ratio * n_agent))
    if n_init + n_agent > len(uids):
        raise ValueError(
            f"carve needs {n_init} init + {n_agent} agent users but corpus has {len(uids)}"
        )
    if n_agent < num_agents:
        raise ValueError(f"cannot split {n_agent} agent users across {num_agents} agents")

    init_users = sorted(order[:n_init])
    agent_pool = sorted(order[n_init : n_init + n_agent])
    agent_corpus = Corpus({uid: train_c.users[uid] for uid in agent_pool}, source="carve:agents")
    parts = partition_agents(agent_corpus, num_agents, seed=derive_seed(seed, _STREAM_CARVE, 1))

    init_data = None
    if n_init:
        init_sigs = [sig for uid in init_users for sig in train_c.users[uid]]
        init_data = preprocess_corpus(init_sigs, t_max)
    partitions = [preprocess_corpus(p.all_signatures(), t_max) for p in parts]
    test_sigs = [sig for uid in agent_pool for sig in test_c.users[uid]]
    return FederatedData(
        init_data=init_data,
        partitions=partitions,
        test_data=preprocess_corpus(test_sigs, t_max),
        init_users=init_users,
        agent_user_sets=[p.user_ids for p in parts],
    )


def _train_centralized_instance(
    cfg: ExperimentConfig,
    corpus: Corpus,
    kernel_size: int,
    instance: int,
) -> tuple[ModelParams, ModelConfig, ScoreSet, RocCurve]:
    """One centralized training run; returns (params, model_cfg, scores, roc)."""
    model_cfg = cfg.model.with_overrides(
        kernel_size=kernel_size, seed=derive_seed(cfg.seed, _STREAM_MODEL, instance)
    )
    train_c, test_c = split_train_test(
        corpus, cfg.train_per_class, seed=derive_seed(cfg.seed, _STREAM_SPLIT, instance)
    )
    train = preprocess_corpus(train_c.all_signatures(), model_cfg.max_length)
    test = preprocess_corpus(test_c.all_signatures(), model_cfg.max_length)
    params = build_model(model_cfg)
    params, _ = train_epochs(
        params,
        train,
        model_cfg,
        optimizer=cfg.centralized.optimizer,
        lr=cfg.centralized.learning_rate,
        epochs=cfg.centralized.epochs,
        batch_size=cfg.centralized.batch_size,
        seed=(derive_seed(cfg.seed, _STREAM_TRAIN, instance),),
    )
    scores, roc = evaluate(params, test, model_cfg)
    return params, model_cfg, scores, roc


def run_centralized_sweep(cfg: ExperimentConfig) -> Path:
    """Kernel-size study: the centralized recipe per size, several instances."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_experiment_corpus(cfg)
    sweep = cfg.effective_sweep()

    rows = []
    per_kernel: dict[str, dict] = {}
    for kernel in sweep:
        eers, accs = [], []
        for instance in range(cfg.instances):
            _, _, scores, roc = _train_centralized_instance(cfg, corpus, int(kernel), instance)
            rows.append([int(kernel), instance, roc.eer, roc.accuracy_at_half])
            eers.append(roc.eer)
            accs.append(roc.accuracy_at_half)
            scores.to_csv(out_dir / f"scores_k{kernel}_i{instance}.csv")
        per_kernel[str(kernel)] = {
            "eer": summarize_instances(eers).to_dict(),
            "accuracy": summarize_instances(accs).to_dict(),
        }
    write_csv(out_dir / "kernel_sweep.csv", ["kernel_size", "instance", "eer", "accuracy"], rows)

    best = min(per_kernel, key=lambda k: per_kernel[k]["eer"]["median"])
    write_summary(out_dir, {
        "experiment": cfg.kind,
        "version": f"fedsig {__version__}",
        "config": cfg.to_dict(),
        "results": {"per_kernel": per_kernel, "best_kernel_by_median_eer": int(best)},
    })
    if cfg.figures:
        from .plots import render_experiment
        render_experiment(out_dir)
    return out_dir


def _fed_config_for(cfg: ExperimentConfig, value, instance: int) -> FedConfig:
    overrides = {SWEEP_PARAM[cfg.kind]: value} if cfg.kind in SWEEP_PARAM and cfg.kind != "centralized-kernel-sweep" else {}
    model_cfg = cfg.model.with_overrides(seed=derive_seed(cfg.seed, _STREAM_MODEL, instance))
    return cfg.fed.with_overrides(
        model=model_cfg,
        master_seed=derive_seed(cfg.seed, _STREAM_FED, instance),
        **overrides,
    )


def run_fl_study(cfg: ExperimentConfig) -> Path:
    """Federated study sweeping E, r, or K with the study-protocol defaults."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_experiment_corpus(cfg)
    sweep = cfg.effective_sweep()
    param = SWEEP_PARAM[cfg.kind]

    agent_users = cfg.agent_users
    if cfg.kind == "fl-init-ratio" and agent_users is None:
        # fixed agent pool so the ratio alone varies; half the users by default
        agent_users = len(corpus.user_ids) // 2

    box_rows, loss_rows = [], []
    per_value: dict[str, dict] = {}
    for value in sweep:
        histories: list[FedHistory] = []
        for instance in range(cfg.instances):
            fed_cfg = _fed_config_for(cfg, value, instance)
            carved = carve_federated_data(
                corpus,
                cfg.train_per_class,
                fed_cfg.num_agents,
                fed_cfg.init_ratio,
                fed_cfg.model.max_length,
                seed=derive_seed(cfg.seed, _STREAM_CARVE, instance),
                agent_users=agent_users,
            )
            history = run_federated(
                fed_cfg, carved.partitions, carved.test_data, carved.init_data,
                max_workers=max_workers(),
            )
            histories.append(history)
            final = history.records[-1]
            box_rows.append([fmt_value(value), instance, final.eer, final.accuracy])
            for record in history.records:
                for agent, epochs in enumerate(record.agent_losses):
                    loss_rows.append(
                        [fmt_value(value), instance, record.iteration, agent, float(np.mean(epochs))]
                    )
        eers = [h.records[-1].eer for h in histories]
        accs = [h.records[-1].accuracy for h in histories]
        summary_eer = summarize_instances(eers)
        per_value[fmt_value(value)] = {
            "eer": summary_eer.to_dict(),
            "accuracy": summarize_instances(accs).to_dict(),
        }
        # full artifacts for the median instance only (rebuild its test set
        # from the instance seed instead of holding every instance's data)
        median_instance = summary_eer.median_index
        median_history = histories[median_instance]
        carved = carve_federated_data(
            corpus,
            cfg.train_per_class,
            median_history.config.num_agents,
            median_history.config.init_ratio,
            median_history.config.model.max_length,
            seed=derive_seed(cfg.seed, _STREAM_CARVE, median_instance),
            agent_users=agent_users,
        )
        scores, roc = evaluate(
            median_history.final_params, carved.test_data, median_history.config.model
        )
        roc.to_csv(out_dir / f"roc_{param}_{fmt_value(value)}.csv")
        scores.to_csv(out_dir / f"scores_{param}_{fmt_value(value)}.csv")
        save_checkpoint(
            out_dir / f"model_{param}_{fmt_value(value)}.fsig",
            median_history.final_params,
            median_history.config.model,
        )

    write_csv(out_dir / "study.csv", ["param_value", "instance", "eer", "accuracy"], box_rows)
    write_csv(out_dir / "losses.csv", ["param_value", "instance", "iteration", "agent", "loss"], loss_rows)
    write_summary(out_dir, {
        "experiment": cfg.kind,
        "version": f"fedsig {__version__}",
        "config": cfg.to_dict(),
        "results": {"param": param, "per_value": per_value},
    })
    if cfg.figures:
        from .plots import render_experiment
        render_experiment(out_dir)
    return out_dir


def run_single(cfg: ExperimentConfig) -> Path:
    """One centralized or federated run; checkpoint, scores, ROC, summary."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_experiment_corpus(cfg)

    if cfg.mode == "centralized":
        params, model_cfg, scores, roc = _train_centralized_instance(
            cfg, corpus, cfg.model.kernel_size, instance=0
        )
        extra = {}
    else:
        fed_cfg = _fed_config_for(cfg, None, instance=0)
        carved = carve_federated_data(
            corpus, cfg.train_per_class, fed_cfg.num_agents, fed_cfg.init_ratio,
            fed_cfg.model.max_length, seed=derive_seed(cfg.seed, _STREAM_CARVE, 0),
            agent_users=cfg.agent_users,
        )
        history = run_federated(
            fed_cfg, carved.partitions, carved.test_data, carved.init_data,
            max_workers=max_workers(),
        )
        history.save_json(out_dir / "history.json")
        params, model_cfg = history.final_params, fed_cfg.model
        scores, roc = evaluate(params, carved.test_data, model_cfg)
        extra = {"iterations": fed_cfg.iterations, "num_agents": fed_cfg.num_agents}

    save_checkpoint(out_dir / "model.fsig", params, model_cfg)
    scores.to_csv(out_dir / "scores.csv")
    roc.to_csv(out_dir / "roc.csv")
    write_summary(out_dir, {
        "experiment": cfg.kind,
        "version": f"fedsig {__version__}",
        "config": cfg.to_dict(),
        "results": {
            "mode": cfg.mode,
            "eer": roc.eer,
            "eer_threshold": roc.eer_threshold,
            "accuracy": roc.accuracy_at_half,
            "accuracy_at_eer_threshold": roc.accuracy_at_eer,
            **extra,
        },
    })
    if cfg.figures:
        from .plots import render_experiment
        render_experiment(out_dir)
    return out_dir


def run_experiment(cfg: ExperimentConfig) -> Path:
    if cfg.kind == "centralized-kernel-sweep":
        return run_centralized_sweep(cfg)
    if cfg.kind == "single-run":
        return run_single(cfg)
    return run_fl_study(cfg)
