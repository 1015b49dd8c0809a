"""Shared mini-batch training loop over preprocessed signatures."""

from __future__ import annotations

import numpy as np

from .data import ProcessedSignature
from .layers import softmax_crossentropy
from .network import Batch, ModelConfig, ModelParams, backward, forward
from .optim import AdamaxState, SeedLike, adamax_step, make_batches, sgd_step

__all__ = ["train_step", "train_epochs"]


def train_step(
    params: ModelParams,
    batch: Batch,
    config: ModelConfig,
    lr: float,
    adamax_state: AdamaxState | None = None,
) -> tuple[ModelParams, AdamaxState | None, float]:
    """One forward/backward/update on a batch; running stats are folded in.

    Uses plain SGD when ``adamax_state`` is None, Adamax otherwise.  Returns
    the new parameters, the advanced optimizer state, and the batch loss.
    """
    logits, caches, stats = forward(params, batch.inputs, config, train=True)
    loss, grad_logits, _ = softmax_crossentropy(logits, batch.labels)
    grads = backward(params, caches, grad_logits)
    if adamax_state is None:
        params = sgd_step(params, grads, lr)
    else:
        adamax_state, params = adamax_step(adamax_state, params, grads)
    return params.replace(stats), adamax_state, loss


def train_epochs(
    params: ModelParams,
    data: list[ProcessedSignature],
    config: ModelConfig,
    *,
    optimizer: str = "sgd",
    lr: float,
    epochs: int,
    batch_size: int,
    seed: SeedLike,
) -> tuple[ModelParams, list[float]]:
    """Run ``epochs`` passes of seeded mini-batch training.

    Batch order for epoch e is drawn from ``(seed, e)``, so a (seed, data)
    pair fully determines the trajectory.  Returns the trained parameters and
    the mean loss per epoch.
    """
    if optimizer not in ("sgd", "adamax"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    state = AdamaxState.fresh(params, lr=lr) if optimizer == "adamax" else None
    epoch_losses: list[float] = []
    for epoch in range(epochs):
        losses = []
        for batch in make_batches(data, batch_size, seed, epoch):
            params, state, loss = train_step(params, batch, config, lr, state)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return params, epoch_losses
