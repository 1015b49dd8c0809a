"""Parameter update rules and mini-batch scheduling.

SGD is the local rule for federated training; Adamax drives the centralized
runs.  Both are pure state-in/state-out transitions over ``ModelParams``:
they return fresh objects and exclude batch-norm running statistics (those
are updated by the forward pass, not by gradients).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ProcessedSignature
from .network import Batch, ModelParams

__all__ = ["sgd_step", "AdamaxState", "adamax_step", "make_batches"]

SeedLike = int | tuple[int, ...]


def _check_grads(params: ModelParams, grads: dict[str, np.ndarray]) -> None:
    expected = set(params.trainable_names)
    if set(grads) != expected:
        raise ValueError(f"gradient names {sorted(grads)} do not match trainable parameters")
    for name in expected:
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
    """Plain gradient descent: w <- w - lr * g for every trainable tensor.

    The loss is mean-reduced over the batch, so no extra batch-size division
    happens here.
    """
    _check_grads(params, grads)
    return params.replace({n: params[n] - lr * grads[n] for n in params.trainable_names})


@dataclass
class AdamaxState:
    """Adamax moments: first moment m and elementwise infinity norm u.

    u is nonnegative and non-decreasing until the beta2 decay dominates; the
    step counter t advances by exactly one per step.
    """

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999) -> "AdamaxState":
        zeros = {n: np.zeros_like(params[n]) for n in params.trainable_names}
        return cls(lr=lr, beta1=beta1, beta2=beta2, t=0,
                   m={n: z.copy() for n, z in zeros.items()}, u=zeros)


def adamax_step(
    state: AdamaxState, params: ModelParams, grads: dict[str, np.ndarray]
) -> tuple[AdamaxState, ModelParams]:
    """One Adamax update:

        m <- beta1 * m + (1 - beta1) * g
        u <- max(beta2 * u, |g|)
        w <- w - (lr / (1 - beta1^t)) * m / u

    Positions where u is exactly zero (all gradients so far zero) are
    skipped, which is equivalent to the conventional tiny-epsilon guard for
    that case.
    """
    _check_grads(params, grads)
    t = state.t + 1
    scale = state.lr / (1.0 - state.beta1 ** t)
    new_m, new_u, updates = {}, {}, {}
    for name in params.trainable_names:
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        u = np.maximum(state.beta2 * state.u[name], np.abs(g))
        step = np.divide(m, u, out=np.zeros_like(m), where=u > 0)
        new_m[name] = m
        new_u[name] = u
        updates[name] = params[name] - scale * step
    new_state = AdamaxState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, t=t, m=new_m, u=new_u)
    return new_state, params.replace(updates)


def make_batches(
    dataset: list[ProcessedSignature], batch_size: int, seed: SeedLike, epoch_index: int
) -> list[Batch]:
    """Shuffle the epoch (seeded by ``(seed, epoch_index)``) and cut it into
    contiguous batches; the final short batch is kept.

    Every sample appears in exactly one batch per epoch.
    """
    if not dataset:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    seed_tuple = (seed,) if isinstance(seed, int) else tuple(seed)
    rng = np.random.default_rng(seed_tuple + (epoch_index,))
    order = rng.permutation(len(dataset))
    batches = []
    for start in range(0, len(dataset), batch_size):
        chunk = [dataset[i] for i in order[start : start + batch_size]]
        batches.append(
            Batch(
                np.stack([s.channels for s in chunk]),
                np.array([int(s.label) for s in chunk], dtype=np.int64),
            )
        )
    return batches
