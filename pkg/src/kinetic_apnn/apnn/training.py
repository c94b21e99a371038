"""Deterministic first-order training of the residual networks.

Full-batch gradient steps with moment-averaged adaptive scaling and bias
correction; everything is seeded, single-threaded numpy, so a rerun with the
same configuration reproduces the trajectory bit for bit.  Checkpoints carry
the flat parameter vector, the optimizer moments and a configuration hash.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .loss import (
    CollocationBatch,
    DivergedLoss,
    LossAssembler,
    LossBreakdown,
    SamplingConfig,
    sample_collocation,
)
from .network import NetworkBundle


@dataclass
class TrainConfig:
    """Optimizer schedule and bookkeeping knobs."""

    n_steps: int = 5000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 250
    resample_every: int = 0  # 0 keeps the initial batch (deterministic default)
    target_loss: Optional[float] = None
    seed: int = 0
    log_path: Optional[str] = None
    lr_decay_steps: int = 0  # halve the rate every this many steps (0 = never)


@dataclass
class TrainState:
    """Optimizer state; deterministic given the seed and configuration."""

    params: np.ndarray
    moment1: np.ndarray
    moment2: np.ndarray
    step: int
    seed: int
    loss_history: list = field(default_factory=list)

    @staticmethod
    def fresh(n_params: int, seed: int) -> "TrainState":
        return TrainState(
            params=np.zeros(n_params),
            moment1=np.zeros(n_params),
            moment2=np.zeros(n_params),
            step=0,
            seed=seed,
        )


@dataclass
class Checkpoint:
    step: int
    params: np.ndarray
    loss: float

    def save(self, path, config_hash: str) -> None:
        np.savez(
            path,
            step=self.step,
            params=self.params,
            loss=self.loss,
            config_hash=config_hash,
        )

    @staticmethod
    def load(path) -> "Checkpoint":
        data = np.load(path, allow_pickle=False)
        return Checkpoint(
            step=int(data["step"]),
            params=data["params"],
            loss=float(data["loss"]),
        )


def adam_step(state: TrainState, grad: np.ndarray, lr: float,
              beta1: float, beta2: float, eps_hat: float) -> None:
    """Bias-corrected moment update, in place."""
    state.step += 1
    state.moment1 = beta1 * state.moment1 + (1.0 - beta1) * grad
    state.moment2 = beta2 * state.moment2 + (1.0 - beta2) * grad * grad
    m_hat = state.moment1 / (1.0 - beta1**state.step)
    v_hat = state.moment2 / (1.0 - beta2**state.step)
    state.params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps_hat)


def train(
    bundle: NetworkBundle,
    assembler: LossAssembler,
    sampling: SamplingConfig,
    initial_provider,
    config: TrainConfig,
    batch: Optional[CollocationBatch] = None,
):
    """Minimize the residual loss; returns (state, checkpoints).

    The collocation batch is fixed unless ``resample_every`` is positive.
    Raises DivergedLoss when the loss passes the runaway threshold.
    """
    if batch is None:
        batch = sample_collocation(sampling, config.seed)
    state = TrainState.fresh(bundle.parameter_count(), config.seed)
    state.params = bundle.get_params()
    checkpoints: list[Checkpoint] = []
    log_file = open(config.log_path, "w") if config.log_path else None
    t0 = time.perf_counter()
    try:
        for step in range(config.n_steps):
            if (
                config.resample_every
                and step > 0
                and step % config.resample_every == 0
            ):
                batch = sample_collocation(
                    sampling, config.seed + step
                )
            breakdown, grad = assembler.assemble(
                bundle, batch, initial_provider, want_grad=True
            )
            if breakdown.total > assembler.config.diverged_threshold:
                raise DivergedLoss(
                    f"loss {breakdown.total:.3e} exceeded the threshold at "
                    f"step {step}"
                )
            lr = config.learning_rate
            if config.lr_decay_steps:
                lr = lr * 0.5 ** (step // config.lr_decay_steps)
            record = {"step": step, "total": breakdown.total}
            state.loss_history.append(
                {"step": step, "total": breakdown.total,
                 **{k: float(np.sum(v)) for k, v in breakdown.weighted.items()}}
            )
            if log_file:
                record.update(
                    {k: float(np.sum(v)) for k, v in breakdown.weighted.items()}
                )
                record["wall_time"] = time.perf_counter() - t0
                log_file.write(json.dumps(record) + "\n")
            if step % config.checkpoint_every == 0:
                checkpoints.append(
                    Checkpoint(step=step, params=bundle.get_params(),
                               loss=breakdown.total)
                )
            if (
                config.target_loss is not None
                and breakdown.total < config.target_loss
            ):
                break
            adam_step(state, grad, lr, config.beta1, config.beta2,
                      config.adam_eps)
            bundle.set_params(state.params)
        final, _ = assembler.assemble(
            bundle, batch, initial_provider, want_grad=False
        )
        checkpoints.append(
            Checkpoint(step=state.step, params=bundle.get_params(),
                       loss=final.total)
        )
        state.loss_history.append(
            {"step": state.step, "total": final.total,
             **{k: float(np.sum(v)) for k, v in final.weighted.items()}}
        )
        return state, checkpoints
    finally:
        if log_file:
            log_file.close()
