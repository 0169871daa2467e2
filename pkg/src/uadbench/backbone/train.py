"""Training loop, EMA tracking, checkpointing and checkpoint selection."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..errors import ConfigError, TrainingDivergedError


def config_fingerprint(config) -> str:
    """Stable hash of a config dataclass, for checkpoint provenance."""
    blob = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def seed_everything(seed: int, fixed_hardware: bool = False) -> None:
    """Seed all RNGs; fixed-hardware mode also forces deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if fixed_hardware:
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainConfig:
    max_steps: int
    batch_size: int
    learning_rate: float
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    ema_rate: float | None = None
    checkpoint_interval: int = 1
    seed: int = 0
    optimizer: str = "adamw"
    fixed_hardware: bool = False

    def __post_init__(self):
        if self.max_steps <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigError("max_steps, batch_size and learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.ema_rate is not None and not 0.0 <= self.ema_rate < 1.0:
            raise ConfigError(f"ema_rate must lie in [0,1), got {self.ema_rate}")
        if not 1 <= self.checkpoint_interval <= self.max_steps:
            raise ConfigError(
                f"checkpoint_interval must lie in [1, max_steps], got {self.checkpoint_interval}"
            )
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be adamw|sgd, got {self.optimizer!r}")


@dataclass
class Checkpoint:
    step: int
    parameters: dict[str, torch.Tensor]
    ema_parameters: dict[str, torch.Tensor] | None
    fingerprint: str
    extras: dict[str, float] = field(default_factory=dict)

    def load_into(self, network: torch.nn.Module, use_ema: bool = False) -> torch.nn.Module:
        state = self.ema_parameters if (use_ema and self.ema_parameters) else self.parameters
        network.load_state_dict(state)
        return network


def _snapshot(network: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().cpu() for k, v in network.state_dict().items()}


def train_loop(network, batches, loss_fn, config: TrainConfig, fingerprint: str | None = None):
    """Run gradient updates and emit floor(max_steps / interval) checkpoints.

    ``batches`` is an iterable of training batches; ``loss_fn(network, batch)``
    must return a scalar tensor. With EMA enabled, shadow parameters follow
    ema <- r*ema + (1-r)*params after every step. A non-finite loss aborts
    with the step index and the last finite loss value.
    """
    seed_everything(config.seed, config.fixed_hardware)
    if config.optimizer == "adamw":
        opt = torch.optim.AdamW(
            network.parameters(),
            lr=config.learning_rate,
            betas=config.adam_betas,
            weight_decay=config.weight_decay,
        )
    else:
        # Plain gradient descent: no momentum, no weight decay.
        opt = torch.optim.SGD(network.parameters(), lr=config.learning_rate)

    ema = None
    if config.ema_rate is not None:
        ema = {k: v.detach().clone() for k, v in network.state_dict().items()}
    fp = fingerprint if fingerprint is not None else config_fingerprint(config)

    checkpoints = []
    last_finite = math.nan
    batch_iter = iter(batches)
    network.train()
    for step in range(1, config.max_steps + 1):
        try:
            batch = next(batch_iter)
        except StopIteration:
            batch_iter = iter(batches)
            batch = next(batch_iter)
        opt.zero_grad()
        loss = loss_fn(network, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(step, last_finite)
        last_finite = value
        loss.backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                current = network.state_dict()
                for k in ema:
                    if ema[k].dtype.is_floating_point:
                        ema[k].mul_(config.ema_rate).add_(current[k], alpha=1 - config.ema_rate)
                    else:
                        ema[k].copy_(current[k])
        if step % config.checkpoint_interval == 0:
            checkpoints.append(
                Checkpoint(
                    step=step,
                    parameters=_snapshot(network),
                    ema_parameters=None if ema is None else {k: v.clone().cpu() for k, v in ema.items()},
                    fingerprint=fp,
                    extras={"loss": value},
                )
            )
    return checkpoints


def select_checkpoint(checkpoints, scorer) -> Checkpoint:
    """Return the checkpoint maximizing ``scorer``; ties keep the earliest step."""
    if not checkpoints:
        raise ConfigError("no checkpoints to select from")
    best = None
    best_score = -math.inf
    for ckpt in sorted(checkpoints, key=lambda c: c.step):
        score = float(scorer(ckpt))
        if score > best_score:
            best = ckpt
            best_score = score
    return best
