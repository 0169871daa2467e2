"""Uniform detector interface and the method registry."""

from __future__ import annotations

import numpy as np
import torch

from ..backbone import select_checkpoint
from ..errors import ConfigError

METHOD_REGISTRY: dict[str, type] = {}

# Checkpoint selection probes at most this many validation slices.
PROBE_SLICES = 8


def register(cls):
    METHOD_REGISTRY[cls.name] = cls
    return cls


class Detector:
    """A fit-once, score-per-slice anomaly detector.

    ``fit`` consumes healthy training slices (N,H,W) in [0,1]; ``score``
    maps one (H,W) slice to a same-shaped anomaly map where higher values
    mean more anomalous.
    """

    name = "base"
    checkpoint_steps: tuple[int, ...] = ()
    selected_step: int | None = None

    def fit(self, train_slices: np.ndarray, val_slices: np.ndarray, seed: int) -> None:
        raise NotImplementedError

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score_batch(self, slices: np.ndarray) -> list[np.ndarray]:
        return [self.score(s) for s in slices]


def finish_training(model, checkpoints, val_slices, eval_loss, use_ema: bool = False):
    """Load the checkpoint with the lowest validation loss into the model.

    The loss is evaluated on a fixed probe batch of at most PROBE_SLICES
    validation slices; ``eval_loss(model, batch)`` must be deterministic
    so checkpoints are compared on identical inputs. Without validation
    slices the last checkpoint wins. Returns the chosen checkpoint.
    """
    if val_slices is None or len(val_slices) == 0 or len(checkpoints) == 1:
        chosen = checkpoints[-1]
    else:
        probe = np.asarray(val_slices, dtype=np.float32)[:PROBE_SLICES]
        batch = torch.from_numpy(probe[:, None].copy())

        def scorer(ckpt):
            ckpt.load_into(model, use_ema=use_ema)
            model.eval()
            with torch.no_grad():
                return -float(eval_loss(model, batch))

        chosen = select_checkpoint(checkpoints, scorer)
    chosen.load_into(model, use_ema=use_ema)
    return chosen


def slice_stream(slices: np.ndarray, batch_size: int, seed: int):
    """Infinite stream of (B,1,H,W) float tensors sampled with replacement."""
    slices = np.asarray(slices, dtype=np.float32)
    if slices.ndim != 3 or slices.shape[0] == 0:
        raise ConfigError(f"expected nonempty (N,H,W) slices, got shape {slices.shape}")
    rng = np.random.default_rng(seed)
    n = slices.shape[0]
    while True:
        idx = rng.integers(0, n, size=batch_size)
        yield torch.from_numpy(slices[idx][:, None].copy())


def to_tensor(slice2d: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(slice2d, dtype=np.float32))[None, None]


def make_detector(name: str, **kwargs) -> Detector:
    if name not in METHOD_REGISTRY:
        raise ConfigError(f"unknown method {name!r}; available: {sorted(METHOD_REGISTRY)}")
    return METHOD_REGISTRY[name](**kwargs)
