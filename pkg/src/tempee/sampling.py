"""Reverse random sampling of ground-truth future frames as decoder prompts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

MODES = ("train", "test")


@dataclass
class RssSchedule:
    p_start: float = 1.0
    p_end: float = 0.0
    decay_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_end <= self.p_start <= 1.0:
            raise ConfigError(f"need 0 <= p_end <= p_start <= 1, got p_start={self.p_start}, p_end={self.p_end}")
        if self.decay_epochs < 1:
            raise ConfigError(f"decay_epochs must be >= 1, got {self.decay_epochs}")


@dataclass(frozen=True)
class PromptMask:
    keep: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.keep)

    @property
    def n_kept(self) -> int:
        return sum(self.keep)


def keep_probability(sched: RssSchedule, epoch: float) -> float:
    """Linear ramp from ``p_start`` at epoch 0 to ``p_end`` at ``decay_epochs``."""
    frac = min(max(epoch, 0) / sched.decay_epochs, 1.0)
    return sched.p_start + (sched.p_end - sched.p_start) * frac


def sample_mask(sched: RssSchedule, epoch: int, k: int, mode: str = "train", sequence_id: int = 0) -> PromptMask:
    """Draw which of the ``k`` future frames are shown to the decoder.

    Training keeps frames ``1..k-1`` independently with the scheduled
    probability and always keeps frame ``k``. Testing hides every frame.
    Draws are a pure function of ``(seed, epoch, sequence_id)``.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "test":
        return PromptMask((False,) * k)
    p = keep_probability(sched, epoch)
    rng = np.random.default_rng([sched.seed, int(epoch), int(sequence_id)])
    draws = rng.random(k - 1) < p
    return PromptMask(tuple(bool(v) for v in draws) + (True,))


def apply_prompts(targets, mask: PromptMask) -> np.ndarray:
    """Stack of prompt frames: kept frames copied from ``targets``, hidden ones zero.

    Only ``targets.shape`` and the kept frames are read, so an all-hidden mask
    never touches target content.
    """
    shape = tuple(targets.shape)
    if len(shape) < 1 or shape[0] != len(mask):
        raise ContractError(f"mask covers {len(mask)} frames but targets hold {shape[0] if shape else 0}")
    out = np.zeros(shape, dtype=np.float32)
    for i, keep in enumerate(mask.keep):
        if keep:
            out[i] = targets[i]
    return out
