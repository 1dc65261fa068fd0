"""Desk-scale experiments shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .attention import AttentionConfig
from .data import EchoSequence, gen_synthetic, persistence_forecast, split_dataset
from .metrics import categorical_scores, contingency
from .model import ModelConfig, TempEE, extrapolate
from .sampling import RssSchedule
from .training import TrainConfig, evaluate_mse, pixel_pair, train_loop


def small_model_config(n_in: int, k_out: int, image_edge: int, patch: int, d_model: int = 8, heads: int = 2, g: int = 4, g_prime: int = 2, blocks: int = 1) -> ModelConfig:
    return ModelConfig(
        n_in=n_in, k_out=k_out, image_edge=image_edge, patch=patch, d_model=d_model,
        te_blocks=blocks, se_blocks=blocks, tsd_blocks=blocks,
        attention=AttentionConfig(heads=heads, g=g, g_prime=g_prime),
    )


# ---------------------------------------------------------------- single-sequence overfit


@dataclass
class OverfitConfig:
    regime: str = "sparse-stationary"
    data_seed: int = 7
    model_seed: int = 0
    n_in: int = 20
    k_out: int = 20
    image_edge: int = 96
    patch: int = 12
    d_model: int = 8
    steps: int = 2000
    lr_max: float = 1e-3
    target_mse: float = 25.0
    # end the run as soon as the target is met
    stop_at_target: bool = True


@dataclass
class OverfitResult:
    best_mse: float
    steps_to_target: int | None
    steps: int
    seconds: float
    curve: list[tuple[int, float]] = field(default_factory=list)


def overfit_experiment(cfg: OverfitConfig | None = None) -> OverfitResult:
    """Fit one sequence with batch size 1, so every epoch is exactly one optimizer step.

    The monitored MSE is the clamped pixel-space error of a test-mode
    forward (every prompt hidden) on that same sequence.
    """
    cfg = cfg or OverfitConfig()
    model = TempEE(small_model_config(cfg.n_in, cfg.k_out, cfg.image_edge, cfg.patch, cfg.d_model), seed=cfg.model_seed)
    seq = gen_synthetic(cfg.regime, cfg.n_in, cfg.k_out, cfg.image_edge, cfg.image_edge, cfg.data_seed)
    tcfg = TrainConfig(
        epochs=cfg.steps, batch_size=1, lr_max=cfg.lr_max, patience=cfg.steps + 1, seed=cfg.model_seed,
        total_steps=cfg.steps + 1, target_val=cfg.target_mse if cfg.stop_at_target else None,
    )
    started = time.monotonic()
    result = train_loop(model, [seq], [seq], tcfg, RssSchedule(decay_epochs=max(cfg.steps // 2, 1), seed=cfg.model_seed))
    seconds = time.monotonic() - started
    curve = [(row["step"], row["val_loss"]) for row in result.history]
    hit = next((step for step, v in curve if v < cfg.target_mse), None)
    return OverfitResult(result.best_val, hit, result.steps, seconds, curve)


# ---------------------------------------------------------------- generalization vs persistence


@dataclass
class GeneralizationConfig:
    regime: str = "dense-stationary"
    n_sequences: int = 200
    first_seed: int = 0
    n_in: int = 10
    k_out: int = 10
    image_edge: int = 64
    patch: int = 4
    d_model: int = 16
    heads: int = 2
    blocks: int = 1
    epochs: int = 60
    batch_size: int = 12
    lr_max: float = 1e-3
    patience: int = 10
    tau: float = 5.0
    model_seed: int = 0
    # epochs over which ground-truth prompts are withdrawn; None -> half of ``epochs``
    rss_decay_epochs: int | None = 10
    # the fixed last prompt frame is never available at test time, so half the training
    # sequences each epoch are shown the test condition instead
    hidden_fraction: float = 0.5
    max_seconds: float | None = None


@dataclass
class GeneralizationResult:
    csi_model: float
    csi_persistence: float
    val_mse: float
    epochs_run: int
    steps: int
    seconds: float
    n_train: int
    n_val: int

    @property
    def margin(self) -> float:
        return self.csi_model - self.csi_persistence


def mean_csi(preds: list[np.ndarray], truths: list[np.ndarray], tau: float) -> float:
    """Mean CSI over every (sequence, lead) pair where it is defined."""
    values = []
    for pred, truth in zip(preds, truths):
        for i in range(len(truth)):
            csi = categorical_scores(contingency(pred[i], truth[i], tau))["csi"]
            if not np.isnan(csi):
                values.append(csi)
    return float(np.mean(values)) if values else float("nan")


def make_sequences(cfg: GeneralizationConfig) -> tuple[list[EchoSequence], list[EchoSequence]]:
    split = split_dataset(range(cfg.first_seed, cfg.first_seed + cfg.n_sequences))
    make = lambda s: gen_synthetic(cfg.regime, cfg.n_in, cfg.k_out, cfg.image_edge, cfg.image_edge, s)  # noqa: E731
    return [make(s) for s in split.train], [make(s) for s in split.val]


def generalization_experiment(cfg: GeneralizationConfig | None = None, log: TextIO | None = None) -> GeneralizationResult:
    cfg = cfg or GeneralizationConfig()
    train, val = make_sequences(cfg)
    model = TempEE(
        small_model_config(cfg.n_in, cfg.k_out, cfg.image_edge, cfg.patch, cfg.d_model, heads=cfg.heads, blocks=cfg.blocks),
        seed=cfg.model_seed,
    )
    tcfg = TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr_max=cfg.lr_max, patience=cfg.patience,
        seed=cfg.model_seed, max_seconds=cfg.max_seconds, hidden_fraction=cfg.hidden_fraction,
    )
    started = time.monotonic()
    decay = cfg.rss_decay_epochs or max(cfg.epochs // 2, 1)
    result = train_loop(model, train, val, tcfg, RssSchedule(decay_epochs=decay, seed=cfg.model_seed), log=log)
    seconds = time.monotonic() - started
    pairs = [pixel_pair(s) for s in val]
    truths = [fut for _, fut in pairs]
    preds = [extrapolate(model, obs) for obs, _ in pairs]
    base = [persistence_forecast(obs, cfg.k_out) for obs, _ in pairs]
    return GeneralizationResult(
        csi_model=mean_csi(preds, truths, cfg.tau),
        csi_persistence=mean_csi(base, truths, cfg.tau),
        val_mse=evaluate_mse(model, val, cfg.batch_size),
        epochs_run=result.epochs_run,
        steps=result.steps,
        seconds=seconds,
        n_train=len(train),
        n_val=len(val),
    )
