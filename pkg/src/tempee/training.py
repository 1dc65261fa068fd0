"""AdamW, warmup + cosine learning rate, early stopping and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from .data import EchoSequence, dbz_to_pixel
from .errors import ConfigError, ContractError, NumericError, ScheduleExhausted
from .model import TempEE, extrapolate, save_checkpoint
from .sampling import RssSchedule, apply_prompts, sample_mask
from .tensor import Tape, Tensor, mse_loss


@dataclass
class LrSchedule:
    lr_max: float = 1e-3
    warmup_steps: int = 5
    total_steps: int = 100
    # kept for configs that size the warmup by model width; the linear ramp ignores it
    d_model: int | None = None

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ConfigError(f"lr_max must be positive, got {self.lr_max}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")

    @classmethod
    def with_warmup_fraction(cls, total_steps: int, lr_max: float = 1e-3, fraction: float = 0.05) -> "LrSchedule":
        return cls(lr_max, max(1, int(round(fraction * total_steps))), total_steps)


def lr_at(sched: LrSchedule, t: float) -> float:
    """Linear ramp to ``lr_max`` over ``warmup_steps``, then half-cosine down to 0 at ``total_steps``."""
    if t < 0:
        raise ConfigError(f"step must be non-negative, got {t}")
    if t > sched.total_steps:
        raise ScheduleExhausted(f"step {t} is past total_steps={sched.total_steps}")
    w, T = sched.warmup_steps, sched.total_steps
    if t <= w:
        return sched.lr_max * t / w
    return 0.5 * (1.0 + math.cos(math.pi * (t - w) / (T - w))) * sched.lr_max


# ---------------------------------------------------------------- optimizer


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = math.inf
    since_best: int = 0
    seed: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: TrainState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One bias-corrected Adam update with decay applied directly to the weights."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data.astype(np.float64)
        data = data - lr * weight_decay * data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = data.astype(p.dtype)


@dataclass
class EarlyStopping:
    """Counts epochs since the last strict improvement of the monitored loss."""

    patience: int = 10
    best: float = math.inf
    since_best: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def update(self, value: float) -> bool:
        """Record one epoch; returns True when ``value`` is a new best."""
        if value < self.best:
            self.best = value
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.patience


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 12
    lr_max: float = 1e-3
    warmup_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    patience: int = 10
    seed: int = 0
    # None -> epochs * batches per epoch + 1, so the last update still has a positive rate
    total_steps: int | None = None
    max_seconds: float | None = None
    # epochs before stagnation counts against patience; None -> the prompt schedule's decay length
    patience_delay: int | None = None
    # stop once the validation loss drops to this value
    target_val: float | None = None
    # share of training sequences per epoch shown the test-time condition (every prompt hidden,
    # the last frame included); 0 keeps the plain train-mode masks
    hidden_fraction: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if not 0 <= self.hidden_fraction <= 1:
            raise ConfigError(f"hidden_fraction must be in [0, 1], got {self.hidden_fraction}")


@dataclass
class TrainResult:
    best_val: float
    best_epoch: int
    steps: int
    epochs_run: int
    stopped_early: bool
    target_reached: bool = False
    history: list[dict] = field(default_factory=list)
    best_arrays: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def pixel_pair(seq: EchoSequence) -> tuple[np.ndarray, np.ndarray]:
    """(observed, future) frame stacks in pixel space."""
    frames = seq.frames if seq.value_space == "pixel" else dbz_to_pixel(seq.frames)
    frames = frames.astype(np.float32)
    if seq.n_in is None:
        raise ContractError("sequence has no observed/future split (n_in unset)")
    return frames[: seq.n_in], frames[seq.n_in :]


def evaluate_mse(model: TempEE, seqs: Sequence[EchoSequence], batch_size: int = 12) -> float:
    """Mean pixel-space MSE of clamped test-mode predictions (all prompts hidden)."""
    if not seqs:
        raise ConfigError("no sequences to evaluate")
    total, count = 0.0, 0
    for start in range(0, len(seqs), batch_size):
        pairs = [pixel_pair(s) for s in seqs[start : start + batch_size]]
        obs = np.stack([p[0] for p in pairs])
        fut = np.stack([p[1] for p in pairs]).astype(np.float64)
        pred = extrapolate(model, obs).astype(np.float64)
        total += float(((pred - fut) ** 2).sum())
        count += fut.size
    return total / count


def prompt_mask(rss: RssSchedule, cfg: TrainConfig, epoch: int, k: int, seq_id: int):
    """Training mask for one sequence; a ``cfg.hidden_fraction`` share get the all-hidden test mask."""
    if cfg.hidden_fraction > 0 and np.random.default_rng([cfg.seed, epoch, seq_id, 1]).random() < cfg.hidden_fraction:
        return sample_mask(rss, epoch, k, "test")
    return sample_mask(rss, epoch, k, "train", seq_id)


def train_loop(
    model: TempEE,
    train: Sequence[EchoSequence],
    val: Sequence[EchoSequence],
    cfg: TrainConfig | None = None,
    rss: RssSchedule | None = None,
    out_dir: str | Path | None = None,
    log: TextIO | None = None,
    val_fn: Callable[[TempEE, int], float] | None = None,
) -> TrainResult:
    """Train with MSE in pixel space, validate every epoch, keep the best weights.

    Prompts follow the reverse random sampling schedule ``rss``; validation
    runs with every prompt hidden. Training stops after ``cfg.patience``
    epochs without strict improvement, after ``cfg.epochs`` epochs, or when
    the step budget is spent. The best weights are loaded back into ``model``
    before returning and, with ``out_dir``, written to ``best.ckpt``.
    """
    cfg = cfg or TrainConfig()
    rss = rss or RssSchedule(seed=cfg.seed)
    if not train:
        raise ConfigError("training split is empty")
    if not val and val_fn is None:
        raise ConfigError("validation split is empty")
    batches = math.ceil(len(train) / cfg.batch_size)
    total = cfg.total_steps or cfg.epochs * batches + 1
    sched = LrSchedule.with_warmup_fraction(total, cfg.lr_max, cfg.warmup_fraction)
    state = TrainState(seed=cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train.log", "w")
    sinks = [s for s in (log, log_file) if s is not None]
    for s in sinks:
        s.write("epoch\tstep\tlr\ttrain_loss\tval_loss\tepochs_since_best\n")

    # while prompts are still being withdrawn, validation (all hidden) is not comparable
    # with training conditions, so stagnation there does not count towards patience
    delay = rss.decay_epochs if cfg.patience_delay is None else cfg.patience_delay
    pairs = [pixel_pair(s) for s in train]
    result = TrainResult(math.inf, -1, 0, 0, False, best_arrays=model.state_arrays())
    started = time.monotonic()
    lr = 0.0
    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                # steps are counted from 1 so the warmup never yields a zero rate
                if state.step + 1 >= total:
                    break
                idx = order[start : start + cfg.batch_size]
                obs = np.stack([pairs[i][0] for i in idx])
                fut = np.stack([pairs[i][1] for i in idx])
                prompts = np.stack([apply_prompts(fut[j], prompt_mask(rss, cfg, epoch, len(fut[j]), int(i))) for j, i in enumerate(idx)])
                for p in model.params.values():
                    p.zero_grad()
                with Tape() as tape:
                    loss = mse_loss(model.forward(obs, prompts), fut)
                tape.backward(loss)
                lr = lr_at(sched, state.step + 1)
                adamw_step(
                    model.params,
                    {k: p.grad for k, p in model.params.items()},
                    state,
                    lr,
                    (cfg.beta1, cfg.beta2),
                    cfg.eps,
                    cfg.weight_decay,
                )
                losses.append(loss.item())
            val_loss = val_fn(model, epoch) if val_fn is not None else evaluate_mse(model, val, cfg.batch_size)
            if not math.isfinite(val_loss):
                raise NumericError(f"validation loss is {val_loss} at epoch {epoch}")
            improved = stopper.update(val_loss)
            if improved:
                result.best_val, result.best_epoch = val_loss, epoch
                result.best_arrays = model.state_arrays()
                if out is not None:
                    save_checkpoint(out / "best.ckpt", model)
            state.best_val, state.since_best = stopper.best, stopper.since_best
            train_loss = float(np.mean(losses)) if losses else math.nan
            row = {"epoch": epoch, "step": state.step, "lr": lr, "train_loss": train_loss, "val_loss": val_loss, "since_best": stopper.since_best}
            result.history.append(row)
            for s in sinks:
                s.write(f"{epoch}\t{state.step}\t{lr:.6g}\t{train_loss:.6g}\t{val_loss:.6g}\t{stopper.since_best}\n")
                s.flush()
            result.epochs_run = epoch + 1
            if cfg.target_val is not None and val_loss <= cfg.target_val:
                result.target_reached = True
                break
            # stagnant epochs inside the delay window are not counted
            if min(stopper.since_best, epoch + 1 - delay) >= stopper.patience:
                result.stopped_early = True
                break
            if state.step + 1 >= total:
                break
            if cfg.max_seconds is not None and time.monotonic() - started > cfg.max_seconds:
                break
    finally:
        if log_file is not None:
            log_file.close()
    result.steps = state.step
    model.load_arrays(result.best_arrays)
    return result
