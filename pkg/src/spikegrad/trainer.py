"""Training loop: AdamW under a one-cycle schedule, evaluation and the LR range test."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .errors import ContractError, TrainingError
from .losses import cross_entropy
from .network import Network, NetworkSpec
from .optim import OptimizerState, adamw_step, one_cycle_lr
from .tensor import Tape, backward, no_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    timesteps: int = 10
    weight_decay: float = 0.01
    max_lr: float = 1e-3
    seed: int = 0
    dropout_p: float = 0.5
    reset_mode: str = "soft"
    bn_enabled: bool = True
    val_fraction: float = 0.1
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.timesteps < 1:
            raise ContractError("timesteps must be >= 1")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if not 0 <= self.dropout_p < 1:
            raise ContractError("dropout_p must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    lr: float


def write_metrics_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for m in history:
            writer.writerow([m.epoch] + [repr(float(getattr(m, c))) for c in METRIC_COLUMNS[1:]])


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def loss_and_accuracy(net: Network, data: Dataset, timesteps: int, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy of argmax over summed output currents."""
    if timesteps < 1:
        raise ContractError("timesteps must be >= 1")
    if len(data) == 0:
        return math.nan, math.nan
    was_training = net.training
    net.eval()
    total_loss, correct = 0.0, 0
    try:
        with no_grad():
            for xb, yb in data.batches(batch_size):
                logits, _ = net.forward(xb, timesteps)
                total_loss += float(cross_entropy(logits, yb).item()) * len(yb)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
    finally:
        net.train(was_training)
    return total_loss / len(data), correct / len(data)


def evaluate(model: Union[Checkpoint, Network], data: Dataset, timesteps: int, batch_size: int = 64) -> float:
    """Classification accuracy with ``timesteps`` unroll steps."""
    net = model.to_network() if isinstance(model, Checkpoint) else model
    return loss_and_accuracy(net, data, timesteps, batch_size)[1]


def train(net: Union[Network, NetworkSpec], data: Dataset, cfg: TrainConfig,
          val_data: Optional[Dataset] = None, on_epoch: Optional[Callable] = None):
    """Train with BPTT and AdamW; returns ``(checkpoint, history)``.

    Without ``val_data`` a ``cfg.val_fraction`` split of ``data`` is held out.
    A non-finite loss aborts with :class:`TrainingError` carrying the last
    checkpoint taken at an epoch boundary.
    """
    if isinstance(net, NetworkSpec):
        net = Network(net, seed=cfg.seed)
    if val_data is None and cfg.val_fraction > 0:
        data, val_data = data.split(cfg.val_fraction, seed=cfg.seed)
    meta = {"seed": cfg.seed, "timesteps": cfg.timesteps, "epochs": cfg.epochs}
    opt = OptimizerState()
    history: list[EpochMetrics] = []
    good = Checkpoint.from_network(net, {**meta, "epochs_completed": 0}, opt)
    if cfg.epochs == 0:
        return good, history
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    lr = one_cycle_lr(0, total_steps, cfg.max_lr)
    net.train()
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, correct, seen = 0.0, 0, 0
        for xb, yb in data.batches(cfg.batch_size, shuffle_seed=_epoch_seed(cfg.seed, epoch)):
            lr = one_cycle_lr(step, total_steps, cfg.max_lr)
            net.zero_grad()
            with Tape():
                logits, _ = net.forward(xb, cfg.timesteps)
                loss = cross_entropy(logits, yb)
                value = float(loss.item())
                if not math.isfinite(value):
                    raise TrainingError(f"loss became {value} at epoch {epoch}, step {step}", good, history)
                backward(loss)
            try:
                adamw_step(net.parameters(), opt, lr, cfg.weight_decay)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, step {step}", good, history) from None
            loss_sum += value * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
            step += 1
        if val_data is not None and len(val_data):
            val_loss, val_acc = loss_and_accuracy(net, val_data, cfg.timesteps, cfg.eval_batch_size)
        else:
            val_loss, val_acc = math.nan, math.nan
        metrics = EpochMetrics(epoch, loss_sum / seen, val_loss, correct / seen, val_acc, lr)
        history.append(metrics)
        log.info("epoch %d train_loss=%.4f val_loss=%.4f train_acc=%.4f val_acc=%.4f lr=%.3g",
                 epoch, metrics.train_loss, val_loss, metrics.train_acc, val_acc, lr)
        good = Checkpoint.from_network(net, {**meta, "epochs_completed": epoch}, opt)
        if on_epoch is not None:
            on_epoch(metrics)
    return good, history


@dataclass
class RangeTestResult:
    suggested_lr: float
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)
    diverged_at: Optional[float] = None


def range_test(step_fn: Callable[[float], float], lr_min: float, lr_max: float, steps: int = 100,
               smoothing: float = 0.98, divergence: float = 4.0) -> RangeTestResult:
    """Exponential learning-rate sweep around an arbitrary training step.

    ``step_fn(lr)`` performs one update and returns the loss it measured.
    The suggestion is one decade below the first rate whose bias-corrected
    smoothed loss exceeds ``divergence`` times the running minimum; if that
    never happens ``lr_max`` is returned with a warning.
    """
    if not 0 < lr_min < lr_max:
        raise ContractError(f"need 0 < lr_min < lr_max, got {lr_min}, {lr_max}")
    if steps < 2:
        raise ContractError("range test needs at least two steps")
    result = RangeTestResult(lr_max)
    ratio = (lr_max / lr_min) ** (1.0 / (steps - 1))
    avg, best = 0.0, math.inf
    for i in range(steps):
        lr = lr_min * ratio ** i
        loss = float(step_fn(lr))
        if i == 0 and not math.isfinite(loss):
            raise TrainingError(f"loss is {loss} at the first range-test step; check data and model")
        result.lrs.append(lr)
        result.losses.append(loss)
        if not math.isfinite(loss):
            result.diverged_at = lr
            break
        avg = smoothing * avg + (1 - smoothing) * loss
        smooth = avg / (1 - smoothing ** (i + 1))
        result.smoothed.append(smooth)
        best = min(best, smooth)
        if i > 0 and smooth > divergence * best:
            result.diverged_at = lr
            break
    if result.diverged_at is None:
        warnings.warn(f"loss did not diverge up to lr={lr_max:g}; suggesting lr_max", RuntimeWarning)
        result.suggested_lr = lr_max
    else:
        result.suggested_lr = result.diverged_at / 10.0
    return result


def lr_range_test(net: Union[Network, NetworkSpec], data: Dataset, lr_min: float = 1e-6, lr_max: float = 1.0,
                  steps: int = 100, cfg: Optional[TrainConfig] = None) -> RangeTestResult:
    """Range test on a throwaway copy of ``net`` trained with AdamW."""
    cfg = cfg or TrainConfig()
    model = Network(net, seed=cfg.seed) if isinstance(net, NetworkSpec) else net.copy()
    model.train()
    opt = OptimizerState()
    epoch = [0]
    stream = iter(())

    def next_batch():
        nonlocal stream
        for batch in stream:
            return batch
        epoch[0] += 1
        stream = data.batches(cfg.batch_size, shuffle_seed=_epoch_seed(cfg.seed, epoch[0]))
        return next(stream)

    def step_fn(lr):
        xb, yb = next_batch()
        model.zero_grad()
        with Tape():
            logits, _ = model.forward(xb, cfg.timesteps)
            loss = cross_entropy(logits, yb)
            value = float(loss.item())
            if math.isfinite(value):
                backward(loss)
        if not math.isfinite(value):
            return value
        try:
            adamw_step(model.parameters(), opt, lr, cfg.weight_decay)
        except TrainingError:
            return math.nan
        return value

    return range_test(step_fn, lr_min, lr_max, steps)
