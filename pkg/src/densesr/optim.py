"""L1 loss, Adam, the step learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import PatchPair, batches, prefetch
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, backward, make_result

log = logging.getLogger(__name__)


def l1_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean absolute error; the subgradient at a zero residual is 0."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target_data.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target_data.shape}")
    diff = pred.data - target_data
    n = diff.size
    value = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def _backward(g):
        grad = np.sign(diff) * (g / n)
        if isinstance(target, Tensor):
            return grad, -grad
        return (grad,)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return make_result(value, parents, _backward, "l1_loss")


@dataclass(frozen=True)
class AdamConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-4

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError("Adam epsilon must be positive")


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant rate, divided by ``gamma`` at each drop epoch."""

    base_lr: float = 1e-3
    drop_epochs: tuple[int, ...] = (50, 200)
    gamma: float = 10.0

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        drops = sum(1 for e in self.drop_epochs if e <= epoch)
        return self.base_lr / self.gamma**drops


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    return schedule.lr_at(epoch)


class Adam:
    """Adam with bias correction over a fixed, ordered parameter list."""

    def __init__(self, params: Sequence[Tensor], cfg: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.cfg.lr0 if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise ContractError("adam step called before gradients were populated")
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def moments_by_name(self, net) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        index = {id(p): i for i, p in enumerate(self.params)}
        return {
            name: (self.m[index[id(p)]], self.v[index[id(p)]])
            for name, p in net.named_parameters().items()
            if id(p) in index
        }

    def load_moments(self, net, step: int, moments: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        index = {id(p): i for i, p in enumerate(self.params)}
        for name, p in net.named_parameters().items():
            if name in moments and id(p) in index:
                i = index[id(p)]
                self.m[i] = moments[name][0].astype(p.dtype).copy()
                self.v[i] = moments[name][1].astype(p.dtype).copy()
        self.t = step


def adam_step(optimizer: Adam, lr: float) -> None:
    optimizer.step(lr)


@dataclass
class TrainResult:
    optimizer: Adam
    epoch: int = 0
    iteration_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False


def train(
    net,
    pairs: Sequence[PatchPair],
    cfg: AdamConfig = AdamConfig(),
    schedule: LrSchedule = LrSchedule(),
    epochs: int = 300,
    batch: int = 128,
    seed: int = 0,
    augment: bool = True,
    deterministic: bool = True,
    max_iterations: int | None = None,
    time_budget: float | None = None,
    log_path=None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch L1 training with Adam.

    Stops after ``epochs`` full passes, or earlier once ``max_iterations``
    updates or ``time_budget`` seconds are used up. Without ``deterministic``
    the next batch is assembled on a worker thread while the current one
    trains; both modes yield the same batches.
    """
    if not pairs:
        raise ConfigError("training dataset is empty")
    from .model import save_checkpoint

    opt = optimizer or Adam(net.parameters(), cfg)
    result = TrainResult(opt, epoch=start_epoch)
    log_file = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(["epoch", "iteration", "lr", "loss"])
    started = time.monotonic()
    iteration = 0
    try:
        for epoch in range(start_epoch, start_epoch + epochs):
            lr = schedule.lr_at(epoch)
            it = batches(pairs, batch, seed, epoch, augment, dtype=net.dtype)
            if not deterministic:
                it = prefetch(it)
            total, count = 0.0, 0
            for lr_batch, hr_batch in it:
                opt.zero_grad()
                loss = l1_loss(net(Tensor(lr_batch)), hr_batch)
                backward(loss)
                opt.step(lr)
                value = loss.item()
                iteration += 1
                result.iteration_losses.append(value)
                total += value * len(lr_batch)
                count += len(lr_batch)
                if writer is not None:
                    writer.writerow([epoch, iteration, f"{lr:.6g}", f"{value:.8f}"])
                if (max_iterations is not None and iteration >= max_iterations) or (
                    time_budget is not None and time.monotonic() - started >= time_budget
                ):
                    result.stopped_early = True
                    break
            result.epoch = epoch + 1
            mean_loss = total / count
            result.epoch_losses.append(mean_loss)
            log.info("epoch %d lr %.3g loss %.6f", epoch, lr, mean_loss)
            if on_epoch is not None:
                on_epoch(epoch, mean_loss)
            if checkpoint_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(net, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.ckpt", epoch + 1, opt)
            if result.stopped_early:
                break
    finally:
        if log_file is not None:
            log_file.close()
    return result
