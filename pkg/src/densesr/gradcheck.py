"""Central finite-difference verification of every backward rule, in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ops import Conv2dLayer, DenseBlock, DenseBlockConfig, concat_channels, conv2d, pixel_shuffle
from .optim import l1_loss
from .tensor import Tensor, backward, no_grad, relu, sigmoid, tensor_sum

STEP = 1e-4
TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def check_gradients(name: str, loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = STEP) -> GradCheckResult:
    start = time.perf_counter()
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks need float64 tensors")
        t.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for t in inputs:
        worst = max(worst, relative_error(t.grad, numeric_grad(loss_fn, t, step)))
    return GradCheckResult(name, worst, time.perf_counter() - start)


def _away_from_zero(rng: np.random.Generator, shape, low=0.05, high=2.0) -> np.ndarray:
    mag = rng.uniform(low, high, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(out * Tensor(weights))


def _checks(seed: int) -> list[tuple[str, Callable[[], GradCheckResult]]]:
    rng = np.random.default_rng(seed)

    def elementwise():
        a, b = _leaf(rng.uniform(-2, 2, (3, 4))), _leaf(rng.uniform(-2, 2, (3, 4)))
        w = rng.normal(size=(3, 4))
        return check_gradients("add/mul/scale", lambda: _weighted_sum((a + b) * a * 0.5 + b, w), [a, b])

    def relu_check():
        x = _leaf(_away_from_zero(rng, (4, 5)))
        w = rng.normal(size=(4, 5))
        return check_gradients("relu", lambda: _weighted_sum(relu(x), w), [x])

    def sigmoid_check():
        x = _leaf(rng.uniform(-2, 2, (4, 5)))
        w = rng.normal(size=(4, 5))
        return check_gradients("sigmoid", lambda: _weighted_sum(sigmoid(x), w), [x])

    def conv_check():
        x = _leaf(rng.uniform(-2, 2, (2, 3, 5, 4)))
        layer = Conv2dLayer(3, 2, rng, np.float64)
        layer.bias.data[:] = rng.normal(size=2)
        w = rng.normal(size=(2, 2, 5, 4))
        return check_gradients("conv2d", lambda: _weighted_sum(layer(x), w), [x, layer.weight, layer.bias])

    def concat_check():
        a, b = _leaf(rng.uniform(-2, 2, (2, 3, 3))), _leaf(rng.uniform(-2, 2, (1, 3, 3)))
        w = rng.normal(size=(3, 3, 3))
        return check_gradients("concat", lambda: _weighted_sum(concat_channels([a, b]), w), [a, b])

    def shuffle_check():
        x = _leaf(rng.uniform(-2, 2, (8, 2, 3)))
        w = rng.normal(size=(2, 4, 6))
        return check_gradients("pixel_shuffle", lambda: _weighted_sum(pixel_shuffle(x, 2), w), [x])

    def l1_check():
        target = rng.uniform(0, 1, (2, 6))
        pred = _leaf(target + _away_from_zero(rng, (2, 6), 0.05, 0.5))
        return check_gradients("l1_loss", lambda: l1_loss(pred, target), [pred])

    def dense_check():
        block = DenseBlock(DenseBlockConfig(m=2, k=2, in_channels=2), rng, np.float64)
        for layer in block.layers:
            layer.bias.data[:] = rng.uniform(0.1, 0.3, size=layer.out_channels)
        x = _leaf(rng.uniform(-2, 2, (2, 4, 4)))
        w = rng.normal(size=(4, 4, 4))
        return check_gradients("dense_block", lambda: _weighted_sum(block(x), w), [x, *block.parameters()])

    def network_check():
        from .model import Network, NetworkConfig

        net = Network(NetworkConfig.tiny(2), seed=seed, dtype=np.float64)
        for p in net.parameters():
            if p.ndim == 1:
                p.data[:] = rng.uniform(0.05, 0.2, size=p.shape)
        x = _leaf(rng.uniform(0, 1, (1, 4, 4)))
        with no_grad():
            target = np.clip(net(x).data + _away_from_zero(rng, (1, 8, 8), 0.02, 0.1), 0, 1)
        return check_gradients("network", lambda: l1_loss(net(x), target), [x, *net.parameters()])

    return [
        ("add/mul/scale", elementwise),
        ("relu", relu_check),
        ("sigmoid", sigmoid_check),
        ("conv2d", conv_check),
        ("concat", concat_check),
        ("pixel_shuffle", shuffle_check),
        ("l1_loss", l1_check),
        ("dense_block", dense_check),
        ("network", network_check),
    ]


CHECK_NAMES = tuple(name for name, _ in _checks(0))


def run_gradchecks(seed: int = 0, only: Sequence[str] | None = None) -> list[GradCheckResult]:
    return [fn() for name, fn in _checks(seed) if only is None or name in only]
