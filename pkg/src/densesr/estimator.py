"""scikit-learn style wrappers so the network and baselines drop into pipelines and grid searches.

Images are passed as stacks ``X[n, h, w]`` with values in [0, 1]; a single
2-D image is accepted and treated as a stack of one.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import PatchPair
from .imgproc import BICUBIC_AA, KINDS, downsample, upscale
from .metrics import psnr
from .model import Network, NetworkConfig, build_network, load_checkpoint
from .optim import AdamConfig, LrSchedule, train


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate an image stack and return it as ``float64[n, h, w]``."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty stack of 2-D images, got shape {np.shape(X)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_pairs(X, y, scale: int) -> tuple[np.ndarray, np.ndarray]:
    X, y = check_images(X, "X"), check_images(y, "y")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} images but y has {len(y)}")
    if y.shape[1:] != (X.shape[1] * scale, X.shape[2] * scale):
        raise ValueError(f"y images {y.shape[1:]} are not {scale}x the size of X images {X.shape[1:]}")
    return X, y


def _mean_psnr(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean([psnr(p, t) for p, t in zip(pred, y)]))


class DenseSuperResolver(RegressorMixin, BaseEstimator):
    """Dense-block super-resolution network trained with L1 loss and Adam.

    ``fit(X, y)`` takes LR inputs and HR targets; ``predict`` returns HR
    estimates; ``score`` is the mean PSNR in dB.
    """

    def __init__(
        self,
        scale: int = 2,
        preset: str = "small",
        epochs: int = 300,
        batch_size: int = 128,
        lr: float = 1e-3,
        drop_epochs: tuple[int, ...] = (50, 200),
        gamma: float = 10.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-4,
        augment: bool = True,
        seed: int = 0,
        max_iterations: int | None = None,
        time_budget: float | None = None,
    ):
        self.scale = scale
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.drop_epochs = drop_epochs
        self.gamma = gamma
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.augment = augment
        self.seed = seed
        self.max_iterations = max_iterations
        self.time_budget = time_budget

    def fit(self, X, y):
        X, y = check_pairs(X, y, self.scale)
        self.network_ = build_network(NetworkConfig.preset(self.preset, self.scale), seed=self.seed)
        pairs = [PatchPair(lr, hr, f"sample{i}") for i, (lr, hr) in enumerate(zip(X, y))]
        result = train(
            self.network_,
            pairs,
            AdamConfig(self.lr, self.beta1, self.beta2, self.epsilon),
            LrSchedule(self.lr, tuple(self.drop_epochs), self.gamma),
            epochs=self.epochs,
            batch=self.batch_size,
            seed=self.seed,
            augment=self.augment,
            max_iterations=self.max_iterations,
            time_budget=self.time_budget,
        )
        self.loss_curve_ = result.epoch_losses
        self.n_iter_ = len(result.iteration_losses)
        self.n_epochs_ = result.epoch
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_images(X)
        return self.network_.predict(X[:, None])[:, 0].astype(np.float64)

    def score(self, X, y, sample_weight=None) -> float:
        return _mean_psnr(self.predict(X), check_images(y, "y"))

    @classmethod
    def from_network(cls, net: Network, **params) -> DenseSuperResolver:
        est = cls(scale=net.cfg.scale, **params)
        est.network_ = net
        return est

    @classmethod
    def from_checkpoint(cls, path, **params) -> DenseSuperResolver:
        return cls.from_network(load_checkpoint(path), **params)


class InterpolationUpscaler(RegressorMixin, BaseEstimator):
    """Nearest, bilinear or bicubic upscaling; ``fit`` only validates."""

    def __init__(self, kind: str = "bicubic", scale: int = 2):
        self.kind = kind
        self.scale = scale

    def fit(self, X, y=None):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if y is None:
            check_images(X)
        else:
            check_pairs(X, y, self.scale)
        self.fitted_ = True
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "fitted_")
        return upscale(check_images(X), self.scale, self.kind)

    def score(self, X, y, sample_weight=None) -> float:
        return _mean_psnr(self.predict(X), check_images(y, "y"))


class BicubicDegrader(TransformerMixin, BaseEstimator):
    """HR -> LR by antialiased bicubic downsampling, the same path used to build training pairs."""

    def __init__(self, scale: int = 2):
        self.scale = scale

    def fit(self, X, y=None):
        check_images(X)
        self.fitted_ = True
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "fitted_")
        return downsample(check_images(X), self.scale, BICUBIC_AA)
