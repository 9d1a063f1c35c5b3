"""scikit-learn style wrappers around the pipeline.

* :class:`STFTTransformer` maps IQ frames ``[M, A, L, 2]`` to standardized
  STFT examples ``[M, 2A, T, L/T]``;
* :class:`ChannelInpaintingPretrainer` fits an in-painting network and
  ``transform`` returns encoder latents;
* :class:`BandwidthRegressor` fits the bandwidth network, optionally from a
  pretrained encoder, and ``predict`` returns the length-F target vectors.

The wrappers hold hyperparameters only in ``__init__`` so ``get_params`` and
``clone`` behave as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dsp import preprocess_frames
from .errors import ShapeError
from .models import InpaintNet
from .tensorcore import DiffTensor, no_grad
from .training import (
    TrainConfig,
    evaluate,
    inpaint_objective,
    make_bandwidth_objective,
    pretrain,
    train_bandwidth,
)


def check_frames(X) -> np.ndarray:
    """Validate raw IQ frames ``[M, A, L, 2]``."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[-1] != 2:
        raise ShapeError(f"expected IQ frames [M, A, L, 2], got {X.shape}")
    return X


def check_examples(X, n_channels: int | None = None) -> np.ndarray:
    """Validate STFT examples ``[M, 2A, T, F]``."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] % 2:
        raise ShapeError(f"expected examples [M, 2A, T, F], got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ShapeError(f"fitted on {n_channels} channels, got {X.shape[1]}")
    return X


def check_targets(y, X) -> np.ndarray:
    y = check_array(y, dtype=np.float32, ensure_all_finite=True)
    if y.shape != (X.shape[0], X.shape[3]):
        raise ShapeError(f"targets must be [M, F] = {(X.shape[0], X.shape[3])}, got {y.shape}")
    if np.any(y < 0):
        raise ValueError("bandwidth targets must be non-negative")
    return y


class STFTTransformer(TransformerMixin, BaseEstimator):
    """Windowed STFT, Re/Im interleaving and per-example standardization."""

    def __init__(self, n_chunks: int = 32):
        self.n_chunks = n_chunks

    def fit(self, X, y=None):
        X = check_frames(X)
        if X.shape[2] % self.n_chunks:
            raise ShapeError(f"frame length {X.shape[2]} is not divisible by n_chunks={self.n_chunks}")
        self.n_antennas_ = X.shape[1]
        self.n_samples_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_frames(X)
        if X.shape[1:3] != (self.n_antennas_, self.n_samples_):
            raise ShapeError(f"fitted on {self.n_antennas_} antennas x {self.n_samples_} samples, "
                             f"got {X.shape[1]} x {X.shape[2]}")
        return preprocess_frames(X, self.n_chunks)


def _config(est, lr) -> TrainConfig:
    return TrainConfig(batch_size=est.batch_size, initial_lr=lr, val_fraction=est.val_fraction,
                       seed=est.random_state, max_epochs=est.max_epochs,
                       freeze_encoder=getattr(est, "freeze_encoder", False))


def _batched_forward(fn, X, batch_size):
    out = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            out.append(fn(DiffTensor(X[start : start + batch_size])).data)
    return np.concatenate(out)


class ChannelInpaintingPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised pretraining; ``transform`` gives ``[M, C, T/8, F]`` latents."""

    def __init__(self, learning_rate=1e-3, batch_size=16, max_epochs=None, val_fraction=0.2, random_state=0):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_examples(X)
        self.model_, self.result_ = pretrain(X, _config(self, self.learning_rate))
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_examples(X, self.n_channels_)
        self.model_.eval()
        return _batched_forward(self.model_.encoder, X, self.batch_size)

    def score(self, X, y=None):
        """Negative mean reconstruction loss on unmasked input (greater is better)."""
        check_is_fitted(self)
        X = check_examples(X, self.n_channels_)
        return -evaluate(self.model_, X, X, inpaint_objective, self.batch_size).mean_loss


class BandwidthRegressor(RegressorMixin, BaseEstimator):
    """Bandwidth regression network.

    ``encoder`` may be a fitted :class:`ChannelInpaintingPretrainer`, an
    :class:`InpaintNet`, or None for the random-init baseline.
    """

    def __init__(self, encoder=None, freeze_encoder=False, learning_rate=0.01, batch_size=16, max_epochs=None,
                 val_fraction=0.2, epsilon=1e-6, random_state=0):
        self.encoder = encoder
        self.freeze_encoder = freeze_encoder
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.val_fraction = val_fraction
        self.epsilon = epsilon
        self.random_state = random_state

    def _source(self):
        if self.encoder is None:
            if self.freeze_encoder:
                raise ValueError("freeze_encoder needs a pretrained encoder")
            return None
        if isinstance(self.encoder, ChannelInpaintingPretrainer):
            check_is_fitted(self.encoder)
            return self.encoder.model_
        if isinstance(self.encoder, InpaintNet):
            return self.encoder
        raise TypeError(f"encoder must be a ChannelInpaintingPretrainer or InpaintNet, got {type(self.encoder)}")

    def fit(self, X, y):
        X = check_examples(X)
        y = check_targets(y, X)
        config = _config(self, self.learning_rate)
        config.epsilon = self.epsilon
        self.model_, self.result_ = train_bandwidth(X, y, config, encoder_source=self._source())
        self.n_channels_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_examples(X, self.n_channels_)
        self.model_.eval()
        return _batched_forward(self.model_, X, self.batch_size)

    def score(self, X, y, sample_weight=None):
        """Negative mean bandwidth loss (greater is better)."""
        check_is_fitted(self)
        X = check_examples(X, self.n_channels_)
        y = check_targets(y, X)
        res = evaluate(self.model_, X, y, make_bandwidth_objective(self.epsilon), self.batch_size)
        if sample_weight is None:
            return -res.mean_loss
        return -float(np.average(res.per_example, weights=sample_weight))
