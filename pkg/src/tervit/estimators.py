"""scikit-learn compatible wrappers around the model and the quantizers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from tervit.data import Dataset
from tervit.model import VisionTransformer, ViTConfig
from tervit.quantization import (
    LEVELS,
    QuantizationPolicy,
    THRESHOLD_FACTOR,
    _minmax_codes,
    channel_abs_mean,
    ternary_codes,
)
from tervit.training import TrainSchedule, pretrain, progressive_train, train_phase

FIT_MODES = ("real32", "int8", "ternary", "progressive")


def check_images(X, in_chans: int | None = None, image_size: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a float32 ``(N, C, H, W)`` array.

    Accepts ``(N, H, W)`` (single channel) and flattened ``(N, C*H*W)`` input
    when ``in_chans`` and ``image_size`` are known.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim == 2:
        if in_chans is None or image_size is None or X.shape[1] != in_chans * image_size**2:
            raise ValueError(f"cannot reshape flat input of width {X.shape[1]} into images")
        X = X.reshape(-1, in_chans, image_size, image_size)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ValueError(f"expected images of rank 2, 3 or 4, got shape {X.shape}")
    return np.ascontiguousarray(X)


class TerViTClassifier(ClassifierMixin, BaseEstimator):
    """Vision-transformer classifier trained with quantization-aware training.

    Parameters
    ----------
    mode : {"real32", "int8", "ternary", "progressive"}
        ``"progressive"`` trains ``phase_a_epochs`` with 8-bit weights and
        then ``phase_b_epochs`` with ternary weights on the same latents. The
        other modes train for ``phase_a_epochs + phase_b_epochs`` epochs.
    pretrain_epochs : int
        Real-valued epochs run before the quantized phases.
    granularity : {"channel", "layer"}
        Ternarization granularity (``"layer"`` is the TWN baseline).

    Attributes
    ----------
    model_ : VisionTransformer
    policy_ : QuantizationPolicy
        Policy used at inference.
    classes_ : ndarray
    trace_ : list of TraceRow
    """

    def __init__(self, image_size=16, patch_size=8, embed_dim=16, depth=2, num_heads=2,
                 mlp_ratio=4.0, mode="progressive", phase_a_epochs=3, phase_b_epochs=7,
                 pretrain_epochs=0, granularity="channel", patch_embed_bits=8, head_bits=8,
                 activation_bits=8, attn_scale_per_head=False, lr=2e-3, weight_decay=0.05,
                 batch_size=32, random_state=42):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.mode = mode
        self.phase_a_epochs = phase_a_epochs
        self.phase_b_epochs = phase_b_epochs
        self.pretrain_epochs = pretrain_epochs
        self.granularity = granularity
        self.patch_embed_bits = patch_embed_bits
        self.head_bits = head_bits
        self.activation_bits = activation_bits
        self.attn_scale_per_head = attn_scale_per_head
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def _schedule(self) -> TrainSchedule:
        return TrainSchedule(phase_a_epochs=self.phase_a_epochs,
                             phase_b_epochs=self.phase_b_epochs, lr=self.lr,
                             weight_decay=self.weight_decay, batch_size=self.batch_size,
                             seed=self.random_state, pretrain_epochs=self.pretrain_epochs)

    def fit(self, X, y):
        if self.mode not in FIT_MODES:
            raise ValueError(f"mode must be one of {FIT_MODES}, got {self.mode!r}")
        X = check_images(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        config = ViTConfig(self.image_size, self.patch_size, X.shape[1], self.embed_dim,
                           self.depth, self.num_heads, self.mlp_ratio, len(self.classes_),
                           self.attn_scale_per_head)
        base = QuantizationPolicy(body_bits=2, patch_embed_bits=self.patch_embed_bits,
                                  head_bits=self.head_bits, activation_bits=self.activation_bits,
                                  granularity=self.granularity)
        data = Dataset(X, self._encoder.transform(y).astype(np.int64), len(self.classes_))
        schedule = self._schedule()
        model = VisionTransformer(config, seed=self.random_state)
        trace = pretrain(model, schedule, data)
        if self.mode == "progressive":
            trace += progressive_train(model, schedule, data, base).trace
            self.policy_ = base.with_mode("ternary")
        else:
            trace += train_phase(model, self.mode, schedule, data, base)
            self.policy_ = base.with_mode(self.mode)
        self.model_ = model
        self.config_ = config
        self.trace_ = trace
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        c = self.config_
        X = check_images(X, c.in_chans, c.image_size)
        out = [self.model_.forward(X[i:i + 256], self.policy_).data for i in range(0, len(X), 256)]
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class ChannelTernarizer(TransformerMixin, BaseEstimator):
    """Learns per-column thresholds and scales from a weight matrix.

    ``transform`` maps a matrix with the same number of columns onto
    ``{-alpha_j, 0, +alpha_j}`` using the fitted thresholds.
    """

    def __init__(self, granularity="channel", threshold_factor=THRESHOLD_FACTOR):
        self.granularity = granularity
        self.threshold_factor = threshold_factor

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.granularity == "channel":
            mean_abs = channel_abs_mean(X)
        elif self.granularity == "layer":
            mean_abs = np.full(X.shape[1], np.abs(X).mean())
        else:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        self.alpha_ = mean_abs.astype(np.float32)
        self.threshold_ = self.threshold_factor * mean_abs
        self.n_features_in_ = X.shape[1]
        return self

    def codes(self, X) -> np.ndarray:
        check_is_fitted(self, "alpha_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return ternary_codes(X, self.threshold_)

    def transform(self, X) -> np.ndarray:
        return self.codes(X).astype(np.float32) * self.alpha_[None, :]


class MinMax8Quantizer(TransformerMixin, BaseEstimator):
    """Min-max 8-bit quantize-dequantize with ranges learned in ``fit``.

    ``per_channel=True`` keeps one range per column, otherwise one for the
    whole array. Values outside the fitted range are clamped.
    """

    def __init__(self, per_channel=False):
        self.per_channel = per_channel

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        axis = 0 if self.per_channel else None
        self.x_min_ = np.asarray(X.min(axis=axis), dtype=np.float32)
        x_max = np.asarray(X.max(axis=axis), dtype=np.float32)
        self.scale_ = ((x_max.astype(np.float64) - self.x_min_) / LEVELS).astype(np.float32)
        self.n_features_in_ = X.shape[1]
        return self

    def quantize(self, X) -> np.ndarray:
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=np.float32)
        return _minmax_codes(X, self.x_min_, self.scale_)

    def transform(self, X) -> np.ndarray:
        return (self.quantize(X).astype(np.float32) * self.scale_ + self.x_min_).astype(np.float32)
