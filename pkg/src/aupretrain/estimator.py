"""scikit-learn compatible wrappers.

``FacePreprocessor`` turns raw rasters into network input;
``AUDetector`` is a multi-label classifier around the VGG13. Transfer from
a pre-trained network works by passing it (or a checkpoint path) as
``init_network``::

    pre = AUDetector(lr=0.005, early_stop_patience=None, max_epochs=50).fit(X_noisy, Y17)
    det = AUDetector(init_network=pre.network_).fit(X_clean, Y12, groups=subjects)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint
from .datapipe import IMAGE_SIZE, ArrayDataset, AugmentConfig, preprocess
from .errors import ConfigError
from .metrics import confusion_counts, f1_score
from .network import VGG13, build_vgg13, replace_head
from .splits import holdout_subjects
from .trainer import EarlyStopping, TrainConfig, fit


class FacePreprocessor(TransformerMixin, BaseEstimator):
    """Pad, convert to grayscale, resize to 64x64 and mean-normalize each image."""

    def __init__(self, in_channels=1, pad_square=True):
        self.in_channels = in_channels
        self.pad_square = pad_square

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([preprocess(img, self.in_channels, self.pad_square) for img in X])


def _check_images(X, in_channels):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (in_channels, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected images of dims (n, {in_channels}, 64, 64), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("input contains NaN or infinity")
    return X


def _check_labels(y, n):
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != n:
        raise ValueError(f"{n} images but {y.shape[0]} label rows")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return y.astype(np.int64)


class AUDetector(ClassifierMixin, BaseEstimator):
    """Multi-label action-unit detector.

    ``fit`` takes preprocessed images (n, C, 64, 64) and a binary label
    matrix (n, L). With ``early_stop_patience`` set, a subject-disjoint
    ``val_fraction`` of ``groups`` is held out for early stopping.
    """

    def __init__(
        self,
        in_channels=1,
        width_multiplier=1.0,
        lr=0.0001,
        beta1=0.9,
        batch_size=32,
        max_epochs=500,
        early_stop_patience=10,
        val_fraction=0.05,
        augment=AugmentConfig(),
        threshold=0.5,
        init_network=None,
        weight_init="he_uniform",
        dropout_scale=1.0,
        seed=0,
    ):
        self.in_channels = in_channels
        self.width_multiplier = width_multiplier
        self.lr = lr
        self.beta1 = beta1
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.augment = augment
        self.threshold = threshold
        self.init_network = init_network
        self.weight_init = weight_init
        self.dropout_scale = dropout_scale
        self.seed = seed

    def _initial_network(self, n_outputs):
        init = self.init_network
        if init is None:
            return build_vgg13(self.in_channels, n_outputs, self.seed, self.width_multiplier, init=self.weight_init,
                               dropout_scale=self.dropout_scale)
        net = load_checkpoint(init) if not isinstance(init, VGG13) else init.copy()
        if net.in_channels != self.in_channels:
            raise ConfigError(f"initial network takes {net.in_channels} channels, estimator {self.in_channels}")
        if net.num_outputs != n_outputs:
            net = replace_head(net, n_outputs, self.seed)
        return net

    def fit(self, X, y, groups=None):
        X = _check_images(X, self.in_channels)
        y = _check_labels(y, len(X))
        cfg = TrainConfig(
            lr=self.lr, beta1=self.beta1, batch_size=self.batch_size, max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience, val_fraction=self.val_fraction,
            seed=self.seed, augment=self.augment, in_channels=self.in_channels,
        )
        groups = np.arange(len(X)) if groups is None else np.asarray(groups)
        ds = ArrayDataset(X, y, groups, augment=self.augment, seed=self.seed)
        net = self._initial_network(y.shape[1])
        if self.early_stop_patience:
            tr, va = holdout_subjects(groups, self.val_fraction, self.seed)
            history = fit(net, ds.subset(tr), cfg, val_ds=ds.subset(va), stopper=EarlyStopping(self.early_stop_patience))
        else:
            history = fit(net, ds, cfg, converge=True)
        self.network_ = net
        self.history_ = history
        self.n_outputs_ = y.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_proba(_check_images(X, self.in_channels)).astype(np.float64)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.int64)

    def score(self, X, y, sample_weight=None):
        """Macro-averaged F1 over labels."""
        y = _check_labels(y, len(X))
        return float(np.mean(f1_score(confusion_counts(self.predict_proba(X), y, self.threshold))))
