"""scikit-learn classifier wrapper around the numpy CNN engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted

from . import engine


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """SmallCNN trained with plain mini-batch SGD.

    ``X`` is an array of images shaped ``(n, channels, height, width)``.
    """

    def __init__(self, widths=(8, 16), lr=0.05, epochs=20, batch_size=32, weight_decay=0.0,
                 random_state=0):
        self.widths = widths
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _check_X(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim != 4:
            raise ValueError("X must be (n, channels, height, width)")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        c, h, w = X.shape[1:]
        if h != w:
            raise ValueError("square images expected")
        rng = np.random.default_rng(self.random_state)
        spec = engine.small_cnn(c, len(self.classes_), h, self.widths)
        self.model_ = engine.init_model(spec, rng, X.mean(axis=(0, 2, 3)), X.std(axis=(0, 2, 3)) + 1e-6)
        self.loss_curve_ = engine.train_sgd(self.model_, X, y_idx, self.lr, self.epochs, self.batch_size, rng,
                                            self.weight_decay)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return engine.forward(self.model_, self._check_X(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[engine.predict(self.model_, self._check_X(X))]

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)
