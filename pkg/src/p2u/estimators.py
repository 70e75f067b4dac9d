"""scikit-learn style wrappers around quantization and the desk-scale MLP.

The delivery protocol itself is not an estimator; only the pieces that are
naturally fit/transform or fit/predict get this interface.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evalnet import LabeledDataset, MlpSpec, forward, train_mlp
from .model_store import SUPPORTED_BITWIDTHS, TensorModel
from .quant import dequantize_array, quantize_array


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Symmetric max-abs quantizer with one scale for the whole array.

    ``fit`` calibrates ``scale_``; ``transform`` returns integer codes on that
    grid and ``inverse_transform`` maps codes back to float32.
    """

    def __init__(self, bitwidth: int = 8):
        self.bitwidth = bitwidth

    def fit(self, X, y=None):
        if self.bitwidth not in SUPPORTED_BITWIDTHS:
            raise ValueError(f"bitwidth must be one of {SUPPORTED_BITWIDTHS}, got {self.bitwidth}")
        X = np.asarray(X, dtype=np.float32)
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains NaN or infinity")
        _, self.scale_ = quantize_array(X, self.bitwidth)
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else 1
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        codes, _ = quantize_array(np.asarray(X, dtype=np.float32), self.bitwidth, scale=self.scale_)
        return codes

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        return dequantize_array(np.asarray(X, dtype=np.int64), self.scale_)


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """Dense+ReLU classifier trained with Adam on softmax cross-entropy.

    The fitted weights are a TensorModel (``model_``) that can be saved,
    quantized and delivered like any other model.
    """

    def __init__(self, hidden=(32,), epochs=200, learning_rate=0.01, batch_size=64, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        self.classes_, labels = np.unique(np.asarray(y), return_inverse=True)
        self.spec_ = MlpSpec((X.shape[1], *self.hidden, len(self.classes_)))
        self.n_features_in_ = X.shape[1]
        data = LabeledDataset(X, labels)
        self.model_ = train_mlp(
            self.spec_,
            data,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.random_state,
        )
        return self

    @classmethod
    def from_model(cls, spec: MlpSpec, model: TensorModel, classes=None) -> "MLPClassifier":
        """Wrap existing weights, e.g. a received low-precision or proxy model."""
        spec.check(model)
        est = cls(hidden=spec.dims[1:-1])
        est.spec_, est.model_ = spec, model
        est.classes_ = np.arange(spec.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = spec.n_inputs
        return est

    def with_weights(self, model: TensorModel) -> "MLPClassifier":
        check_is_fitted(self, "model_")
        return type(self).from_model(self.spec_, model, self.classes_)

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return np.atleast_2d(forward(self.spec_, self.model_, np.asarray(X, dtype=np.float64)))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def to_model(self) -> TensorModel:
        check_is_fitted(self, "model_")
        return self.model_
