"""scikit-learn style estimators wrapping the Tree-3, ten-tree and LeNet-5 trainers."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import ImageSet, normalize_batch
from .exceptions import ShapeError
from .models import Geometry, forward
from .optim import Schedule, constant
from .plans import TrainPlan, get_plan
from .tensor_core import softmax
from .training import evaluate, train


def as_images(X, geometry):
    """Coerce ``X`` to ``(N, C, H, W)``; flat rows are reshaped to the geometry."""
    X = np.asarray(X)
    geometry = Geometry(geometry)
    if X.ndim == 2:
        if X.shape[1] != int(np.prod(geometry.image_shape)):
            raise ShapeError(f"{X.shape[1]} features do not match a {geometry.value} image "
                             f"{geometry.image_shape}", "features")
        X = X.reshape((-1,) + geometry.image_shape)
    elif X.ndim == 3 and geometry.channels == 1:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != geometry.image_shape:
        raise ShapeError(f"expected images of shape {geometry.image_shape}, got {X.shape[1:]}",
                         "image")
    if X.dtype != np.uint8 and not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"need {n} labels as a 1-D array, got shape {y.shape}", "labels")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class indices 0..9")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() > 9):
        raise ValueError("labels must be integer class indices 0..9")
    return y.astype(np.int64)


class PixelScaler(TransformerMixin, BaseEstimator):
    """Map byte pixels 0..255 to [-1, 1]; float input passes through unchanged."""

    def fit(self, X, y=None):
        self.n_features_in_ = int(np.prod(np.shape(X)[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return normalize_batch(X)


class _TreeBPClassifier(ClassifierMixin, BaseEstimator):
    _arch = "tree3"

    def _plan(self, n):
        if self.plan is not None:
            base = get_plan(self.plan) if isinstance(self.plan, str) else self.plan
            return base.with_(seed=self.random_state, dataset_size=n,
                              **({} if self.epochs is None else {"epochs": self.epochs}))
        return TrainPlan(
            name=f"{self._arch}-estimator", arch=self._arch, K=getattr(self, "K", 6),
            M=getattr(self, "M", 16), geometry=self.geometry, activation=self.activation,
            eta=self.eta, mu=self.mu, alpha=self.alpha, batch=self.batch_size,
            epochs=self.epochs or 10, dataset_size=n,
            schedule=self.schedule if isinstance(self.schedule, Schedule) else constant(self.eta),
            augment_shift=self.augment_shift, hflip=self.hflip, seed=self.random_state,
            pruned_bp=getattr(self, "pruned_bp", False))

    def fit(self, X, y, X_test=None, y_test=None):
        X = as_images(X, self.geometry)
        y = check_labels(y, X.shape[0])
        plan = self._plan(X.shape[0])
        test = None
        if X_test is not None:
            Xt = as_images(X_test, self.geometry)
            test = ImageSet(Xt, check_labels(y_test, Xt.shape[0]))
        result = train(plan, (ImageSet(X, y), test), evaluate_every_epoch=test is not None)
        self.params_ = result.params
        self.config_ = result.config
        self.history_ = result.history
        self.sparsity_ = result.sparsity
        self.plan_ = plan
        self.classes_ = np.arange(10)
        self.n_features_in_ = int(np.prod(plan.model_config().geometry.image_shape))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = normalize_batch(as_images(X, self.geometry), self.params_.dtype)
        out = [forward(self.params_, self.config_, X[i:i + 500]).logits
               for i in range(0, X.shape[0], 500)]
        return np.concatenate(out) if out else np.empty((0, 10))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "params_")
        X = as_images(X, self.geometry)
        return evaluate(self.params_, self.config_, ImageSet(X, check_labels(y, X.shape[0])))


class Tree3Classifier(_TreeBPClassifier):
    """Tree-3 classifier: grouped conv, max-pool, tree sampling, one bias-free dense layer.

    ``plan`` (a built-in plan name or :class:`TrainPlan`) overrides the
    individual hyper-parameters; ``epochs`` and ``random_state`` still apply.
    """
    _arch = "tree3"

    def __init__(self, K=6, M=16, activation="relu", geometry="cifar", eta=0.02, mu=0.965,
                 alpha=5e-5, batch_size=50, epochs=10, schedule=None, augment_shift=2,
                 hflip=True, pruned_bp=False, plan=None, random_state=0):
        self.K = K
        self.M = M
        self.activation = activation
        self.geometry = geometry
        self.eta = eta
        self.mu = mu
        self.alpha = alpha
        self.batch_size = batch_size
        self.epochs = epochs
        self.schedule = schedule
        self.augment_shift = augment_shift
        self.hflip = hflip
        self.pruned_bp = pruned_bp
        self.plan = plan
        self.random_state = random_state


class TenTreeClassifier(Tree3Classifier):
    """Ten independent Tree-3 trees over a shared first layer, one tree per class."""
    _arch = "tentree"

    def __init__(self, K=15, M=80, activation="relu", geometry="cifar", eta=0.05, mu=0.97,
                 alpha=5e-5, batch_size=100, epochs=10, schedule=None, augment_shift=4,
                 hflip=True, pruned_bp=False, plan=None, random_state=0):
        super().__init__(K, M, activation, geometry, eta, mu, alpha, batch_size, epochs, schedule,
                         augment_shift, hflip, pruned_bp, plan, random_state)


class LeNet5Classifier(_TreeBPClassifier):
    """Classical LeNet-5 baseline."""
    _arch = "lenet5"

    def __init__(self, activation="relu", geometry="cifar", eta=0.01, mu=0.9, alpha=1e-4,
                 batch_size=100, epochs=10, schedule=None, augment_shift=2, hflip=True,
                 plan=None, random_state=0):
        self.activation = activation
        self.geometry = geometry
        self.eta = eta
        self.mu = mu
        self.alpha = alpha
        self.batch_size = batch_size
        self.epochs = epochs
        self.schedule = schedule
        self.augment_shift = augment_shift
        self.hflip = hflip
        self.plan = plan
        self.random_state = random_state
