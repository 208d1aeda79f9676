"""scikit-learn compatible wrapper around the training loop."""

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import attribution, model
from .dataset import stratified_holdout
from .trainer import TrainConfig, train


class DynomapClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Learns a 2D layout of the input features jointly with a CNN classifier.

    Inputs are expected to be standardized already (see
    ``dynomap.dataset.Standardizer``). ``transform`` returns the flattened
    standardized images; ``render`` returns them as (n, P, P).

    Parameters mirror :class:`dynomap.trainer.TrainConfig`; ``random_state``
    seeds initialization, shuffling, dropout and the validation carve-out.

    Attributes
    ----------
    params_ : ParamSet
        Selected parameters (best validation accuracy after the freeze).
    layout_ : ndarray of shape (n_features, 2)
    history_ : list of dict
    freeze_epoch_ : int or None
    """

    def __init__(
        self,
        pixels=64,
        padding=1.0,
        filters=(16, 32, 64),
        hidden=64,
        dropout=0.5,
        label_smoothing=0.1,
        learning_rate=1e-3,
        batch_size=16,
        max_epochs=1000,
        patience=15,
        velocity_threshold=0.002,
        post_freeze_epochs=None,
        validation_fraction=0.1,
        diagonal_gate=False,
        image_std_eps=0.0,
        dtype="float32",
        random_state=0,
    ):
        self.pixels = pixels
        self.padding = padding
        self.filters = filters
        self.hidden = hidden
        self.dropout = dropout
        self.label_smoothing = label_smoothing
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.velocity_threshold = velocity_threshold
        self.post_freeze_epochs = post_freeze_epochs
        self.validation_fraction = validation_fraction
        self.diagonal_gate = diagonal_gate
        self.image_std_eps = image_std_eps
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            velocity_threshold=self.velocity_threshold,
            pixels=self.pixels,
            padding=self.padding,
            label_smoothing=self.label_smoothing,
            seed=int(self.random_state),
            filters=tuple(self.filters),
            hidden=self.hidden,
            dropout=self.dropout,
            diagonal_gate=self.diagonal_gate,
            image_std_eps=self.image_std_eps,
            validation_fraction=self.validation_fraction,
            post_freeze_epochs=self.post_freeze_epochs,
            dtype=self.dtype,
        )

    def fit(self, X, y, X_valid=None, y_valid=None):
        """Train; without an explicit validation set a stratified
        ``validation_fraction`` of ``(X, y)`` is held out for model selection."""
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        if X_valid is None:
            keep, hold = stratified_holdout(y_enc, self.validation_fraction, [int(self.random_state), 0x5A])
            train_split = (X[keep], y_enc[keep])
            valid_split = (X[hold], y_enc[hold])
        else:
            X_valid, y_valid = check_X_y(X_valid, y_valid, dtype=np.float64)
            lookup = {c: i for i, c in enumerate(self.classes_)}
            train_split = (X, y_enc)
            valid_split = (X_valid, np.array([lookup[v] for v in y_valid]))
        result = train(self._train_config(), train_split, valid_split, n_classes=self.classes_.size)
        self.params_ = result.params
        self.net_config_ = result.net_config
        self.history_ = result.history
        self.freeze_epoch_ = result.freeze_epoch
        self.selected_epoch_ = result.selected_epoch
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def layout_(self):
        check_is_fitted(self, "params_")
        return self.params_["coords"].astype(np.float64)

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        X = self._check_X(X)
        logits = model.predict_logits(self.params_, X.astype(self.params_.dtype), self.net_config_)
        return logits.astype(np.float64)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def render(self, X, standardized=True):
        X = self._check_X(X)
        img, _ = model.render_images(self.params_, X.astype(self.params_.dtype), self.net_config_, standardized=standardized)
        return img.astype(np.float64)

    def transform(self, X):
        img = self.render(X)
        return img.reshape(img.shape[0], -1)

    def attribute(self, X, target=None, steps=attribution.DEFAULT_STEPS):
        """Integrated Gradients per sample, shape (n, n_features).

        ``target`` is a class label (not index); default is each sample's
        predicted class.
        """
        X = self._check_X(X)
        t = None if target is None else int(np.flatnonzero(self.classes_ == target)[0])
        return np.stack(
            [attribution.integrated_gradients(self.params_, self.net_config_, x, t, steps).values for x in X]
        )
