"""scikit-learn style estimators around the DeepONet and MODNO trainers.

``X`` rows are input functions sampled at the sensors and ``y`` rows are the
target function on a shared query mesh passed as ``points``.  Inputs,
coordinates and (optionally) targets are rescaled for training and the maps
are folded back into the fitted networks, so ``model_`` works on raw data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ShapeError
from .models import don_predict_grid, init_don, init_modno, modno_predict_grid
from .preprocessing import ShardScaler
from .trainer import TrainConfig, train_modno, train_single_don


@dataclass
class ArrayShard:
    """Minimal shard: the fields the scaler and trainers read."""

    inputs: np.ndarray
    points: np.ndarray
    targets: np.ndarray
    operator_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)

    @property
    def n_functions(self):
        return self.inputs.shape[0]


def _as_points(points, n_points=None):
    pts = np.asarray(points, dtype=np.float64)
    pts = pts[:, None] if pts.ndim == 1 else pts
    if pts.ndim != 2 or (n_points is not None and pts.shape[0] != n_points):
        raise ShapeError(f"points must be (n_points, d) with n_points={n_points}, got {pts.shape}")
    return pts


def _shard(X, y, points, i=0):
    X = check_array(X, dtype=np.float64)
    y = check_array(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{X.shape[0]} input functions but {y.shape[0]} target rows")
    return ArrayShard(X, _as_points(points, y.shape[1]), y, i)


class _OperatorEstimator(RegressorMixin, BaseEstimator):
    def __init__(self, basis_count=64, branch_hidden=(128, 128), trunk_hidden=(128, 128),
                 activation="tanh", epochs=100, learning_rate=1e-3, minibatch_size=100,
                 optimizer="adam", query_range=3.0, normalize_targets=True, random_state=0):
        self.basis_count = basis_count
        self.branch_hidden = branch_hidden
        self.trunk_hidden = trunk_hidden
        self.activation = activation
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.minibatch_size = minibatch_size
        self.optimizer = optimizer
        self.query_range = query_range
        self.normalize_targets = normalize_targets
        self.random_state = random_state

    def _train_config(self, q=1.0):
        return TrainConfig(epochs=self.epochs, trunk_lr=self.learning_rate, branch_lr=self.learning_rate,
                           q=q, minibatch_size=self.minibatch_size, optimizer=self.optimizer,
                           seed=self.random_state)

    def _init_kwargs(self):
        return {"basis_count": self.basis_count, "branch_hidden": tuple(self.branch_hidden),
                "trunk_hidden": tuple(self.trunk_hidden), "activation": self.activation,
                "seed": self.random_state}


class DeepONetRegressor(_OperatorEstimator):
    """A single operator network.

    ``fit(X, y, points=...)`` learns the map from ``X`` rows to ``y`` rows;
    ``predict(X)`` returns values on the fitted mesh, or on ``points`` if given.
    """

    def fit(self, X, y, points):
        shard = _shard(X, y, points)
        scaler = ShardScaler.fit([shard], self.query_range, self.normalize_targets)
        model = init_don(shard.inputs.shape[1], shard.points.shape[1], **self._init_kwargs())
        trained, hist = train_single_don(model, scaler.transform_one(shard, 0), self._train_config())
        self.model_ = scaler.fold(trained, 0)
        self.history_ = hist
        self.points_ = shard.points
        self.n_features_in_ = shard.inputs.shape[1]
        return self

    def predict(self, X, points=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        pts = self.points_ if points is None else _as_points(points)
        return don_predict_grid(self.model_, X, pts)


class MODNORegressor(_OperatorEstimator):
    """Several operators sharing one branch network.

    ``fit`` takes one ``(X_i, y_i, points_i)`` triple per operator as lists;
    ``q`` is the fraction of each operator's functions used for branch updates.
    ``predict(X, operator=i)`` evaluates operator ``i``.
    """

    def __init__(self, q=1.0, basis_count=64, branch_hidden=(128, 128), trunk_hidden=(128, 128),
                 activation="tanh", epochs=100, learning_rate=1e-3, minibatch_size=100,
                 optimizer="adam", query_range=3.0, normalize_targets=True, random_state=0):
        super().__init__(basis_count, branch_hidden, trunk_hidden, activation, epochs, learning_rate,
                         minibatch_size, optimizer, query_range, normalize_targets, random_state)
        self.q = q

    def fit(self, X, y, points):
        if not (len(X) == len(y) == len(points)):
            raise ShapeError("X, y and points must list one entry per operator")
        shards = [_shard(a, b, p, i) for i, (a, b, p) in enumerate(zip(X, y, points))]
        scaler = ShardScaler.fit(shards, self.query_range, self.normalize_targets)
        model = init_modno(shards[0].inputs.shape[1], [s.points.shape[1] for s in shards],
                           **self._init_kwargs())
        trained, hist = train_modno(model, scaler.transform(shards), self._train_config(self.q))
        self.model_ = scaler.fold(trained)
        self.history_ = hist
        self.points_ = [s.points for s in shards]
        self.n_operators_ = len(shards)
        self.n_features_in_ = shards[0].inputs.shape[1]
        return self

    def predict(self, X, operator=0, points=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        pts = self.points_[operator] if points is None else _as_points(points)
        return modno_predict_grid(self.model_, operator, X, pts)

    def score(self, X, y, operator=0, sample_weight=None):
        return r2_score(y, self.predict(X, operator), sample_weight=sample_weight)
