"""Retrospective learning.

A multinomial logistic regression predicts which signal was shown from the
listing features, the qualification indicators and the realised conversion.
At inference the conversion input is pinned to 1, so the argmax is the
signal most associated with converting impressions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import Dataset, RankingPolicy, qual_matrix

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RetroTrainingSet:
    """Balanced rows ``[features | qualification bits | conversion bit]``."""

    X: np.ndarray
    labels: np.ndarray
    positive: np.ndarray
    feature_dim: int
    catalog: Tuple[str, ...]

    @property
    def n_signals(self) -> int:
        return len(self.catalog)

    def __len__(self) -> int:
        return len(self.labels)


def build_training_set(d: Dataset, seed: int = 0) -> RetroTrainingSet:
    """All rows of the scarcer outcome plus an equal-size uniform sample of the other."""
    y = d.y
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(
            f"need both positive and negative impressions (got {len(pos)} / {len(neg)})"
        )
    rng = np.random.default_rng(seed)
    m = min(len(pos), len(neg))
    if len(neg) > m:
        neg = np.sort(rng.choice(neg, size=m, replace=False))
    elif len(pos) > m:
        pos = np.sort(rng.choice(pos, size=m, replace=False))
    idx = np.sort(np.concatenate([pos, neg]))
    X = np.hstack(
        [
            d.features[idx],
            qual_matrix(d.qual[idx], d.n_signals).astype(np.float64),
            y[idx].astype(np.float64)[:, None],
        ]
    )
    return RetroTrainingSet(
        X=X,
        labels=d.shown[idx].copy(),
        positive=y[idx].copy(),
        feature_dim=d.feature_dim,
        catalog=tuple(d.catalog),
    )


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(W, b, X, y, l2=0.0):
    """Mean softmax cross-entropy with an L2 penalty on ``W``, and its gradient.

    Returns ``(loss, dW, db)``.
    """
    m = X.shape[0]
    scores = X @ W.T + b
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    loss = -log_p[np.arange(m), y].mean() + 0.5 * l2 * np.sum(W * W)
    delta = np.exp(log_p)
    delta[np.arange(m), y] -= 1.0
    delta /= m
    return loss, delta.T @ X + l2 * W, delta.sum(axis=0)


class RetrospectiveRanker(BaseEstimator, RankingPolicy):
    """Multinomial logistic regression over signals with a conversion input.

    Parameters
    ----------
    epochs : int, default=50
    learning_rate : float, default=0.5
    l2 : float, default=1e-4
        Penalty on the weight matrix (not the bias).
    batch_size : int, default=256
    random_state : int, default=0
        Seeds negative sampling and per-epoch shuffling.
    """

    def __init__(self, epochs=50, learning_rate=0.5, l2=1e-4, batch_size=256, random_state=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X: Dataset, y=None):
        """Build the balanced training set from a :class:`Dataset` and fit."""
        return self.fit_training_set(build_training_set(X, seed=self.random_state))

    def fit_training_set(self, t: RetroTrainingSet):
        labels = np.asarray(t.labels, dtype=np.int64)
        if len(np.unique(labels)) < 2:
            raise ValueError("need at least two distinct shown signals to train")
        K, d = t.n_signals, t.feature_dim
        X = np.array(t.X, dtype=np.float64)

        # canonical row order makes the fit independent of input row order
        order = np.lexsort(np.vstack([labels, X.T[::-1]]))
        X, labels = X[order], labels[order]

        mean = X[:, :d].mean(axis=0) if len(X) else np.zeros(d)
        std = X[:, :d].std(axis=0)
        std[std == 0] = 1.0
        X[:, :d] = (X[:, :d] - mean) / std

        W = np.zeros((K, X.shape[1]))
        b = np.zeros(K)
        rng = np.random.default_rng(self.random_state)
        n = len(X)
        self.loss_curve_ = []
        with np.errstate(over="ignore", invalid="ignore"):
            self._descend(W, b, X, labels, rng)
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise TrainingDivergedError("parameters became non-finite; lower learning_rate")

        self.coef_ = W
        self.intercept_ = b
        self.feature_mean_ = mean
        self.feature_std_ = std
        self.feature_dim_ = d
        self.catalog_ = tuple(t.catalog)
        self.n_signals_ = K
        self.final_loss_ = self.loss_curve_[-1] if self.loss_curve_ else float("nan")
        logger.info("retro fit: %d rows, final loss %.6f", n, self.final_loss_)
        return self

    def _descend(self, W, b, X, labels, rng):
        """Mini-batch gradient descent, updating ``W`` and ``b`` in place."""
        n = len(X)
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = perm[start : start + self.batch_size]
                loss, dW, db = softmax_cross_entropy(W, b, X[batch], labels[batch], self.l2)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch offset {start}; "
                        f"learning_rate={self.learning_rate} is likely too large"
                    )
                W -= self.learning_rate * dW
                b -= self.learning_rate * db
            self.loss_curve_.append(softmax_cross_entropy(W, b, X, labels, self.l2)[0])

    def _design(self, features, qual, conversion=1.0) -> np.ndarray:
        features = check_array(features, ensure_min_samples=0, ensure_min_features=0)
        if features.shape[1] != self.feature_dim_:
            raise ValueError(f"expected {self.feature_dim_} features, got {features.shape[1]}")
        ind = qual_matrix(np.asarray(qual).reshape(-1), self.n_signals_).astype(np.float64)
        conv = np.full((len(ind), 1), conversion)
        return np.hstack([(features - self.feature_mean_) / self.feature_std_, ind, conv])

    def decision_function(self, features, qual, conversion=1.0) -> np.ndarray:
        check_is_fitted(self, "coef_")
        return self._design(features, qual, conversion) @ self.coef_.T + self.intercept_

    def predict_proba(self, features, qual, conversion=1.0) -> np.ndarray:
        return softmax(self.decision_function(features, qual, conversion))

    def assign(self, features, qual):
        scores = self.decision_function(features, qual)
        ind = qual_matrix(np.asarray(qual).reshape(-1), self.n_signals_)
        if not ind.any(axis=1).all():
            raise ValueError("impression with empty qualification set")
        return np.argmax(np.where(ind, scores, -np.inf), axis=1).astype(np.int64)

    def predict(self, features, qual):
        return self.assign(features, qual)

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "model_type": "retro",
            "version": "1",
            "catalog": list(self.catalog_),
            "feature_dim": int(self.feature_dim_),
            "weights": self.coef_.tolist(),
            "bias": self.intercept_.tolist(),
            "feature_mean": self.feature_mean_.tolist(),
            "feature_std": self.feature_std_.tolist(),
            "final_loss": float(self.final_loss_),
            "config": self.get_params(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RetrospectiveRanker":
        if doc.get("model_type") != "retro":
            raise ValueError("not a retro model document")
        if str(doc.get("version")) != "1":
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        model = cls(**doc.get("config", {}))
        model.catalog_ = tuple(doc["catalog"])
        model.n_signals_ = len(model.catalog_)
        model.feature_dim_ = int(doc["feature_dim"])
        model.coef_ = np.asarray(doc["weights"], dtype=np.float64).reshape(
            model.n_signals_, model.feature_dim_ + model.n_signals_ + 1
        )
        model.intercept_ = np.asarray(doc["bias"], dtype=np.float64)
        model.feature_mean_ = np.asarray(doc["feature_mean"], dtype=np.float64)
        model.feature_std_ = np.asarray(doc["feature_std"], dtype=np.float64)
        model.final_loss_ = float(doc.get("final_loss", float("nan")))
        if not (np.isfinite(model.coef_).all() and np.isfinite(model.intercept_).all()):
            raise ValueError("model parameters must be finite")
        return model


def fit_retro(
    t: RetroTrainingSet, epochs=50, learning_rate=0.5, l2=1e-4, seed=0, batch_size=256
) -> RetrospectiveRanker:
    model = RetrospectiveRanker(
        epochs=epochs, learning_rate=learning_rate, l2=l2, batch_size=batch_size, random_state=seed
    )
    return model.fit_training_set(t)


def retro_assign(model: RetrospectiveRanker, features, qual: int) -> int:
    """Chosen signal for one impression."""
    return int(model.assign(np.atleast_2d(np.asarray(features, dtype=float)), np.array([qual]))[0])
