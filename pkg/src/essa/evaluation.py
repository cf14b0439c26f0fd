"""Weighted k-NN evaluation over frozen embeddings and classification metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from essa.errors import ConfigError, ContractError, DataError

METRICS = ("accuracy", "kappa", "auc")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, embeddings, labels, num_classes: int | None = None, **meta) -> EmbeddingIndex:
        emb = _normalize_rows(np.atleast_2d(embeddings))
        labels = np.asarray(labels, dtype=np.int64)
        if emb.shape[0] != labels.shape[0]:
            raise ContractError(f"{emb.shape[0]} embeddings but {labels.shape[0]} labels")
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        return cls(emb, labels, num_classes, meta)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def knn_scores(index: EmbeddingIndex, queries, k: int = 20, tau: float = 0.07) -> np.ndarray:
    """Class scores [n, K]: sum of exp(sim / tau) over the top-k neighbours of each class."""
    if len(index) == 0:
        raise ContractError("empty embedding index")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    k = min(k, len(index))
    q = _normalize_rows(np.atleast_2d(queries))
    sims = q @ index.embeddings.T
    # stable sort on -sim keeps the lower gallery index first among equal similarities
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top_sims = np.take_along_axis(sims, top, axis=1)
    scores = np.zeros((q.shape[0], index.num_classes))
    rows = np.repeat(np.arange(q.shape[0]), k)
    np.add.at(scores, (rows, index.labels[top].ravel()), np.exp(top_sims / tau).ravel())
    return scores


def knn_predict(index: EmbeddingIndex, query, k: int = 20, tau: float = 0.07):
    """(label, class scores) for one query, or (labels [n], scores [n, K]) for a batch.

    Ties between classes go to the smallest class id.
    """
    single = np.asarray(query).ndim == 1
    scores = knn_scores(index, query, k, tau)
    pred = np.argmax(scores, axis=1)
    if single:
        return int(pred[0]), scores[0]
    return pred, scores


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise ContractError(f"label arrays differ in shape: {true.shape} vs {pred.shape}")
    if true.size and (min(true.min(), pred.min()) < 0 or max(true.max(), pred.max()) >= num_classes):
        raise DataError(f"labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ContractError("accuracy of an empty confusion matrix")
    return float(np.trace(cm) / total)


def quadratic_kappa(cm) -> float:
    """Quadratic-weighted agreement; NaN (with a warning) when the expected disagreement is 0."""
    cm = np.asarray(cm, dtype=np.float64)
    k = cm.shape[0]
    if cm.ndim != 2 or cm.shape[1] != k or k < 2:
        raise ContractError(f"kappa needs a square matrix with K >= 2, got shape {cm.shape}")
    total = cm.sum()
    if total <= 0:
        raise ContractError("kappa of an empty confusion matrix")
    observed = cm / total
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(k)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    denom = float((weights * expected).sum())
    if denom == 0.0:
        warnings.warn("quadratic kappa undefined: both marginals put all mass on one class", RuntimeWarning)
        return float("nan")
    return 1.0 - float((weights * observed).sum()) / denom


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("roc_auc needs both classes present")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metric(metric: str, true, pred, scores, num_classes: int) -> float:
    if metric == "accuracy":
        return accuracy(confusion_matrix(true, pred, num_classes))
    if metric == "kappa":
        return quadratic_kappa(confusion_matrix(true, pred, num_classes))
    if metric == "auc":
        if num_classes != 2:
            raise ConfigError("metric 'auc' is defined for binary tasks only")
        scores = np.asarray(scores, dtype=np.float64)
        pos = scores[:, 1] / np.maximum(scores.sum(axis=1), 1e-300)
        return roc_auc(pos, true)
    raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")


def evaluate_knn_protocol(
    model, train_images, train_labels, test_images, test_labels,
    k: int = 20, tau: float = 0.07, metric: str = "accuracy", num_classes: int | None = None,
) -> float:
    """Embed the gallery and queries with a fixed model, classify by weighted k-NN, score."""
    if num_classes is None:
        num_classes = int(max(np.max(train_labels), np.max(test_labels))) + 1
    index = EmbeddingIndex.build(model.embed(train_images), train_labels, num_classes)
    pred, scores = knn_predict(index, model.embed(test_images), k, tau)
    return compute_metric(metric, test_labels, pred, scores, num_classes)
