"""Linear one-vs-rest SVM read-out and accuracy bookkeeping.

Each binary model minimizes ``lambda/2 |w|^2 + mean(hinge)`` with
``lambda = 1 / (C * n)`` (the usual ``1/2 |w|^2 + C sum(hinge)`` scaled by
``1/(C n)``) using Pegasos-style stochastic subgradient steps. The bias is an
extra weight on a constant input of 1, so it is regularized with the rest.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EvaluationError, FormatError, TrainingError

MODEL_MAGIC = b"SVMM"
MODEL_VERSION = 1


@dataclass
class SvmModel:
    weights: np.ndarray  # (classes, features)
    biases: np.ndarray  # (classes,)
    C: float = 1.0
    epochs: int = 100
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise EvaluationError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return X @ self.weights.T + self.biases

    def to_bytes(self) -> bytes:
        head = MODEL_MAGIC + struct.pack("<3IdIQ", MODEL_VERSION, self.n_classes, self.n_features,
                                         self.C, self.epochs, self.seed)
        return head + self.weights.astype("<f8").tobytes() + self.biases.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SvmModel":
        if raw[:4] != MODEL_MAGIC:
            raise FormatError("not an SVM model file (bad magic)")
        version, k, d, C, epochs, seed = struct.unpack_from("<3IdIQ", raw, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        off = 4 + struct.calcsize("<3IdIQ")
        if len(raw) != off + 8 * k * d + 8 * k:
            raise FormatError("model payload size does not match its header")
        w = np.frombuffer(raw, "<f8", k * d, off).reshape(k, d).copy()
        b = np.frombuffer(raw, "<f8", k, off + 8 * k * d).copy()
        return cls(w, b, C, epochs, seed)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SvmModel":
        return cls.from_bytes(Path(path).read_bytes())


def train_svm(features, labels: Sequence[int], C: float = 1.0, seed: int = 0, epochs: int = 100,
              n_classes: int | None = None) -> SvmModel:
    rows = [np.asarray(getattr(f, "values", f), dtype=np.float64).ravel() for f in features]
    if not rows or len({len(r) for r in rows}) != 1:
        raise TrainingError("feature vectors must be non-empty and all the same length")
    X = np.stack(rows)
    y = np.asarray(labels, dtype=int)
    if len(y) != len(X):
        raise TrainingError("one label per feature vector is required")
    k = int(y.max()) + 1 if n_classes is None else n_classes
    if len(np.unique(y)) < 2:
        raise TrainingError("training needs at least two classes")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    # +1 for the sample's own class, -1 for every other class
    Y = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    lam = 1.0 / (C * n)
    W = np.zeros((k, d + 1))
    rng = np.random.default_rng(seed)
    step = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            step += 1
            eta = 1.0 / (lam * step)
            xi = Xa[i]
            violated = Y[i] * (W @ xi) < 1.0
            W *= 1.0 - eta * lam
            W[violated] += eta * Y[i, violated, None] * xi
            # keep iterates in the ball that contains the optimum
            norms = np.linalg.norm(W, axis=1)
            radius = 1.0 / math.sqrt(lam)
            scale = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
            W *= scale[:, None]
    return SvmModel(W[:, :d].copy(), W[:, d].copy(), C, epochs, seed)


def predict(model: SvmModel, feature) -> int:
    x = np.asarray(getattr(feature, "values", feature), dtype=np.float64)
    return int(np.argmax(model.decision(x)[0]))


def predict_many(model: SvmModel, features) -> np.ndarray:
    rows = [np.asarray(getattr(f, "values", f), dtype=np.float64).ravel() for f in features]
    if any(len(r) != model.n_features for r in rows):
        raise EvaluationError(f"model expects {model.n_features} features per vector")
    X = np.stack(rows)
    return np.argmax(model.decision(X), axis=1)


def round_half_up(value: float, places: int = 2) -> Decimal:
    return Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass
class EvalResult:
    correct: int
    total: int
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total


def confusion_result(predictions, labels, n_classes: int) -> EvalResult:
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(labels, dtype=int)
    if len(true) == 0:
        raise EvaluationError("cannot evaluate on an empty test set")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    return EvalResult(int((pred == true).sum()), len(true), conf)


def evaluate(model: SvmModel, features, labels) -> EvalResult:
    if len(labels) == 0:
        raise EvaluationError("cannot evaluate on an empty test set")
    return confusion_result(predict_many(model, features), labels, model.n_classes)


def merge_folds(results: Sequence[EvalResult]) -> EvalResult:
    """Pool folds into one run: the sample-weighted mean accuracy."""
    if not results:
        raise EvaluationError("no folds to merge")
    return EvalResult(sum(r.correct for r in results), sum(r.total for r in results),
                      sum(r.confusion for r in results))


@dataclass
class RunReport:
    """Per-run accuracies (percent) for one column of a results table."""

    accuracies: list[float]
    confusions: list[np.ndarray] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))  # population

    def summary(self) -> str:
        return f"{round_half_up(self.mean)} ± {round_half_up(self.std)}"


def aggregate_runs(accuracies: Sequence[float]) -> tuple[float, float, str]:
    """Mean, population standard deviation and the ``"mean ± std"`` label."""
    if len(accuracies) == 0:
        raise EvaluationError("no runs to aggregate")
    report = RunReport(list(accuracies))
    return report.mean, report.std, report.summary()
