"""Cross-validated metrics, group-level BEC analysis and ROI shielding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# ------------------------------------------------------------------- splits


def kfold_split(labels: Sequence, k: int = 5, seed: int = 0) -> np.ndarray:
    """Stratified fold assignment; returns one fold id per item.

    Each class is shuffled with its own seeded stream and dealt round-robin,
    so fold sizes within a class differ by at most one.
    """
    labels = list(labels)
    folds = np.empty(len(labels), dtype=int)
    classes = sorted(set(labels), key=str)
    for ci, c in enumerate(classes):
        idx = np.array([i for i, lab in enumerate(labels) if lab == c])
        if len(idx) < k:
            raise EvaluationError(f"class {c!r} has {len(idx)} members, fewer than k={k}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci]))
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % k
    return folds


# ------------------------------------------------------------------ metrics


@dataclass
class FoldMetrics:
    acc: float
    sen: float
    spe: float
    auc: Optional[float]


@dataclass
class MetricsReport:
    folds: list = field(default_factory=list)

    def mean(self, name: str) -> Optional[float]:
        vals = [getattr(f, name) for f in self.folds if getattr(f, name) is not None]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else None

    @property
    def acc(self):
        return self.mean("acc")

    @property
    def sen(self):
        return self.mean("sen")

    @property
    def spe(self):
        return self.mean("spe")

    @property
    def auc(self):
        return self.mean("auc")

    def to_dict(self) -> dict:
        return {
            "mean": {k: self.mean(k) for k in ("acc", "sen", "spe", "auc")},
            "folds": [vars(f) for f in self.folds],
        }


def auc_rank(scores, positive) -> Optional[float]:
    """Mann-Whitney AUC; tied pairs count one half. None if a class is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(scores, labels, positive_class, threshold: float = 0.5) -> FoldMetrics:
    """ACC/SEN/SPE from ``score > threshold`` and AUC from the rank statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray([lab == positive_class for lab in labels])
    pred = scores > threshold
    tp = np.sum(pred & pos)
    tn = np.sum(~pred & ~pos)
    fn = np.sum(~pred & pos)
    fp = np.sum(pred & ~pos)
    auc = auc_rank(scores, pos)
    if auc is None:
        log.warning("single-class fold: AUC undefined")
    return FoldMetrics(
        acc=float((tp + tn) / len(scores)),
        sen=float(tp / (tp + fn)) if tp + fn else float("nan"),
        spe=float(tn / (tn + fp)) if tn + fp else float("nan"),
        auc=auc,
    )


def edge_auroc(a_est: np.ndarray, a_true: np.ndarray) -> Optional[float]:
    """AUROC of |A_est| as a detector of the true nonzero off-diagonal edges."""
    off = ~np.eye(a_true.shape[0], dtype=bool)
    return auc_rank(np.abs(a_est[off]), a_true[off] != 0)


# -------------------------------------------------------------- group BECs


def group_average_bec(becs: Sequence[np.ndarray], threshold: float = 0.1) -> np.ndarray:
    avg = np.mean(np.stack(becs), axis=0)
    avg[np.abs(avg) < threshold] = 0.0
    np.fill_diagonal(avg, 0.0)
    return avg


@dataclass
class AlteredConnectivity:
    delta: np.ndarray
    enhanced: list
    diminished: list

    def to_dict(self, names: Optional[Sequence[str]] = None) -> dict:
        def row(item):
            src, dst, v = item
            out = {"source": src, "target": dst, "delta": v}
            if names is not None:
                out.update(source_name=names[src], target_name=names[dst])
            return out

        return {"enhanced": [row(e) for e in self.enhanced],
                "diminished": [row(e) for e in self.diminished]}


def _top(delta: np.ndarray, k: int, sign: float) -> list:
    n = delta.shape[0]
    cand = [(sign * delta[i, j], i, j) for i in range(n) for j in range(n)
            if i != j and sign * delta[i, j] > 0]
    cand.sort(key=lambda c: (-c[0], c[1], c[2]))
    return [(i, j, float(delta[i, j])) for _, i, j in cand[:k]]


def altered_connectivity(avg_early: np.ndarray, avg_late: np.ndarray, k: int = 10) -> AlteredConnectivity:
    """Late-minus-early difference with the top-k enhanced and diminished edges.

    Entries are (source ROI, target ROI, delta); ties break on source, then target.
    """
    delta = np.asarray(avg_late, dtype=np.float64) - np.asarray(avg_early, dtype=np.float64)
    np.fill_diagonal(delta, 0.0)
    return AlteredConnectivity(delta, _top(delta, k, 1.0), _top(delta, k, -1.0))


# -------------------------------------------------------------- classifiers


def offdiag_features(becs) -> np.ndarray:
    becs = np.asarray(becs, dtype=np.float64)
    n = becs.shape[-1]
    return becs[:, ~np.eye(n, dtype=bool)]


class LinearMarginClassifier:
    """Hinge-loss linear classifier with L2 penalty on standardized edge features."""

    def __init__(self, c: float = 1.0, seed: int = 0):
        self.c = c
        self.seed = seed
        self.fitted = False

    def fit(self, becs, labels):
        self.classes_ = sorted(set(labels), key=str)
        if len(self.classes_) != 2:
            raise EvaluationError(f"binary task expected, got classes {self.classes_}")
        y = np.array([self.classes_.index(lab) for lab in labels])
        self.scaler = StandardScaler().fit(offdiag_features(becs))
        self.svm = LinearSVC(C=self.c, loss="hinge", dual=True, max_iter=20000,
                             random_state=self.seed)
        self.svm.fit(self.scaler.transform(offdiag_features(becs)), y)
        self.fitted = True
        return self

    def decision_function(self, becs) -> np.ndarray:
        if not self.fitted:
            raise EvaluationError("classifier is not trained")
        return self.svm.decision_function(self.scaler.transform(offdiag_features(becs)))

    def predict(self, becs) -> list:
        return [self.classes_[int(s > 0)] for s in self.decision_function(becs)]

    threshold = 0.0


class _RowConvNet(nn.Module):
    def __init__(self, n: int, filters: int, hidden: int):
        super().__init__()
        # each filter spans a whole row (outgoing edges of one ROI)
        self.rows = nn.Conv2d(1, filters, (1, n))
        self.fc1 = nn.Linear(filters * n, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, a):
        h = torch.nn.functional.gelu(self.rows(a.unsqueeze(1))).flatten(1)
        return self.fc2(torch.nn.functional.gelu(self.fc1(h))).squeeze(-1)


class ConnectivityCNN:
    """Small convolution-over-rows network on BEC matrices."""

    threshold = 0.5

    def __init__(self, filters: int = 8, hidden: int = 16, epochs: int = 200, lr: float = 1e-2,
                 weight_decay: float = 1e-3, seed: int = 0):
        self.filters, self.hidden, self.epochs = filters, hidden, epochs
        self.lr, self.weight_decay, self.seed = lr, weight_decay, seed
        self.fitted = False

    def fit(self, becs, labels):
        self.classes_ = sorted(set(labels), key=str)
        if len(self.classes_) != 2:
            raise EvaluationError(f"binary task expected, got classes {self.classes_}")
        a = np.asarray(becs, dtype=np.float64)
        self.scale = float(np.std(a)) or 1.0
        x = torch.tensor(a / self.scale, dtype=torch.float32)
        y = torch.tensor([float(self.classes_.index(lab)) for lab in labels])
        torch.manual_seed(self.seed)
        self.net = _RowConvNet(a.shape[-1], self.filters, self.hidden)
        opt = torch.optim.Adam(self.net.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        for _ in range(self.epochs):
            opt.zero_grad()
            loss = nn.functional.binary_cross_entropy_with_logits(self.net(x), y)
            loss.backward()
            opt.step()
        self.fitted = True
        return self

    def decision_function(self, becs) -> np.ndarray:
        if not self.fitted:
            raise EvaluationError("classifier is not trained")
        x = torch.tensor(np.asarray(becs, dtype=np.float64) / self.scale, dtype=torch.float32)
        with torch.no_grad():
            return torch.sigmoid(self.net(x)).double().numpy()

    def predict(self, becs) -> list:
        return [self.classes_[int(s > 0.5)] for s in self.decision_function(becs)]


def make_classifier(kind: str, seed: int = 0):
    if kind == "linear-margin":
        return LinearMarginClassifier(seed=seed)
    if kind == "connectivity-cnn":
        return ConnectivityCNN(seed=seed)
    raise EvaluationError(f"unknown classifier kind {kind!r}")


def downstream_classify(becs, labels, kind: str = "linear-margin", k: int = 5, seed: int = 0,
                        folds: Optional[Sequence[int]] = None) -> MetricsReport:
    """k-fold evaluation of a BEC classifier for a binary task.

    The positive class is the later one in sorted order.
    """
    becs = np.asarray(becs, dtype=np.float64)
    labels = list(labels)
    classes = sorted(set(labels), key=str)
    if len(classes) != 2:
        raise EvaluationError(f"binary task expected, got classes {classes}")
    folds = kfold_split(labels, k, seed) if folds is None else np.asarray(folds)
    report = MetricsReport()
    for f in range(k):
        test = folds == f
        clf = make_classifier(kind, seed).fit(becs[~test], [lab for lab, m in zip(labels, test) if not m])
        scores = clf.decision_function(becs[test])
        report.folds.append(classification_metrics(
            scores, [lab for lab, m in zip(labels, test) if m], classes[1], clf.threshold))
    return report


# ---------------------------------------------------------------- shielding


@dataclass
class RoiImportance:
    scores: np.ndarray
    top: list


def roi_importance(classifier, test_becs, labels) -> RoiImportance:
    """Importance of ROI r = 1 - accuracy after zeroing row r and column r of every A."""
    if not getattr(classifier, "fitted", True):
        raise EvaluationError("classifier is not trained")
    becs = np.asarray(test_becs, dtype=np.float64)
    labels = list(labels)
    n = becs.shape[-1]
    scores = np.empty(n)
    for r in range(n):
        shielded = becs.copy()
        shielded[:, r, :] = 0.0
        shielded[:, :, r] = 0.0
        pred = classifier.predict(shielded)
        scores[r] = 1.0 - np.mean([p == lab for p, lab in zip(pred, labels)])
    n_top = math.ceil(n / 10)
    order = sorted(range(n), key=lambda r: (-scores[r], r))
    return RoiImportance(scores, order[:n_top])
