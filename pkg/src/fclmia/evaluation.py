"""Attack metrics, encoder-quality probes and overfitting traces."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .contrastive.encoder import encode
from .contrastive.moco import MoCoState, sample_losses
from .rng import stream


@dataclass
class MetricSet:
    """Binary metrics with member (1) as the positive class.

    Precision and recall are ``None`` when their denominator is zero; the
    matching ``*_undefined`` flag is then set.
    """

    accuracy: float
    precision: float | None
    recall: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    precision_undefined: bool = False
    recall_undefined: bool = False

    @property
    def balanced_accuracy(self):
        pos, neg = self.tp + self.fn, self.tn + self.fp
        parts = [x for x in (self.tp / pos if pos else None, self.tn / neg if neg else None) if x is not None]
        return float(np.mean(parts))

    def to_dict(self):
        return asdict(self)


def metrics(predictions, labels):
    pred = np.asarray(predictions).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if len(pred) != len(y):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(y)} labels")
    if len(y) == 0:
        raise ValueError("no samples")
    if not (np.isin(pred, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("predictions and labels must be 0/1")
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return MetricSet((tp + tn) / len(y), precision, recall, tp, fp, tn, fn, precision is None, recall is None)


# ---------------------------------------------------------------------------
# Encoder probes
# ---------------------------------------------------------------------------

def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_feats, train_labels, test_feats, k=20, tau=0.1, n_classes=None):
    """Cosine-similarity kNN vote with weights ``exp(sim / tau)``.

    Neighbours are ranked by similarity, ties by train index; vote ties go
    to the smallest class index.
    """
    train_labels = np.asarray(train_labels, dtype=int)
    if len(train_feats) == 0 or len(test_feats) == 0:
        raise ValueError("empty train or test set")
    if not 1 <= k <= len(train_feats):
        raise ValueError(f"k must lie in [1, {len(train_feats)}]")
    n_classes = n_classes or int(train_labels.max()) + 1
    sims = _unit(test_feats) @ _unit(train_feats).T
    nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    w = np.exp(np.take_along_axis(sims, nn, axis=1) / tau)
    votes = np.zeros((len(sims), n_classes))
    np.add.at(votes, (np.arange(len(sims))[:, None], train_labels[nn]), w)
    return votes.argmax(axis=1)


def weighted_knn_eval(params, arch, train_x, train_y, test_x, test_y, k=20, tau_knn=0.1):
    """Accuracy of a weighted kNN classifier on frozen encoder features."""
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("empty train or test set")
    ftr = encode(params, arch, train_x, normalize_rows=True)
    fte = encode(params, arch, test_x, normalize_rows=True)
    pred = knn_predict(ftr, train_y, fte, k, tau_knn)
    return float(np.mean(pred == np.asarray(test_y)))


def linear_eval(params, arch, train_x, train_y, test_x, test_y, epochs=100, lr=0.1, seed=0, tap="encoder"):
    """Softmax-regression probe on frozen ``tap`` features; returns test accuracy.

    Full-batch gradient descent on standardised features; the encoder is
    only read.
    """
    train_y = np.asarray(train_y, dtype=int)
    if len(np.unique(train_y)) < 2:
        raise ValueError("linear probe needs at least two classes in the train set")
    ftr = np.asarray(encode(params, arch, train_x, tap), dtype=np.float64)
    fte = np.asarray(encode(params, arch, test_x, tap), dtype=np.float64)
    return linear_probe(ftr, train_y, fte, test_y, epochs, lr, seed)


def linear_probe(ftr, train_y, fte, test_y, epochs=100, lr=0.1, seed=0):
    train_y = np.asarray(train_y, dtype=int)
    mu, sd = ftr.mean(axis=0), ftr.std(axis=0) + 1e-8
    xtr, xte = (ftr - mu) / sd, (fte - mu) / sd
    n_classes = int(max(train_y.max(), np.max(test_y, initial=0))) + 1
    rng = stream(seed, "linear-probe")
    w = rng.normal(0, 0.01, size=(xtr.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[train_y]
    for _ in range(epochs):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(xtr)
        w -= lr * xtr.T @ g
        b -= lr * g.sum(axis=0)
    return float(np.mean((xte @ w + b).argmax(axis=1) == np.asarray(test_y)))


# ---------------------------------------------------------------------------
# Overfitting trace
# ---------------------------------------------------------------------------

@dataclass
class OverfitTrace:
    rounds: list
    member_loss: list
    nonmember_loss: list
    member_cos: list
    nonmember_cos: list

    def rows(self):
        return list(zip(self.rounds, self.member_loss, self.nonmember_loss, self.member_cos, self.nonmember_cos))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "member_loss", "nonmember_loss", "member_cos", "nonmember_cos"])
            for r in self.rows():
                w.writerow([r[0], *(repr(float(v)) for v in r[1:])])


def _mean_view_cosine(state, images, n_views, policy, seed):
    from .attacks.passive import sim_values

    return float(np.mean([v.mean() for v in sim_values(state.query, state.arch, images, n_views, policy, seed)]))


def overfit_trace(checkpoints, member_x, nonmember_x, n_views=10, policy=None, seed=0, loss_draws=2):
    """Mean loss and mean view cosine per checkpoint for both pools.

    ``checkpoints`` is a sequence of ``(round, MoCoState)`` pairs.
    """
    from .datasets import AugmentationPolicy

    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    policy = policy or AugmentationPolicy()
    out = OverfitTrace([], [], [], [], [])
    for rnd, state in checkpoints:
        if not isinstance(state, MoCoState):
            raise TypeError("checkpoints must be (round, MoCoState) pairs")
        out.rounds.append(int(rnd))
        out.member_loss.append(float(sample_losses(state, member_x, policy, stream(seed, "trace-loss", "m"), loss_draws).mean()))
        out.nonmember_loss.append(float(sample_losses(state, nonmember_x, policy, stream(seed, "trace-loss", "n"), loss_draws).mean()))
        out.member_cos.append(_mean_view_cosine(state, member_x, n_views, policy, stream(seed, "trace-cos", "m").integers(2**31)))
        out.nonmember_cos.append(_mean_view_cosine(state, nonmember_x, n_views, policy, stream(seed, "trace-cos", "n").integers(2**31)))
    for series in (out.member_loss, out.nonmember_loss, out.member_cos, out.nonmember_cos):
        if not all(math.isfinite(v) for v in series):
            raise ValueError("non-finite value in overfitting trace")
    return out
