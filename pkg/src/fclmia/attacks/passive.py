"""Passive membership inference on a released encoder.

Three feature families are extracted per sample without labels:

* similarity sets: pairwise cosines between encoder outputs of ``n``
  augmented views of the sample;
* confidences: a frozen, seed-derived affine head maps a tap's output to
  ``N`` logits, whose softmax is reduced to its top-K probabilities;
* combos: (max view cosine, per-sample contrastive loss, max probability).

A linear classifier (LDA by default) separates members from non-members.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.svm import LinearSVC

from ..contrastive import encoder as enc
from ..contrastive.moco import symmetric_loss
from ..datasets import AugmentationPolicy, augment, make_views
from ..evaluation import metrics
from ..rng import stream

SIM_MODES = ("top3", "mean", "full")
FEATURE_KINDS = ("top3", "mean", "full", "maxcos", "loss", "confidence", "combo")
CLASSIFIERS = ("lda", "logreg", "svm")

_CHUNK = 512


@dataclass
class SimSet:
    sample_id: int
    n: int
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.n * (self.n - 1) // 2:
            raise ValueError("similarity set must hold n(n-1)/2 values")


@dataclass
class ConfidenceFeature:
    tap: str
    probs: np.ndarray
    n_classes: int
    k: int


@dataclass
class ComboFeature:
    x: float
    y: float
    z: float

    def as_array(self):
        return np.array([self.x, self.y, self.z])


# ---------------------------------------------------------------------------
# Similarity sets
# ---------------------------------------------------------------------------

def _pairwise(feats):
    iu = np.triu_indices(len(feats), 1)
    return np.clip((feats @ feats.T)[iu], -1.0, 1.0)


def _encode_chunked(params, arch, x, tap="encoder", normalize_rows=False):
    return np.concatenate([enc.encode(params, arch, x[i : i + _CHUNK], tap, normalize_rows) for i in range(0, len(x), _CHUNK)])


def sim_set(params, arch, sample, n, policy, rng, sample_id=-1):
    """All ``n(n-1)/2`` pairwise cosines of ``n`` augmented views of one sample."""
    if n < 2:
        raise ValueError("need n >= 2 views")
    views = make_views(sample, n, policy, rng)
    feats = enc.encode(params, arch, views, normalize_rows=True).astype(np.float64)
    return SimSet(int(sample_id), n, _pairwise(feats))


def sim_values(params, arch, images, n, policy, seed, ids=None):
    """Similarity sets for a batch, one RNG stream per sample (keyed by id)."""
    if n < 2:
        raise ValueError("need n >= 2 views")
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    views = np.concatenate([make_views(x, n, policy, stream(seed, "views", int(i))) for x, i in zip(images, ids)])
    feats = _encode_chunked(params, arch, views, normalize_rows=True).astype(np.float64)
    return [_pairwise(feats[k * n : (k + 1) * n]) for k in range(len(images))]


def sim_features(values, mode="top3"):
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if mode == "top3":
        if len(values) < 3:
            raise ValueError("top3 needs at least 3 pairs")
        return np.sort(values)[::-1][:3]
    if mode == "mean":
        if len(values) < 1:
            raise ValueError("mean needs at least 1 pair")
        return np.array([values.mean()])
    if mode == "full":
        return np.sort(values)[::-1]
    raise ValueError(f"unknown similarity mode {mode!r}; choose from {SIM_MODES}")


# ---------------------------------------------------------------------------
# Confidence features
# ---------------------------------------------------------------------------

def head_params(tap, in_dim, n_classes, head_seed):
    """Frozen random affine head for one tap (same seed -> same head)."""
    rng = stream(head_seed, "confidence-head", tap, in_dim, n_classes)
    w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, n_classes))
    b = rng.normal(0.0, 0.1, size=n_classes)
    return w, b


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def top_k_probs(probs, k):
    """Top-``k`` probabilities per row, descending; ties by class index."""
    order = np.lexsort((np.broadcast_to(np.arange(probs.shape[-1]), probs.shape), -probs), axis=-1)
    return np.take_along_axis(probs, order[..., :k], axis=-1)


def confidence_values(params, arch, images, tap, n_classes=10, k=3, head_seed=0):
    if tap not in arch.taps:
        raise KeyError(f"unknown tap {tap!r}; available: {arch.taps}")
    if not 1 <= k <= n_classes:
        raise ValueError("need 1 <= K <= N")
    feats = _encode_chunked(params, arch, np.asarray(images), tap).astype(np.float64)
    w, b = head_params(tap, feats.shape[1], n_classes, head_seed)
    return top_k_probs(softmax(feats @ w + b), k)


def confidence_feature(params, arch, sample, tap, n_classes=10, k=3, head_seed=0):
    probs = confidence_values(params, arch, np.asarray(sample)[None], tap, n_classes, k, head_seed)[0]
    return ConfidenceFeature(tap, probs, n_classes, k)


# ---------------------------------------------------------------------------
# Per-sample loss and combos
# ---------------------------------------------------------------------------

def loss_values(state, images, policy, seed, ids=None, draws=4):
    """Symmetric two-view loss per sample (mean over ``draws`` view pairs)."""
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    total = np.zeros(len(images))
    for d in range(draws):
        v1, v2 = [], []
        for x, i in zip(images, ids):
            rng = stream(seed, "loss-views", int(i), d)
            v1.append(augment(x[None], policy, rng)[0])
            v2.append(augment(x[None], policy, rng)[0])
        v1, v2 = np.stack(v1), np.stack(v2)
        for s in range(0, len(images), _CHUNK):
            losses, _, _ = symmetric_loss(state, v1[s : s + _CHUNK], v2[s : s + _CHUNK], with_grad=False)
            total[s : s + _CHUNK] += losses
    return total / draws


def combo_feature(state, sample, n, policy, rng, tap="encoder", n_classes=10, head_seed=0):
    from ..contrastive.moco import per_sample_loss

    x = float(sim_set(state.query, state.arch, sample, n, policy, rng).values.max())
    y = per_sample_loss(state, sample, policy, rng)
    z = float(confidence_feature(state.query, state.arch, sample, tap, n_classes, 1, head_seed).probs[0])
    return ComboFeature(x, y, z)


# ---------------------------------------------------------------------------
# Attack datasets and classifiers
# ---------------------------------------------------------------------------

@dataclass
class PassiveConfig:
    n_views: int = 10
    tap: str = "encoder"
    n_classes: int = 10
    top_k: int = 3
    head_seed: int = 0
    loss_draws: int = 4
    seed: int = 0
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)


@dataclass
class AttackDataset:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    kind: str
    tap: str = "encoder"
    round: int = -1

    def __post_init__(self):
        if len(self.ids) != len(self.features) or len(self.ids) != len(self.labels):
            raise ValueError("ids, features and labels must align")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("a sample appears more than once")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", *(f"f{j}" for j in range(self.features.shape[1]))])
            for i, y, row in zip(self.ids, self.labels, self.features):
                w.writerow([int(i), int(y), *(repr(float(v)) for v in row)])


def extract_features(state, images, ids, kind, cfg):
    """Feature matrix of one kind for a batch of samples."""
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}; choose from {FEATURE_KINDS}")
    params, arch = state.query, state.arch
    if kind in SIM_MODES or kind in ("maxcos", "combo"):
        sims = sim_values(params, arch, images, cfg.n_views, cfg.policy, cfg.seed, ids)
    if kind in SIM_MODES:
        return np.stack([sim_features(v, kind) for v in sims])
    if kind == "maxcos":
        return np.array([[v.max()] for v in sims])
    if kind == "confidence":
        return confidence_values(params, arch, images, cfg.tap, cfg.n_classes, cfg.top_k, cfg.head_seed)
    losses = loss_values(state, images, cfg.policy, cfg.seed, ids, cfg.loss_draws)
    if kind == "loss":
        return losses[:, None]
    conf = confidence_values(params, arch, images, cfg.tap, cfg.n_classes, 1, cfg.head_seed)[:, 0]
    return np.column_stack([[v.max() for v in sims], losses, conf])


def build_attack_dataset(state, split, member_pool, nonmember_pool, kind="top3", cfg=None, round_idx=-1):
    """Labelled features (1 = member) for every sample of ``split``."""
    cfg = cfg or PassiveConfig()
    if len(split.members) == 0 or len(split.nonmembers) == 0:
        raise ValueError("empty membership split")
    ids = np.concatenate([split.members, split.nonmembers])
    images = np.concatenate([member_pool.take(split.members), nonmember_pool.take(split.nonmembers)])
    labels = np.concatenate([np.ones(len(split.members), np.int64), np.zeros(len(split.nonmembers), np.int64)])
    feats = extract_features(state, images, ids, kind, cfg)
    return AttackDataset(ids, np.asarray(feats, dtype=np.float64), labels, kind, cfg.tap, round_idx)


def _make_classifier(kind):
    if kind == "lda":
        return LinearDiscriminantAnalysis()
    if kind == "logreg":
        return LogisticRegression(max_iter=1000)
    if kind == "svm":
        return LinearSVC(dual=False)
    raise ValueError(f"unknown classifier {kind!r}; choose from {CLASSIFIERS}")


@dataclass
class AttackModel:
    kind: str
    model: object
    mean: np.ndarray
    scale: np.ndarray
    split_seed: int
    test_index: np.ndarray
    metrics: object

    def predict(self, features):
        return self.model.predict((np.asarray(features) - self.mean) / self.scale)

    @property
    def accuracy(self):
        return self.metrics.accuracy


def fit_attack_classifier(data, kind="lda", split_seed=0, test_size=0.3):
    """Fit an affine classifier on a stratified train part; score the rest."""
    x = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels)
    if len(np.unique(y)) < 2:
        raise ValueError("attack dataset needs both member and non-member rows")
    idx = np.arange(len(y))
    tr, te = train_test_split(idx, test_size=test_size, stratify=y, random_state=split_seed)
    # Standardising keeps the decision rule affine and helps the solvers.
    mean, scale = x[tr].mean(axis=0), x[tr].std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    model = _make_classifier(kind)
    model.fit((x[tr] - mean) / scale, y[tr])
    pred = model.predict((x[te] - mean) / scale)
    return AttackModel(kind, model, mean, scale, split_seed, te, metrics(pred, y[te]))


def evaluate_attack(data, kind="lda", seeds=range(5), test_size=0.3):
    """Metrics pooled over the test parts of several stratified splits.

    With equal test sizes the pooled accuracy is the mean split accuracy.
    """
    counts = np.zeros(4, dtype=int)
    for s in seeds:
        m = fit_attack_classifier(data, kind, s, test_size).metrics
        counts += (m.tp, m.fp, m.tn, m.fn)
    tp, fp, tn, fn = (int(c) for c in counts)
    return metrics(np.r_[np.ones(tp + fp), np.zeros(tn + fn)], np.r_[np.ones(tp), np.zeros(fp), np.zeros(tn), np.ones(fn)])


def attack_accuracy(data, kind="lda", seeds=range(5), test_size=0.3):
    """Mean test accuracy over several stratified splits."""
    return evaluate_attack(data, kind, seeds, test_size).accuracy


@dataclass
class AttackReport:
    kind: str
    tap: str
    round: int
    accuracy: float
    precision: float | None
    recall: float | None
    n_member: int
    n_nonmember: int
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        if not d["extra"]:
            d.pop("extra")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_for(data, m, classifier, seed):
    """AttackReport from an AttackDataset and its MetricSet."""
    return AttackReport(
        data.kind,
        data.tap,
        int(data.round),
        m.accuracy,
        m.precision,
        m.recall,
        int(np.sum(data.labels == 1)),
        int(np.sum(data.labels == 0)),
        int(seed),
        {"classifier": classifier, "precision_undefined": m.precision_undefined, "recall_undefined": m.recall_undefined},
    )


# ---------------------------------------------------------------------------
# Layer sweep
# ---------------------------------------------------------------------------

def layer_sweep(checkpoints, split, member_pool, nonmember_pool, taps, cfg=None, classifier="lda", seeds=range(5)):
    """Accuracy table ``{round: {tap: acc, ..., "feature": acc}}``.

    Each tap column uses confidence features at that tap; ``feature`` is the
    top3 similarity-set baseline.
    """
    cfg = cfg or PassiveConfig()
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    table = {}
    for rnd, state in checkpoints:
        row = {}
        for tap in taps:
            tap_cfg = PassiveConfig(**{**cfg.__dict__, "tap": tap})
            data = build_attack_dataset(state, split, member_pool, nonmember_pool, "confidence", tap_cfg, rnd)
            row[tap] = attack_accuracy(data, classifier, seeds)
        base = build_attack_dataset(state, split, member_pool, nonmember_pool, "top3", cfg, rnd)
        row["feature"] = attack_accuracy(base, classifier, seeds)
        table[int(rnd)] = row
    return table
