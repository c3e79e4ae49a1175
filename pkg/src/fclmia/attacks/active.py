"""Active membership inference by gradient ascent on target samples.

Static variant: on a disposable copy of a released model, raise the
contrastive loss of a target batch for a few steps and call a sample a
member when its loss increase stays below a threshold.

In-training variant: a federated client uploads the ascended model every
round and compares each target's local loss with its loss under the next
aggregate; the spread of that difference is calibrated on samples the
attacker knows to be members.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from ..contrastive.moco import MoCoState, symmetric_loss
from ..datasets import AugmentationPolicy, augment
from ..evaluation import metrics
from ..federation import AttackerHook
from ..rng import stream
from .passive import loss_values


class AscentDiverged(RuntimeError):
    """Loss grew past the divergence guard during gradient ascent."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class AscentConfig:
    steps: int = 10
    lr: float = 0.1
    seed: int = 0
    guard: float = 10.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("ascent needs at least one step")
        if self.lr < 0:
            raise ValueError("ascent learning rate must be >= 0")


PRESETS = {
    "mild": AscentConfig(steps=3, lr=0.05),
    "strong": AscentConfig(steps=10, lr=0.1),
}


@dataclass
class LossTrace:
    steps: list
    pre: np.ndarray | None = None
    post: np.ndarray | None = None


def ascent_step(params, grads, lr):
    """``theta + lr * grad``, i.e. one SGD step on the negated loss."""
    return params.axpy(lr, grads)


def ascend(params, loss_and_grad, lr, steps, guard=10.0):
    """Generic gradient ascent.  ``loss_and_grad(params, step)`` returns
    ``(loss, grads)``.  Returns ``(params, losses)`` with ``steps + 1``
    losses (the last one evaluated after the final step)."""
    losses = []
    initial = None
    for s in range(steps + 1):
        loss, grads = loss_and_grad(params, s)
        loss = float(loss)
        losses.append(loss)
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or (initial > 0 and loss > guard * initial * steps):
            raise AscentDiverged(f"loss {loss:.4g} exceeded guard at step {s}", losses)
        if s < steps and lr > 0:
            params = ascent_step(params, grads, lr)
    return params, losses


def gradient_ascent(state, targets, cfg, rng, policy=None):
    """Raise the symmetric MoCo loss of ``targets`` on the query encoder.

    Fresh views are drawn every step.  The key encoder and the queue are
    left as they are.  Returns ``(new_state, LossTrace)``.
    """
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise ValueError("no target samples")
    policy = policy or AugmentationPolicy()

    def loss_and_grad(params, step):
        v1, v2 = augment(targets, policy, rng), augment(targets, policy, rng)
        probe = dataclasses.replace(state, query=params)
        losses, grads, _ = symmetric_loss(probe, v1, v2, with_grad=step < cfg.steps)
        return losses.mean(), grads

    query, trace = ascend(state.query.copy(), loss_and_grad, cfg.lr, cfg.steps, cfg.guard)
    return dataclasses.replace(state, query=query), LossTrace(trace)


# ---------------------------------------------------------------------------
# Thresholds
# ---------------------------------------------------------------------------

def threshold_accuracy(deltas, labels, t):
    """Mean of member and non-member accuracy for the rule ``member iff delta <= t``."""
    deltas, labels = np.asarray(deltas, float), np.asarray(labels, int)
    pred = deltas <= t
    return 0.5 * (np.mean(pred[labels == 1]) + np.mean(~pred[labels == 0]))


def threshold_sweep(deltas, labels):
    """Best threshold over midpoints of the sorted unique deltas.

    Returns ``(best_t, best_accuracy, curve)`` with ``curve`` a list of
    ``(t, accuracy)``; the smallest threshold wins ties.
    """
    deltas, labels = np.asarray(deltas, float), np.asarray(labels, int)
    if len(deltas) != len(labels):
        raise ValueError("deltas and labels differ in length")
    if not ((labels == 1).any() and (labels == 0).any()):
        raise ValueError("threshold sweep needs both members and non-members")
    uniq = np.unique(deltas)
    cands = (uniq[:-1] + uniq[1:]) / 2 if len(uniq) > 1 else uniq
    # Vectorised over candidates: member-rate below t, non-member rate above.
    order_m = np.sort(deltas[labels == 1])
    order_n = np.sort(deltas[labels == 0])
    acc_m = np.searchsorted(order_m, cands, side="right") / len(order_m)
    acc_n = (len(order_n) - np.searchsorted(order_n, cands, side="right")) / len(order_n)
    acc = 0.5 * (acc_m + acc_n)
    best = int(np.argmax(acc))
    return float(cands[best]), float(acc[best]), list(zip(cands.tolist(), acc.tolist()))


# ---------------------------------------------------------------------------
# Static attack
# ---------------------------------------------------------------------------

@dataclass
class StaticResult:
    ids: np.ndarray
    labels: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    threshold: float | None = None
    decisions: np.ndarray | None = None
    report: dict = field(default_factory=dict)

    @property
    def deltas(self):
        return self.post - self.pre

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "loss_before", "loss_after", "delta"])
            for row in zip(self.ids, self.labels, self.pre, self.post, self.deltas):
                w.writerow([int(row[0]), int(row[1]), *(repr(float(v)) for v in row[2:])])


def static_deltas(state, images, ids, cfg, policy=None, batch_size=1, eval_draws=4):
    """Loss increase per sample after ascent on a fresh model copy per batch.

    Before/after losses use the same per-sample evaluation views.
    """
    policy = policy or AugmentationPolicy()
    images, ids = np.asarray(images), np.asarray(ids)
    pre = np.empty(len(images))
    post = np.empty(len(images))
    for s in range(0, len(images), batch_size):
        xb, ib = images[s : s + batch_size], ids[s : s + batch_size]
        eval_seed = int(stream(cfg.seed, "static-eval").integers(2**31))
        pre[s : s + batch_size] = loss_values(state, xb, policy, eval_seed, ib, eval_draws)
        copy = state.copy()
        attacked, _ = gradient_ascent(copy, xb, cfg, stream(cfg.seed, "static-ascent", int(ib[0])), policy)
        post[s : s + batch_size] = loss_values(attacked, xb, policy, eval_seed, ib, eval_draws)
    return pre, post


def static_attack(state, member_x, member_ids, nonmember_x, nonmember_ids, cfg, threshold=None, policy=None, batch_size=1, eval_draws=4):
    """Member iff loss increase ``<= threshold``.

    With ``threshold=None`` the best threshold of :func:`threshold_sweep` is
    used (an oracle upper bound, reported as such).
    """
    if threshold is not None and not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    ids = np.concatenate([member_ids, nonmember_ids])
    labels = np.concatenate([np.ones(len(member_ids), int), np.zeros(len(nonmember_ids), int)])
    images = np.concatenate([member_x, nonmember_x])
    pre, post = static_deltas(state, images, ids, cfg, policy, batch_size, eval_draws)
    res = StaticResult(ids, labels, pre, post)
    if threshold is None:
        threshold, _, _ = threshold_sweep(res.deltas, labels)
    res.threshold = float(threshold)
    res.decisions = (res.deltas <= threshold).astype(int)
    m = metrics(res.decisions, labels)
    res.report = {
        "threshold": res.threshold,
        "accuracy": float(threshold_accuracy(res.deltas, labels, threshold)),
        "member_accuracy": float(np.mean(res.decisions[labels == 1] == 1)),
        "nonmember_accuracy": float(np.mean(res.decisions[labels == 0] == 0)),
        "precision": m.precision,
        "recall": m.recall,
        "mean_delta_member": float(res.deltas[labels == 1].mean()),
        "mean_delta_nonmember": float(res.deltas[labels == 0].mean()),
    }
    return res


# ---------------------------------------------------------------------------
# In-training attack
# ---------------------------------------------------------------------------

@dataclass
class DeltaRecord:
    round: int
    sample_id: int
    label: int
    loss_local: float
    loss_agg: float

    @property
    def delta(self):
        return abs(self.loss_local - self.loss_agg)


class InTrainingAttack(AttackerHook):
    """Federation hook running gradient ascent on ``targets`` each round.

    ``calibration`` holds samples the attacker knows to be members; they go
    through the same ascent so their loss differences set the reference
    median.  ``target_labels`` are only written to the trace for scoring.
    """

    def __init__(self, client_id, targets, target_ids, calibration, calibration_ids, cfg=None, policy=None,
                 honest_training=False, eval_draws=4, target_labels=None):
        super().__init__(client_id)
        self.cfg = cfg or PRESETS["strong"]
        self.policy = policy or AugmentationPolicy()
        self.honest_training = honest_training
        self.eval_draws = eval_draws
        self.images = np.concatenate([np.asarray(calibration), np.asarray(targets)])
        self.ids = np.concatenate([np.asarray(calibration_ids), np.asarray(target_ids)]).astype(np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("calibration and target ids overlap")
        self.n_cal = len(calibration_ids)
        if self.n_cal == 0:
            raise ValueError("calibration set is empty")
        tl = np.full(len(target_ids), -1) if target_labels is None else np.asarray(target_labels)
        self.labels = np.concatenate([np.ones(self.n_cal, int), tl.astype(int)])
        self.records = []
        self.skipped_rounds = []
        self.traces = {}
        self._local = None

    def _eval_seed(self, t):
        return int(stream(self.cfg.seed, "in-training-eval", t).integers(2**31))

    def before_upload(self, t, state, global_params, rng):
        state, trace = gradient_ascent(state, self.images, self.cfg, rng, self.policy)
        self.traces[t] = trace.steps
        self._local = loss_values(state, self.images, self.policy, self._eval_seed(t), self.ids, self.eval_draws)
        return state

    def after_aggregate(self, t, state, new_global):
        agg = dataclasses.replace(state, query=new_global.copy(), key=new_global.copy())
        loss_agg = loss_values(agg, self.images, self.policy, self._eval_seed(t), self.ids, self.eval_draws)
        for i, y, a, b in zip(self.ids, self.labels, self._local, loss_agg):
            self.records.append(DeltaRecord(t, int(i), int(y), float(a), float(b)))
        self._local = None

    def skipped(self, t):
        self.skipped_rounds.append(t)

    # -- decisions -----------------------------------------------------------

    def rounds(self):
        return sorted({r.round for r in self.records})

    def mean_deltas(self, last=None):
        """Per-sample mean |L - L_agg| over the last ``last`` attack rounds."""
        rounds = self.rounds()
        if not rounds:
            raise ValueError("no attack rounds recorded")
        keep = set(rounds[-last:] if last else rounds)
        by_id = {}
        for r in self.records:
            if r.round in keep:
                by_id.setdefault(r.sample_id, []).append(r.delta)
        return np.array([np.mean(by_id[int(i)]) for i in self.ids])

    def decide(self, threshold=None, quantile=0.9, last=None):
        """Member iff ``|dL - median(calibration dL)| < T``.

        By default ``T`` is the ``quantile`` of the calibration deviations.
        Returns a dict with per-sample decisions for calibration and targets.
        """
        d = self.mean_deltas(last)
        cal = d[: self.n_cal]
        med = float(np.median(cal))
        dev = np.abs(d - med)
        if threshold is None:
            threshold = float(np.quantile(dev[: self.n_cal], quantile))
        member = (dev < threshold).astype(int)
        return {
            "threshold": float(threshold),
            "median_calibration_delta": med,
            "orientation": "member if |delta - median| < T",
            "rounds": self.rounds(),
            "skipped_rounds": list(self.skipped_rounds),
            "ids": self.ids.tolist(),
            "deltas": d.tolist(),
            "calibration_decisions": member[: self.n_cal].tolist(),
            "target_decisions": member[self.n_cal :].tolist(),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "sample_id", "label", "loss_local", "loss_agg", "delta"])
            for r in self.records:
                w.writerow([r.round, r.sample_id, r.label, repr(r.loss_local), repr(r.loss_agg), repr(r.delta)])


def decisions_json(result):
    return json.dumps(result, indent=2, sort_keys=True)
