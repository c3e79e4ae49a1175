"""Run directories: training, attacks, consolidated reports and figures.

Layout of a run directory::

    config.json            resolved experiment config
    membership.json        member / non-member sample ids
    rounds.csv             one row per federated round
    ckpt_round_XXXXXX/     checkpoints
    attacks/<kind>/        per-checkpoint reports, CSV dumps, summaries
    figures/               PNG + SVG figures
    report.json, report.md consolidated summary
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plots
from .attacks import active, passive
from .config import ExperimentConfig, from_dict
from .contrastive.checkpoint import list_checkpoints, load_checkpoint
from .datasets import DataError, label_firewall, load_pool, partition_noniid, split_membership
from .evaluation import metrics, overfit_trace
from .federation import Federation, run_federation

log = logging.getLogger(__name__)

PASSIVE_KINDS = passive.FEATURE_KINDS
ATTACK_KINDS = PASSIVE_KINDS + ("layers", "active-static", "active-in-training")


class RunError(RuntimeError):
    """A run directory is missing something an operation needs."""


@dataclass
class Experiment:
    cfg: ExperimentConfig
    train: object
    holdout: object
    partitions: list
    split: object

    @property
    def fed_cfg(self):
        return dataclasses.replace(self.cfg.federation, seed=self.cfg.seed)

    def client_data(self):
        return [self.train.take(p.sample_ids) for p in self.partitions]

    def server_data(self):
        """Held-out samples outside the non-member split (for pre-training)."""
        if self.cfg.federation.pretrain_rounds == 0:
            return None
        spare = np.setdiff1d(self.holdout.ids, self.split.nonmembers)
        if len(spare) == 0:
            raise DataError("pre-training needs held-out samples outside the non-member split")
        return self.holdout.take(spare)

    def member_images(self):
        return self.train.take(self.split.members)

    def nonmember_images(self):
        return self.holdout.take(self.split.nonmembers)


def prepare(cfg):
    train, holdout = load_pool(cfg.dataset)
    parts = partition_noniid(train, cfg.federation.n_clients, cfg.partition.alpha, cfg.seed, cfg.partition.min_size)
    size = min(cfg.membership.size, len(train), len(holdout))
    split = split_membership(parts, holdout, size, cfg.seed)
    return Experiment(cfg, train, holdout, parts, split)


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def train(cfg, run_dir, resume=True):
    """Train (or continue) the federation described by ``cfg`` in ``run_dir``."""
    run_dir = Path(run_dir)
    exp = prepare(cfg)
    resume_from = None
    if run_dir.exists():
        existing = run_dir / "config.json"
        if existing.exists() and json.loads(existing.read_text()) != cfg.to_dict():
            raise RunError(f"{run_dir} holds a run with a different config")
        ckpts = list_checkpoints(run_dir)
        if resume and ckpts:
            resume_from = ckpts[-1]
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", cfg.to_dict())
    _write_json(run_dir / "membership.json", exp.split.to_dict())
    fed, written = run_federation(exp.fed_cfg, exp.client_data(), run_dir, exp.server_data(), resume_from=resume_from)
    return fed, written


def load_run(run_dir):
    run_dir = Path(run_dir)
    path = run_dir / "config.json"
    if not path.exists():
        raise RunError(f"{run_dir} is not a run directory (no config.json)")
    cfg = from_dict(json.loads(path.read_text()))
    return cfg, prepare(cfg)


def checkpoints(run_dir, rounds=None):
    """``[(round, state), ...]`` for the run's checkpoints."""
    paths = list_checkpoints(run_dir)
    if not paths:
        raise RunError(f"no checkpoints in {run_dir}")
    out = []
    for p in paths:
        state, rnd, _, _ = load_checkpoint(p)
        if rounds is None or rnd in rounds:
            out.append((rnd, state))
    if not out:
        raise RunError(f"none of rounds {sorted(rounds)} checkpointed in {run_dir}")
    return out


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

def passive_config(cfg, tap="encoder"):
    p = cfg.attacks.passive
    return passive.PassiveConfig(p.n_views, tap, p.n_classes, p.top_k, p.head_seed, p.loss_draws, cfg.seed, cfg.federation.policy)


def _attack_dir(run_dir, kind):
    d = Path(run_dir) / "attacks" / kind
    d.mkdir(parents=True, exist_ok=True)
    return d


def _summarise(out, kind, rows):
    summary = {"kind": kind, "rounds": [r for r, _ in rows], "accuracy": [a for _, a in rows]}
    _write_json(out / "summary.json", summary)
    plots.line_plot(out / "accuracy", summary["rounds"], {kind: summary["accuracy"]}, "round", "attack accuracy")
    return summary


def run_passive(exp, run_dir, kind, classifier=None, rounds=None):
    cfg = exp.cfg
    p = cfg.attacks.passive
    classifier = classifier or p.classifier
    out = _attack_dir(run_dir, kind)
    rows, last = [], None
    for rnd, state in checkpoints(run_dir, rounds):
        with label_firewall():
            data = passive.build_attack_dataset(state, exp.split, exp.train, exp.holdout, kind, passive_config(cfg), rnd)
        m = passive.evaluate_attack(data, classifier, range(p.split_seeds), p.test_size)
        report = passive.report_for(data, m, classifier, cfg.seed)
        (out / f"round_{rnd:06d}.json").write_text(report.to_json() + "\n")
        data.write_csv(out / f"features_round_{rnd:06d}.csv")
        rows.append((rnd, m.accuracy))
        last = data
    if kind == "combo":
        plots.scatter3d(out / "scatter3d", last.features, last.labels)
    return _summarise(out, kind, rows)


def run_layers(exp, run_dir, classifier=None, rounds=None):
    cfg = exp.cfg
    p = cfg.attacks.passive
    out = _attack_dir(run_dir, "layers")
    with label_firewall():
        table = passive.layer_sweep(checkpoints(run_dir, rounds), exp.split, exp.train, exp.holdout, p.taps,
                                    passive_config(cfg), classifier or p.classifier, range(p.split_seeds))
    cols = list(p.taps) + ["feature"]
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", *cols])
        for rnd, row in table.items():
            w.writerow([rnd, *(repr(row[c]) for c in cols)])
    _write_json(out / "table.json", {str(k): v for k, v in table.items()})
    rnds = list(table)
    plots.line_plot(out / "accuracy", rnds, {c: [table[r][c] for r in rnds] for c in cols}, "round", "attack accuracy")
    return table


def static_config(cfg):
    s = cfg.attacks.static
    return active.AscentConfig(steps=s.steps, lr=s.lr, seed=cfg.seed)


def run_static(exp, run_dir, threshold=None, sweep=False, rounds=None):
    cfg = exp.cfg
    s = cfg.attacks.static
    out = _attack_dir(run_dir, "active-static")
    rows = []
    for rnd, state in checkpoints(run_dir, rounds):
        with label_firewall():
            pre, post = active.static_deltas(
                state, np.concatenate([exp.member_images(), exp.nonmember_images()]),
                np.concatenate([exp.split.members, exp.split.nonmembers]), static_config(cfg),
                cfg.federation.policy, s.batch_size, s.eval_draws)
        ids, labels = exp.split.ids_and_labels()
        res = active.StaticResult(ids, labels, pre, post)
        best_t, best_acc, curve = active.threshold_sweep(res.deltas, labels)
        t = best_t if threshold is None else float(threshold)
        res.threshold, res.decisions = t, (res.deltas <= t).astype(int)
        m = metrics(res.decisions, labels)
        acc = float(active.threshold_accuracy(res.deltas, labels, t))
        report = passive.AttackReport(
            "active-static", "encoder", rnd, acc, m.precision, m.recall, len(exp.split.members), len(exp.split.nonmembers), cfg.seed,
            {"threshold": t, "threshold_source": "sweep" if threshold is None else "fixed", "best_threshold": best_t,
             "best_accuracy": best_acc, "mean_delta_member": float(res.deltas[labels == 1].mean()),
             "mean_delta_nonmember": float(res.deltas[labels == 0].mean()), "steps": s.steps, "lr": s.lr},
        )
        (out / f"round_{rnd:06d}.json").write_text(report.to_json() + "\n")
        res.write_csv(out / f"deltas_round_{rnd:06d}.csv")
        if sweep:
            with open(out / f"sweep_round_{rnd:06d}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["threshold", "accuracy"])
                w.writerows([repr(a), repr(b)] for a, b in curve)
            plots.threshold_plot(out / f"sweep_round_{rnd:06d}", curve, best_t)
        rows.append((rnd, acc))
    return _summarise(out, "active-static", rows)


def run_in_training(exp, run_dir, threshold=None):
    """Resume the federation from its last checkpoint with an attacking client.

    Targets are the attacker's own samples outside the calibration set
    (known members, for self-consistency) plus as many non-members.
    """
    cfg = exp.cfg
    a = cfg.attacks.in_training
    out = _attack_dir(run_dir, "active-in-training")
    own = exp.partitions[a.attacker].sample_ids
    if len(own) < 2:
        raise DataError("attacker needs at least two samples of its own")
    n_cal = min(len(own) - 1, max(1, int(round(len(own) * a.calibration_fraction))))
    cal, probe = own[:n_cal], own[n_cal:]
    hold = exp.split.nonmembers[: len(probe)]
    target_ids = np.concatenate([probe, hold])
    target_x = np.concatenate([exp.train.take(probe), exp.holdout.take(hold)])
    target_labels = np.r_[np.ones(len(probe), int), np.zeros(len(hold), int)]
    hook = active.InTrainingAttack(
        a.attacker, target_x, target_ids, exp.train.take(cal), cal,
        active.AscentConfig(steps=a.steps, lr=a.lr, seed=cfg.seed), cfg.federation.policy,
        a.honest_training, a.eval_draws, target_labels,
    )
    last = list_checkpoints(run_dir)
    if not last:
        raise RunError(f"no checkpoints in {run_dir}")
    fed = Federation(exp.fed_cfg, exp.client_data(), exp.server_data()).restore(last[-1])
    start = fed.round
    fed.run(run_dir=None, hook=hook, until=start + a.rounds)
    res = hook.decide(threshold, a.quantile)
    td = np.asarray(res["target_decisions"])
    res.update({
        "kind": "active-in-training",
        "start_round": start,
        "attacker": a.attacker,
        "honest_training": a.honest_training,
        "calibration_member_rate": float(np.mean(res["calibration_decisions"])),
        "member_target_member_rate": float(td[target_labels == 1].mean()) if len(probe) else None,
        "nonmember_target_member_rate": float(td[target_labels == 0].mean()) if len(hold) else None,
        "ascent_traces": {str(k): v for k, v in sorted(hook.traces.items())},
    })
    m = metrics(td, target_labels)
    res.update({"accuracy": m.accuracy, "precision": m.precision, "recall": m.recall})
    hook.write_csv(out / "deltas.csv")
    (out / "decisions.json").write_text(active.decisions_json(res) + "\n")
    rounds = sorted(hook.traces)
    if rounds:
        plots.line_plot(out / "ascent_loss", list(range(a.steps + 1)), {f"round {r}": hook.traces[r] for r in rounds},
                        "ascent step", "target loss")
    return res


def attack(run_dir, kind, classifier=None, sweep=False, threshold=None, rounds=None):
    if kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind {kind!r}; choose from {ATTACK_KINDS}")
    _, exp = load_run(run_dir)
    if kind in PASSIVE_KINDS:
        return run_passive(exp, run_dir, kind, classifier, rounds)
    if kind == "layers":
        return run_layers(exp, run_dir, classifier, rounds)
    if kind == "active-static":
        return run_static(exp, run_dir, threshold, sweep, rounds)
    return run_in_training(exp, run_dir, threshold)


# ---------------------------------------------------------------------------
# Reports and figures
# ---------------------------------------------------------------------------

def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"


def report(run_dir):
    """Consolidate per-checkpoint attack reports into report.json / report.md."""
    run_dir = Path(run_dir)
    attacks = {}
    for path in sorted((run_dir / "attacks").glob("*/round_*.json")):
        r = json.loads(path.read_text())
        attacks.setdefault(r["kind"], {})[str(r["round"])] = {k: r[k] for k in ("accuracy", "precision", "recall")}
    in_training = run_dir / "attacks" / "active-in-training" / "decisions.json"
    extra = {}
    if in_training.exists():
        d = json.loads(in_training.read_text())
        extra["active-in-training"] = {k: d[k] for k in ("accuracy", "precision", "recall", "calibration_member_rate",
                                                         "nonmember_target_member_rate", "threshold", "start_round")}
    rounds = sorted({int(k) for v in attacks.values() for k in v})
    warnings = [] if attacks or extra else ["no attack reports found"]
    for w in warnings:
        log.warning("%s: %s", run_dir, w)
    summary = {"rounds": rounds, "attacks": attacks, "in_training": extra, "warnings": warnings}
    _write_json(run_dir / "report.json", summary)

    lines = ["# Membership inference summary", ""]
    if rounds:
        final = str(rounds[-1])
        lines += [f"## Final checkpoint (round {final})", "", "| Attack | Accuracy | Precision | Recall |", "|---|---|---|---|"]
        for kind in sorted(attacks):
            r = attacks[kind].get(final)
            if r:
                lines.append(f"| {kind} | {_fmt(r['accuracy'])} | {_fmt(r['precision'])} | {_fmt(r['recall'])} |")
        lines += ["", "## Accuracy per checkpoint", "", "| Attack | " + " | ".join(map(str, rounds)) + " |",
                  "|---|" + "---|" * len(rounds)]
        for kind in sorted(attacks):
            cells = [_fmt(attacks[kind].get(str(r), {}).get("accuracy")) for r in rounds]
            lines.append(f"| {kind} | " + " | ".join(cells) + " |")
    if extra:
        e = extra["active-in-training"]
        lines += ["", "## In-training attack", "", f"- start round: {e['start_round']}",
                  f"- calibration members classified member: {_fmt(e['calibration_member_rate'])}",
                  f"- non-member targets classified member: {_fmt(e['nonmember_target_member_rate'])}",
                  f"- target accuracy: {_fmt(e['accuracy'])}"]
    for w in warnings:
        lines += ["", f"> warning: {w}"]
    (run_dir / "report.md").write_text("\n".join(lines) + "\n")
    return summary


def plot(run_dir):
    """Overfitting trace plus accuracy-vs-round for every attack run so far."""
    run_dir = Path(run_dir)
    cfg, exp = load_run(run_dir)
    figs = run_dir / "figures"
    written = []
    ckpts = checkpoints(run_dir)
    if len(ckpts) >= 2:
        p = cfg.attacks.passive
        with label_firewall():
            trace = overfit_trace(ckpts, exp.member_images(), exp.nonmember_images(), p.n_views, cfg.federation.policy, cfg.seed, p.loss_draws)
        figs.mkdir(parents=True, exist_ok=True)
        trace.write_csv(figs / "overfit_trace.csv")
        written += plots.overfit_plot(figs / "overfit", trace)
    series = {}
    for path in sorted((run_dir / "attacks").glob("*/summary.json")):
        s = json.loads(path.read_text())
        series[s["kind"]] = (s["rounds"], s["accuracy"])
    if series:
        fig_rounds = sorted({r for rs, _ in series.values() for r in rs})
        aligned = {k: [dict(zip(rs, accs)).get(r, np.nan) for r in fig_rounds] for k, (rs, accs) in series.items()}
        written += plots.line_plot(figs / "attack_accuracy", fig_rounds, aligned, "round", "attack accuracy")
    return written
