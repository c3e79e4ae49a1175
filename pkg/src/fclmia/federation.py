"""Federated MoCo: client selection, local training fan-out, aggregation,
pre-training and checkpointing.

Only the query encoder is aggregated.  Each selected client starts a round
from the global parameters (query and key encoder alike).  Memory queues
never leave the client; with ``refresh_queue`` (the default) a client
re-fills its queue from its own data under the received global model at
the start of every round, otherwise it carries the queue over.  Keys
computed by the previous local model are nearly orthogonal to the new
global model's features and give no repulsion, which collapses training.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import checkpoint as ckpt
from .contrastive.encoder import EncoderConfig, init_params, normalize
from .contrastive.moco import MoCoState, fill_queue, local_train
from .datasets import AugmentationPolicy, label_firewall
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class FederationConfig:
    n_clients: int = 4
    clients_per_round: int = 4
    server_lr: float = 1.0
    rounds: int = 40
    local_epochs: int = 10
    checkpoint_every: int = 100
    pretrain_rounds: int = 0
    seed: int = 0
    # local MoCo hyperparameters
    lr: float = 0.1
    batch_size: int = 32
    tau: float = 0.2
    momentum: float = 0.99
    queue_size: int = 512
    refresh_queue: bool = True
    arch: EncoderConfig = field(default_factory=EncoderConfig)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ValueError("need 1 <= clients_per_round <= n_clients")
        if self.server_lr <= 0:
            raise ValueError("server_lr must be > 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.rounds < 0 or self.pretrain_rounds < 0:
            raise ValueError("round counts must be non-negative")


@dataclass
class RoundRecord:
    round: int
    clients: list
    losses: list
    checksum: str
    wall_time: float = 0.0


class AttackerHook:
    """Callbacks giving one client control over its own local model.

    The base class is a no-op: the attacker trains honestly and uploads the
    result unchanged.
    """

    honest_training = True

    def __init__(self, client_id):
        self.client_id = client_id

    def before_upload(self, t, state, global_params, rng):
        return state

    def after_aggregate(self, t, state, new_global):
        pass

    def skipped(self, t):
        pass


def aggregate(global_params, updates, server_lr=1.0):
    """``G + (server_lr / n) * sum_i (L_i - G)``."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    total = global_params.zeros_like()
    for upd in updates:
        total = total + (upd - global_params)
    return global_params.axpy(server_lr / len(updates), total)


@dataclass
class ClientState:
    client_id: int
    data: np.ndarray
    queue: np.ndarray
    queue_ptr: int = 0


def run_round(global_params, clients, cfg, t, hook=None):
    """One federated round.

    Returns ``(new_global, new_clients, record)``; the inputs are not
    modified, so an exception leaves the caller's state untouched.
    """
    start = time.perf_counter()
    sel_rng = stream(cfg.seed, "select", t)
    if cfg.clients_per_round == cfg.n_clients:
        selected = list(range(cfg.n_clients))
    else:
        selected = sorted(int(c) for c in sel_rng.choice(cfg.n_clients, cfg.clients_per_round, replace=False))
    new_clients = list(clients)
    updates, losses = [], []
    attacker_state = None
    for cid in selected:
        client = clients[cid]
        rng = stream(cfg.seed, "client", t, cid)
        state = MoCoState(global_params.copy(), global_params.copy(), client.queue, client.queue_ptr, cfg.momentum, cfg.tau, cfg.arch)
        if cfg.refresh_queue:
            state = fill_queue(state, client.data, cfg.policy, stream(cfg.seed, "queue", t, cid))
        is_attacker = hook is not None and cid == hook.client_id
        trace = []
        if not is_attacker or hook.honest_training:
            state, trace = local_train(state, client.data, cfg.local_epochs, cfg.lr, cfg.policy, rng, cfg.batch_size)
        if is_attacker:
            state = hook.before_upload(t, state, global_params, rng)
            attacker_state = state
        updates.append(state.query)
        losses.append(float(np.mean(trace)) if trace else float("nan"))
        new_clients[cid] = ClientState(cid, client.data, state.queue, state.queue_ptr)
    new_global = aggregate(global_params, updates, cfg.server_lr)
    if hook is not None:
        if attacker_state is None:
            hook.skipped(t)
        else:
            hook.after_aggregate(t, attacker_state, new_global)
    record = RoundRecord(t, selected, losses, new_global.checksum(), time.perf_counter() - start)
    return new_global, new_clients, record


class Federation:
    """Stateful driver around :func:`run_round` with checkpoint/resume."""

    def __init__(self, cfg, client_data, server_data=None, dtype=np.float32):
        if len(client_data) != cfg.n_clients:
            raise ValueError(f"expected data for {cfg.n_clients} clients, got {len(client_data)}")
        for cid, d in enumerate(client_data):
            if len(d) == 0:
                raise ValueError(f"client {cid} has no data")
        self.cfg = cfg
        self.server_data = server_data
        self.global_params = init_params(cfg.arch, stream(cfg.seed, "init"), dtype)
        self.clients = [
            ClientState(cid, np.asarray(d), self._initial_queue(cid, d, dtype)) for cid, d in enumerate(client_data)
        ]
        self.server_queue = self._initial_queue("server", server_data, dtype)
        self.server_ptr = 0
        self.round = 0
        self.pretrained = cfg.pretrain_rounds == 0
        self.records = []

    def _initial_queue(self, tag, data, dtype):
        """Client queues start from real keys of the client's own data."""
        cfg = self.cfg
        rng = stream(cfg.seed, "queue", tag)
        queue, _ = normalize(rng.normal(size=(cfg.queue_size, cfg.arch.dim)))
        if data is None or len(data) == 0:
            return queue.astype(dtype)
        state = MoCoState(self.global_params, self.global_params, queue.astype(dtype), 0, cfg.momentum, cfg.tau, cfg.arch)
        return fill_queue(state, data, cfg.policy, rng).queue

    # -- training ------------------------------------------------------------

    def pretrain(self):
        """Server-side MoCo on the held server pool (``pretrain_rounds`` times)."""
        cfg = self.cfg
        if self.pretrained:
            return
        if self.server_data is None or len(self.server_data) == 0:
            raise ValueError("pre-training requested but no server data supplied")
        for p in range(1, cfg.pretrain_rounds + 1):
            state = MoCoState(self.global_params, self.global_params.copy(), self.server_queue, self.server_ptr, cfg.momentum, cfg.tau, cfg.arch)
            state, _ = local_train(state, self.server_data, cfg.local_epochs, cfg.lr, cfg.policy, stream(cfg.seed, "pretrain", p), cfg.batch_size)
            self.global_params, self.server_queue, self.server_ptr = state.query, state.queue, state.queue_ptr
        self.pretrained = True

    def step(self, hook=None):
        t = self.round + 1
        with label_firewall():
            new_global, new_clients, record = run_round(self.global_params, self.clients, self.cfg, t, hook)
        self.global_params, self.clients, self.round = new_global, new_clients, t
        self.records.append(record)
        return record

    def run(self, run_dir=None, hook=None, until=None):
        """Train to round ``until`` (default ``cfg.rounds``), checkpointing
        every ``checkpoint_every`` rounds and at the final round.  Returns the
        checkpoint paths written."""
        until = self.cfg.rounds if until is None else until
        with label_firewall():
            self.pretrain()
        written = []
        while self.round < until:
            record = self.step(hook)
            log.info("round %d clients=%s loss=%s", record.round, record.clients, np.round(record.losses, 4).tolist())
            if run_dir is not None:
                self._append_record(run_dir, record)
                if record.round % self.cfg.checkpoint_every == 0 or record.round == until:
                    try:
                        written.append(self.save(run_dir))
                    except OSError as exc:
                        raise OSError(f"round {record.round}: checkpoint write failed: {exc}") from exc
        return written

    # -- persistence ---------------------------------------------------------

    def observer_state(self, client_id=0):
        """Global model packaged with one client's queue (what that client
        would hold at the start of the next round)."""
        cfg = self.cfg
        c = self.clients[client_id]
        state = MoCoState(self.global_params.copy(), self.global_params.copy(), c.queue.copy(), c.queue_ptr, cfg.momentum, cfg.tau, cfg.arch)
        if cfg.refresh_queue:
            state = fill_queue(state, c.data, cfg.policy, stream(cfg.seed, "queue", self.round + 1, client_id))
        return state

    def save(self, run_dir, observer=0):
        extras = {f"client{c.client_id}_queue": c.queue for c in self.clients}
        extras["client_ptrs"] = np.array([c.queue_ptr for c in self.clients], dtype=np.int64)
        extras["server_queue"] = self.server_queue
        extras["server_ptr"] = np.array([self.server_ptr], dtype=np.int64)
        meta = {"observer": observer, "pretrained": self.pretrained}
        return ckpt.save_checkpoint(run_dir, self.observer_state(observer), self.round, extras, meta)

    def restore(self, path):
        state, t, extras, meta = ckpt.load_checkpoint(path)
        if state.arch != self.cfg.arch:
            raise ValueError("checkpoint architecture differs from config")
        self.global_params = state.query
        ptrs = extras["client_ptrs"]
        self.clients = [ClientState(c.client_id, c.data, extras[f"client{c.client_id}_queue"], int(ptrs[c.client_id])) for c in self.clients]
        self.server_queue = extras["server_queue"]
        self.server_ptr = int(extras["server_ptr"][0])
        self.pretrained = bool(meta.get("pretrained", True))
        self.round = t
        return self

    @staticmethod
    def _rounds_path(run_dir):
        return Path(run_dir) / "rounds.csv"

    def _append_record(self, run_dir, record):
        path = self._rounds_path(run_dir)
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["round", "clients", "losses", "checksum"])
            w.writerow([record.round, " ".join(map(str, record.clients)), " ".join(repr(x) for x in record.losses), record.checksum])


def truncate_rounds(run_dir, upto):
    """Drop ``rounds.csv`` rows after round ``upto`` (used when resuming)."""
    path = Path(run_dir) / "rounds.csv"
    if not path.exists():
        return
    rows = list(csv.reader(io.StringIO(path.read_text())))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= upto]
    buf = io.StringIO()
    csv.writer(buf).writerows(keep)
    path.write_text(buf.getvalue())


def read_rounds(run_dir):
    path = Path(run_dir) / "rounds.csv"
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RoundRecord(int(row["round"]), [int(c) for c in row["clients"].split()], [float(x) for x in row["losses"].split()], row["checksum"]))
    return out


def run_federation(cfg, client_data, run_dir=None, server_data=None, hook=None, resume_from=None, until=None):
    """Build (or resume) a federation and train it.  Returns ``(federation, checkpoints)``."""
    fed = Federation(cfg, client_data, server_data)
    if resume_from is not None:
        fed.restore(resume_from)
        if run_dir is not None:
            truncate_rounds(run_dir, fed.round)
    written = fed.run(run_dir, hook=hook, until=until)
    return fed, written
