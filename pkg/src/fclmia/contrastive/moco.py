"""MoCo state, InfoNCE loss, momentum update, queue and local SGD."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..datasets import augment
from . import encoder as enc
from .params import ParamVector


@dataclass
class MoCoState:
    query: ParamVector
    key: ParamVector
    queue: np.ndarray
    queue_ptr: int
    m: float
    tau: float
    arch: enc.EncoderConfig

    def __post_init__(self):
        if self.query.shapes() != self.key.shapes():
            raise ValueError("key and query parameter shapes differ")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("temperature must be > 0")
        if self.queue.ndim != 2 or self.queue.shape[1] != self.arch.dim:
            raise ValueError("queue must be (K, dim)")
        if not 0 <= self.queue_ptr < len(self.queue):
            raise ValueError("queue pointer out of range")

    @property
    def dim(self):
        return self.arch.dim

    def copy(self):
        return dataclasses.replace(self, query=self.query.copy(), key=self.key.copy(), queue=self.queue.copy())

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        h.update(self.query.checksum().encode())
        h.update(self.key.checksum().encode())
        h.update(self.queue.tobytes())
        h.update(f"{self.queue_ptr}|{self.m!r}|{self.tau!r}".encode())
        return h.hexdigest()


def init_state(arch, rng, queue_size=512, m=0.99, tau=0.2, dtype=np.float32, data=None, policy=None):
    """Fresh state with identical query/key encoders.

    The queue holds random unit vectors unless ``data`` is given, in which
    case it is filled with key-encoder features of augmented samples (see
    :func:`fill_queue`).
    """
    query = enc.init_params(arch, rng, dtype)
    queue, _ = enc.normalize(rng.normal(size=(queue_size, arch.dim)))
    state = MoCoState(query, query.copy(), queue.astype(dtype), 0, m, tau, arch)
    if data is not None:
        state = fill_queue(state, data, policy, rng)
    return state


def fill_queue(state, data, policy, rng):
    """Replace every queue row with a key of a randomly drawn augmented sample.

    A random-vector queue is nearly orthogonal to all real features and
    therefore exerts no repulsion between real samples; early SGD then
    pulls every representation together.  Starting from real keys avoids
    that collapse.
    """
    from ..datasets import AugmentationPolicy

    policy = policy or AugmentationPolicy()
    data = np.asarray(data)
    picks = data[rng.integers(0, len(data), size=len(state.queue))]
    keys = enc.encode(state.key, state.arch, augment(picks, policy, rng), normalize_rows=True)
    return dataclasses.replace(state, queue=keys.astype(state.queue.dtype), queue_ptr=0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def info_nce_loss(q, k_pos, queue, tau):
    """InfoNCE for a single query: cross-entropy of the positive among
    ``[k_pos] + queue`` at temperature ``tau`` (positive kept in the
    denominator)."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    q, k_pos, queue = np.asarray(q, float), np.asarray(k_pos, float), np.asarray(queue, float)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k_pos)) and np.all(np.isfinite(queue))):
        raise ValueError("non-finite input")
    losses, _ = info_nce(q[None], k_pos[None], queue, tau)
    return float(losses[0])


def info_nce(q, k, queue, tau):
    """Batched InfoNCE.  Returns per-row losses and d(sum of losses)/dq."""
    logits = np.concatenate([(q * k).sum(axis=1, keepdims=True), q @ queue.T], axis=1) / tau
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    z = e.sum(axis=1, keepdims=True)
    losses = (np.log(z) + top - logits[:, :1])[:, 0]
    p = e / z
    grad_q = (p[:, :1] * k + p[:, 1:] @ queue - k) / tau
    return losses, grad_q


# ---------------------------------------------------------------------------
# Momentum encoder and queue
# ---------------------------------------------------------------------------

def momentum_update(key, query, m):
    """``m * key + (1 - m) * query`` elementwise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    return key * m + query * (1.0 - m)


def enqueue(state, new_keys):
    """Ring-buffer write of ``new_keys`` at the queue pointer."""
    new_keys = np.asarray(new_keys)
    size = len(state.queue)
    if new_keys.ndim != 2 or new_keys.shape[1] != state.queue.shape[1]:
        raise ValueError(f"keys must be (B, {state.queue.shape[1]})")
    if len(new_keys) > size:
        raise ValueError("more keys than queue slots")
    queue = state.queue.copy()
    rows = (state.queue_ptr + np.arange(len(new_keys))) % size
    queue[rows] = new_keys.astype(queue.dtype, copy=False)
    return dataclasses.replace(state, queue=queue, queue_ptr=int((state.queue_ptr + len(new_keys)) % size))


# ---------------------------------------------------------------------------
# Symmetric two-view objective
# ---------------------------------------------------------------------------

def symmetric_loss(state, v1, v2, with_grad=True):
    """Per-sample ``L1 + L2`` for paired views and (optionally) the
    gradient of their mean w.r.t. the query parameters.

    ``L1`` queries with view 1 against the key of view 2; ``L2`` swaps the
    roles.  Keys come from the key encoder and carry no gradient.
    Returns ``(losses, grads, keys_for_view2)``.
    """
    b = len(v1)
    both = np.concatenate([v1, v2])
    kout, _ = enc.forward(state.key, state.arch, np.concatenate([v2, v1]))
    keys, _ = enc.normalize(kout["encoder"])
    qout, cache = enc.forward(state.query, state.arch, both, keep_cache=with_grad)
    q, norm = enc.normalize(qout["encoder"])
    queue = state.queue.astype(q.dtype, copy=False)
    losses, dq = info_nce(q, keys, queue, state.tau)
    per_sample = losses[:b] + losses[b:]
    if not with_grad:
        return per_sample, None, keys[:b]
    dz = enc.normalize_backward(q, norm, dq / b)
    grads = enc.backward(state.query, state.arch, cache, dz)
    return per_sample, grads, keys[:b]


def per_sample_loss(state, pixels, policy, rng):
    """Symmetric two-view loss of one ``(H, W, C)`` sample against the
    state's current queue."""
    return float(sample_losses(state, np.asarray(pixels)[None], policy, rng)[0])


def sample_losses(state, images, policy, rng, draws=1):
    """Per-sample symmetric loss for a batch, averaged over ``draws``
    independent view pairs."""
    total = np.zeros(len(images))
    for _ in range(draws):
        v1 = augment(images, policy, rng)
        v2 = augment(images, policy, rng)
        losses, _, _ = symmetric_loss(state, v1, v2, with_grad=False)
        total += losses
    return total / draws


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

def sgd_step(params, grads, lr):
    return params.axpy(-lr, grads)


def local_train(state, data, epochs, lr, policy, rng, batch_size=32):
    """MoCo SGD on ``data`` (an ``(N, H, W, C)`` array).

    Every step: two views per sample, symmetric InfoNCE, SGD on the query
    encoder, momentum update of the key encoder, enqueue of the keys.
    Returns ``(new_state, per_epoch_mean_losses)``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr <= 0:
        raise ValueError("lr must be > 0")
    data = np.asarray(data)
    if len(data) == 0:
        raise ValueError("no training data")
    state = state.copy()
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        step_losses, weights = [], []
        for start in range(0, len(data), batch_size):
            xb = data[order[start : start + batch_size]]
            v1 = augment(xb, policy, rng)
            v2 = augment(xb, policy, rng)
            losses, grads, keys = symmetric_loss(state, v1, v2)
            query = sgd_step(state.query, grads, lr)
            key = momentum_update(state.key, query, state.m)
            state = enqueue(dataclasses.replace(state, query=query, key=key), keys[: len(state.queue)])
            step_losses.append(losses.mean())
            weights.append(len(xb))
        trace.append(float(np.average(step_losses, weights=weights)))
    return state, trace
