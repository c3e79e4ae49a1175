"""Sample pools, augmentation, non-IID partitioning and membership splits."""
from __future__ import annotations

import contextlib
import contextvars
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .rng import stream

POOL_FORMAT = "fclmia-pool"
POOL_VERSION = 1

# (train, held-out, classes, image shape) of the full-scale benchmarks.
PAPER_DATASETS = {
    "svhn": (73_257, 26_032, 10, (32, 32, 3)),
    "cifar10": (50_000, 10_000, 10, (32, 32, 3)),
    "cifar100": (50_000, 10_000, 100, (32, 32, 3)),
}


class DataError(ValueError):
    """Raised for missing, malformed or insufficient data."""


class LabelAccessError(RuntimeError):
    """Raised when a label is read inside a label-free code path."""


# ---------------------------------------------------------------------------
# Label firewall
# ---------------------------------------------------------------------------

_labels_forbidden = contextvars.ContextVar("labels_forbidden", default=False)


@contextlib.contextmanager
def label_firewall():
    """Forbid label reads for the duration of the block.

    Training and attack entry points run inside this context; any access
    to ``SamplePool.labels`` or ``Sample.label`` raises LabelAccessError.
    """
    token = _labels_forbidden.set(True)
    try:
        yield
    finally:
        _labels_forbidden.reset(token)


def _check_label_access():
    if _labels_forbidden.get():
        raise LabelAccessError("labels are not available to training or attack code")


@dataclass(frozen=True)
class Sample:
    id: int
    pixels: np.ndarray
    _label: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.pixels)):
            raise DataError(f"sample {self.id}: non-finite pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"sample {self.id}: pixels outside [0, 1]")

    @property
    def label(self):
        _check_label_access()
        return self._label


class SamplePool:
    """Array-backed collection of samples sharing one image shape.

    ``pixels`` is ``(N, H, W, C)`` float32 in [0, 1]; ``ids`` are unique
    int64.  Labels are stored but only reachable through the audited
    ``labels`` property.
    """

    def __init__(self, ids, pixels, labels=None, class_names=None):
        ids = np.asarray(ids, dtype=np.int64)
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.ndim != 4 or len(ids) != len(pixels):
            raise DataError("pixels must be (N, H, W, C) with one id per sample")
        if len(np.unique(ids)) != len(ids):
            raise DataError("sample ids must be unique within a pool")
        if len(pixels) and (not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0):
            raise DataError("malformed pixel range: values must be finite and within [0, 1]")
        self.ids = ids
        self.pixels = pixels
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int32)
        self.class_names = list(class_names) if class_names is not None else None
        self.label_reads = 0
        self._index = {int(i): k for k, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def shape(self):
        return self.pixels.shape[1:]

    @property
    def labels(self):
        _check_label_access()
        self.label_reads += 1
        return self._labels

    def index_of(self, ids):
        try:
            return np.array([self._index[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown sample id {exc.args[0]}") from None

    def take(self, ids):
        return self.pixels[self.index_of(ids)]

    def subset(self, ids):
        idx = self.index_of(ids)
        labels = None if self._labels is None else self._labels[idx]
        return SamplePool(self.ids[idx], self.pixels[idx], labels, self.class_names)

    def sample(self, i):
        k = self._index[int(i)]
        label = None if self._labels is None else int(self._labels[k])
        return Sample(int(i), self.pixels[k], label)

    def checksum(self):
        import hashlib

        h = hashlib.sha256(self.ids.tobytes())
        h.update(self.pixels.tobytes())
        if self._labels is not None:
            h.update(self._labels.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    """Describes where a pool comes from.

    ``kind`` is ``"synthetic"``, ``"disk"``, or one of the full-scale names
    in PAPER_DATASETS (which must be supplied on disk at ``path``).
    """

    kind: str = "synthetic"
    n_classes: int = 4
    n_train: int = 200
    n_holdout: int = 200
    image_size: int = 16
    channels: int = 3
    latent_dim: int = 12
    grid: int = 4
    class_sep: float = 1.5
    sample_spread: float = 1.0
    pixel_noise: float = 0.08
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind != "synthetic" and self.kind != "disk" and self.kind not in PAPER_DATASETS:
            raise DataError(f"unknown dataset kind {self.kind!r}")


def _synthetic(spec):
    """Gaussian class blobs in a latent space, rendered through a fixed smooth decoder."""
    g = spec.grid
    s, c, k = spec.image_size, spec.channels, spec.latent_dim
    rng = stream(spec.seed, "synthetic", "decoder")
    decoder = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, g * g * c))
    means = rng.normal(0.0, spec.class_sep, size=(spec.n_classes, k))

    total = spec.n_train + spec.n_holdout
    rng = stream(spec.seed, "synthetic", "samples")
    labels = rng.permutation(np.arange(total) % spec.n_classes).astype(np.int32)
    z = means[labels] + rng.normal(0.0, spec.sample_spread, size=(total, k))
    low = (z @ decoder).reshape(total, g, g, c)
    full = np.tile(np.array([[0.0, 0.0, g, g]]), (total, 1))
    up = kernels.crop_resize_numpy(low, full, s, s)
    up = up + rng.normal(0.0, spec.pixel_noise, size=up.shape)
    pixels = (1.0 / (1.0 + np.exp(-2.0 * up))).astype(np.float32)
    names = [f"blob{i}" for i in range(spec.n_classes)]
    ids = np.arange(total, dtype=np.int64)
    tr = slice(0, spec.n_train)
    ho = slice(spec.n_train, total)
    return (
        SamplePool(ids[tr], pixels[tr], labels[tr], names),
        SamplePool(ids[ho], pixels[ho], labels[ho], names),
    )


def save_pool(path, train, holdout):
    """Write the on-disk pool format (train samples first, then held-out)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pixels = np.concatenate([train.pixels, holdout.pixels]).astype("<f4")
    labels = np.concatenate([train._labels, holdout._labels]).astype("<i4")
    manifest = {
        "format": POOL_FORMAT,
        "version": POOL_VERSION,
        "count": int(len(pixels)),
        "train_count": int(len(train)),
        "shape": list(train.shape),
        "class_names": train.class_names or [],
        "byte_order": "little",
        "pixels": "pixels.f32",
        "labels": "labels.i32",
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    pixels.tofile(path / "pixels.f32")
    labels.tofile(path / "labels.i32")


def _from_disk(spec):
    if not spec.path:
        raise DataError(f"dataset kind {spec.kind!r} needs a path to a converted pool")
    root = Path(spec.path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"missing pool manifest under {root}") from None
    if manifest.get("format") != POOL_FORMAT:
        raise DataError(f"{root}: not a {POOL_FORMAT} directory")
    count, n_tr = int(manifest["count"]), int(manifest["train_count"])
    shape = tuple(manifest["shape"])
    try:
        pixels = np.fromfile(root / manifest.get("pixels", "pixels.f32"), dtype="<f4")
        labels = np.fromfile(root / manifest.get("labels", "labels.i32"), dtype="<i4")
    except FileNotFoundError as exc:
        raise DataError(f"missing pool file: {exc.filename}") from None
    if pixels.size != count * int(np.prod(shape)) or labels.size != count:
        raise DataError(f"{root}: file sizes disagree with manifest")
    pixels = pixels.reshape((count, *shape)).astype(np.float32)
    labels = labels.astype(np.int32)
    names = manifest.get("class_names") or None
    ids = np.arange(count, dtype=np.int64)
    train = SamplePool(ids[:n_tr], pixels[:n_tr], labels[:n_tr], names)
    holdout = SamplePool(ids[n_tr:], pixels[n_tr:], labels[n_tr:], names)
    if spec.kind in PAPER_DATASETS:
        exp_tr, exp_ho, _, exp_shape = PAPER_DATASETS[spec.kind]
        if (len(train), len(holdout), train.shape) != (exp_tr, exp_ho, exp_shape):
            raise DataError(
                f"{spec.kind} expects {exp_tr}/{exp_ho} samples of shape {exp_shape}, "
                f"found {len(train)}/{len(holdout)} of shape {train.shape}"
            )
        return train, holdout
    rng = stream(spec.seed, "disk-subset")
    if spec.n_train > len(train) or spec.n_holdout > len(holdout):
        raise DataError("requested subset larger than the on-disk pool")
    tr_ids = np.sort(rng.choice(train.ids, spec.n_train, replace=False))
    ho_ids = np.sort(rng.choice(holdout.ids, spec.n_holdout, replace=False))
    return train.subset(tr_ids), holdout.subset(ho_ids)


def load_pool(spec):
    """Return ``(train, holdout)`` pools, deterministic given ``spec.seed``."""
    if spec.kind == "synthetic":
        return _synthetic(spec)
    return _from_disk(spec)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@dataclass
class ClientPartition:
    client_id: int
    sample_ids: np.ndarray
    seed: int
    alpha: float


def partition_noniid(pool, n_clients, alpha, seed, min_size=1, max_tries=100):
    """Dirichlet label-proportion split of ``pool`` over ``n_clients``.

    For each class a proportion vector ``p ~ Dir(alpha)`` decides how that
    class's samples are dealt to clients.  Draws are repeated (up to
    ``max_tries``) until every client holds at least ``min_size`` samples.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if n_clients * min_size > len(pool):
        raise DataError(f"cannot give {n_clients} clients {min_size} samples from a pool of {len(pool)}")
    labels = pool.labels
    if labels is None:
        labels = np.zeros(len(pool), dtype=np.int32)
    rng = stream(seed, "partition")
    if n_clients == 1:
        return [ClientPartition(0, pool.ids.copy(), seed, alpha)]
    for _ in range(max_tries):
        buckets = [[] for _ in range(n_clients)]
        for c in np.unique(labels):
            members = pool.ids[labels == c]
            members = members[rng.permutation(len(members))]
            p = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(p)[:-1] * len(members)).astype(np.int64)
            for k, part in enumerate(np.split(members, cuts)):
                buckets[k].extend(part.tolist())
        if min(len(b) for b in buckets) >= min_size:
            break
    else:
        raise DataError(f"no partition with min_size={min_size} found in {max_tries} draws")
    return [ClientPartition(k, np.sort(np.array(b, dtype=np.int64)), seed, alpha) for k, b in enumerate(buckets)]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple = (0.75, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    gray_p: float = 0.1

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        rlo, rhi = self.crop_ratio
        if not 0 < rlo <= rhi:
            raise ValueError("crop_ratio must satisfy 0 < lo <= hi")
        for name in ("flip_p", "gray_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if not (0 <= self.brightness < 1 and 0 <= self.contrast < 1):
            raise ValueError("jitter ranges must lie in [0, 1)")

    @classmethod
    def identity(cls):
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, brightness=0.0, contrast=0.0, gray_p=0.0)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def augment(images, policy, rng):
    """One random view per image of an ``(N, H, W, C)`` batch."""
    n, h, w, c = images.shape
    area = rng.uniform(*policy.crop_scale, size=n)
    ratio = np.exp(rng.uniform(np.log(policy.crop_ratio[0]), np.log(policy.crop_ratio[1]), size=n))
    bh = np.minimum(np.sqrt(area / ratio) * h, h)
    bw = np.minimum(np.sqrt(area * ratio) * w, w)
    y0 = rng.uniform(size=n) * (h - bh)
    x0 = rng.uniform(size=n) * (w - bw)
    flip = rng.uniform(size=n) < policy.flip_p
    bright = rng.uniform(1 - policy.brightness, 1 + policy.brightness, size=n)
    contr = rng.uniform(1 - policy.contrast, 1 + policy.contrast, size=n)
    gray = rng.uniform(size=n) < policy.gray_p

    boxes = np.stack([y0, x0, bh, bw], axis=1)
    out = kernels.crop_resize(images, boxes, h, w)
    out[flip] = out[flip][:, :, ::-1]
    out = out * bright[:, None, None, None].astype(out.dtype)
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    out = (out - mean) * contr[:, None, None, None].astype(out.dtype) + mean
    if c == 3 and gray.any():
        lum = out[gray] @ np.array([0.299, 0.587, 0.114], dtype=out.dtype)
        out[gray] = np.repeat(lum[..., None], 3, axis=-1)
    return np.clip(out, 0.0, 1.0).astype(images.dtype, copy=False)


def make_views(pixels, n, policy, rng):
    """``n`` augmented views of a single ``(H, W, C)`` image."""
    if n < 2:
        raise ValueError("need at least two views")
    pixels = np.asarray(pixels)
    return augment(np.repeat(pixels[None], n, axis=0), policy, rng)


# ---------------------------------------------------------------------------
# Membership split
# ---------------------------------------------------------------------------

@dataclass
class MembershipSplit:
    members: np.ndarray
    nonmembers: np.ndarray

    def __post_init__(self):
        if len(np.intersect1d(self.members, self.nonmembers)):
            raise DataError("member and non-member sets overlap")

    def ids_and_labels(self):
        ids = np.concatenate([self.members, self.nonmembers])
        labels = np.concatenate([np.ones(len(self.members), np.int64), np.zeros(len(self.nonmembers), np.int64)])
        return ids, labels

    def to_dict(self):
        return {"members": self.members.tolist(), "nonmembers": self.nonmembers.tolist()}


def split_membership(partitions, holdout, size, seed):
    """Balanced member / non-member split.

    ``partitions`` may be ClientPartition objects or plain id arrays; members
    are drawn from their union, non-members from ``holdout`` (a pool or ids).
    """
    train_ids = np.unique(np.concatenate([getattr(p, "sample_ids", p) for p in partitions]))
    hold_ids = np.asarray(getattr(holdout, "ids", holdout), dtype=np.int64)
    if size < 1 or size > min(len(train_ids), len(hold_ids)):
        raise DataError(f"split size {size} exceeds pools ({len(train_ids)} train, {len(hold_ids)} held-out)")
    rng = stream(seed, "membership-split")
    members = np.sort(rng.choice(train_ids, size, replace=False))
    nonmembers = np.sort(rng.choice(hold_ids, size, replace=False))
    return MembershipSplit(members, nonmembers)
