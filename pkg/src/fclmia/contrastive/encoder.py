"""Small convolutional encoder with named output taps and manual backprop.

Layout is NHWC.  Each block is ``conv3x3(stride) -> GroupNorm -> ReLU``
(GroupNorm is per-sample, so there are no batch statistics to aggregate);
after the last block a global average pool feeds a linear head of width
``dim``.  Inputs are shifted by -0.5 before the first block.

Taps: ``layer1`` .. ``layerN`` (flattened block outputs), ``avgpool`` and
``encoder`` (the head output).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from .params import ParamVector


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (1, 2, 2, 2)
    dim: int = 64
    in_channels: int = 3
    groups: int = 4

    def __post_init__(self):
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be non-empty and of equal length")
        if self.groups < 0 or (self.groups and any(c % self.groups for c in self.channels)):
            raise ValueError("groups must divide every channel count (0 disables GroupNorm)")

    @property
    def taps(self):
        return tuple(f"layer{i + 1}" for i in range(len(self.channels))) + ("avgpool", "encoder")

    def to_dict(self):
        return {"channels": list(self.channels), "strides": list(self.strides), "dim": self.dim, "in_channels": self.in_channels, "groups": self.groups}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["channels"]), tuple(d["strides"]), int(d["dim"]), int(d.get("in_channels", 3)), int(d.get("groups", 4)))


def init_params(arch, rng, dtype=np.float32):
    """He-normal conv weights, zero biases, unit GroupNorm gains."""
    data = {}
    c_in = arch.in_channels
    for i, c_out in enumerate(arch.channels):
        fan_in = 9 * c_in
        data[f"layer{i + 1}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, c_out)).astype(dtype)
        data[f"layer{i + 1}.b"] = np.zeros(c_out, dtype=dtype)
        if arch.groups:
            data[f"layer{i + 1}.gn_scale"] = np.ones(c_out, dtype=dtype)
            data[f"layer{i + 1}.gn_shift"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    data["head.w"] = rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, arch.dim)).astype(dtype)
    data["head.b"] = np.zeros(arch.dim, dtype=dtype)
    return ParamVector(data)


_GN_EPS = 1e-5


def _group_norm(y, n, groups):
    """Normalise ``(n*h*w, c)`` rows per sample and channel group."""
    c = y.shape[1]
    g = y.reshape(n, -1, groups, c // groups)
    mean = g.mean(axis=(1, 3), keepdims=True)
    var = g.var(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + _GN_EPS)
    xhat = ((g - mean) * inv).reshape(y.shape)
    return xhat, inv


def _group_norm_backward(dxhat, xhat, inv, n, groups):
    c = dxhat.shape[1]
    dg = dxhat.reshape(n, -1, groups, c // groups)
    xg = xhat.reshape(dg.shape)
    mean_d = dg.mean(axis=(1, 3), keepdims=True)
    mean_dx = (dg * xg).mean(axis=(1, 3), keepdims=True)
    return (inv * (dg - mean_d - xg * mean_dx)).reshape(dxhat.shape)


def _out_size(n, stride):
    return (n + 2 - 3) // stride + 1


def forward(params, arch, x, taps=("encoder",), keep_cache=False):
    """Run the encoder.  Returns ``(outputs, cache)``.

    ``outputs`` maps each requested tap to an ``(N, features)`` array.  The
    forward pass stops after the deepest requested tap unless a cache for
    backprop is requested.
    """
    unknown = set(taps) - set(arch.taps)
    if unknown:
        raise KeyError(f"unknown tap(s) {sorted(unknown)}; available: {arch.taps}")
    if x.ndim != 4 or x.shape[3] != arch.in_channels:
        raise ValueError(f"expected (N, H, W, {arch.in_channels}) input, got {x.shape}")
    if len(x) == 0:
        raise ValueError("empty batch")
    dtype = params["head.w"].dtype
    h = x.astype(dtype) - dtype.type(0.5)
    order = arch.taps
    last = max(order.index(t) for t in taps) if not keep_cache else len(order) - 1
    out, cache = {}, {"blocks": []}
    n = len(h)
    for i, stride in enumerate(arch.strides):
        name = f"layer{i + 1}"
        hp = np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ho, wo = _out_size(h.shape[1], stride), _out_size(h.shape[2], stride)
        cols = kernels.im2col(hp, 3, stride, ho, wo)
        y = cols @ params[f"{name}.w"] + params[f"{name}.b"]
        xhat = inv = None
        if arch.groups:
            xhat, inv = _group_norm(y, n, arch.groups)
            y = xhat * params[f"{name}.gn_scale"] + params[f"{name}.gn_shift"]
        np.maximum(y, 0, out=y)
        if keep_cache:
            cache["blocks"].append((hp.shape, cols, y > 0, stride, ho, wo, xhat, inv))
        h = y.reshape(n, ho, wo, -1)
        if name in taps:
            out[name] = h.reshape(n, -1)
        if order.index(name) >= last:
            return out, cache
    pooled = h.mean(axis=(1, 2))
    if keep_cache:
        cache["pool_shape"] = h.shape
        cache["pooled"] = pooled
    if "avgpool" in taps:
        out["avgpool"] = pooled
    if last >= order.index("encoder"):
        out["encoder"] = pooled @ params["head.w"] + params["head.b"]
    return out, cache


def backward(params, arch, cache, grad_encoder):
    """Gradient of a scalar w.r.t. params given d(scalar)/d(encoder output)."""
    grads = {}
    pooled = cache["pooled"]
    grads["head.w"] = pooled.T @ grad_encoder
    grads["head.b"] = grad_encoder.sum(axis=0)
    d_pooled = grad_encoder @ params["head.w"].T
    n, ho, wo, c = cache["pool_shape"]
    dh = np.broadcast_to(d_pooled[:, None, None, :] / (ho * wo), (n, ho, wo, c))
    for i in reversed(range(len(arch.strides))):
        name = f"layer{i + 1}"
        hp_shape, cols, mask, stride, ho, wo, xhat, inv = cache["blocks"][i]
        dy = dh.reshape(-1, dh.shape[-1]) * mask
        if arch.groups:
            grads[f"{name}.gn_scale"] = (dy * xhat).sum(axis=0)
            grads[f"{name}.gn_shift"] = dy.sum(axis=0)
            dy = _group_norm_backward(dy * params[f"{name}.gn_scale"], xhat, inv, n, arch.groups)
        grads[f"{name}.w"] = cols.T @ dy
        grads[f"{name}.b"] = dy.sum(axis=0)
        if i == 0:
            break
        dcols = (dy @ params[f"{name}.w"].T).reshape(n, ho, wo, -1)
        dhp = kernels.col2im(dcols, hp_shape, 3, stride)
        dh = dhp[:, 1:-1, 1:-1, :]
    return ParamVector._wrap({k: grads[k] for k in params.keys()})


def normalize(z, eps=1e-12):
    norm = np.sqrt((z * z).sum(axis=1, keepdims=True))
    return z / np.maximum(norm, eps), norm


def normalize_backward(z_hat, norm, grad_hat):
    """Backprop through ``z_hat = z / |z|``."""
    dot = (z_hat * grad_hat).sum(axis=1, keepdims=True)
    return (grad_hat - z_hat * dot) / norm


def encode(params, arch, batch, tap="encoder", normalize_rows=False):
    """Feature matrix for one tap, one row per sample."""
    if tap not in arch.taps:
        raise KeyError(f"unknown tap {tap!r}; available: {arch.taps}")
    out, _ = forward(params, arch, np.asarray(batch), taps=(tap,))
    feats = out[tap]
    if normalize_rows:
        feats, _ = normalize(feats)
    return feats
