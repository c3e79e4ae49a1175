"""On-disk MoCo checkpoints.

A checkpoint is a directory ``ckpt_round_{round:06d}`` holding
``manifest.json`` plus little-endian binary blobs: one per ParamVector
(``query.bin``, ``key.bin``), the queue matrix (``queue.bin``) and any
extra named arrays (client queues for resuming a federation).
"""
import json
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .moco import MoCoState
from .params import ParamVector

CKPT_VERSION = 1


def ckpt_name(round_idx):
    return f"ckpt_round_{round_idx:06d}"


def _le(arr):
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def _write_params(path, params):
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, value in params.items():
            raw = _le(value).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(value.shape), "dtype": value.dtype.str.lstrip("<>|="), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    return entries


def _read_params(path, entries):
    blob = Path(path).read_bytes()
    data = {}
    for e in entries:
        dt = np.dtype("<" + e["dtype"])
        arr = np.frombuffer(blob, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=e["offset"])
        data[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return ParamVector._wrap(data)


def save_checkpoint(directory, state, round_idx, extras=None, meta=None):
    """Write ``state`` (and optional extra arrays) under ``directory``."""
    path = Path(directory) / ckpt_name(round_idx)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CKPT_VERSION,
        "round": int(round_idx),
        "arch": state.arch.to_dict(),
        "scalars": {"queue_ptr": int(state.queue_ptr), "m": float(state.m), "tau": float(state.tau)},
        "query": _write_params(path / "query.bin", state.query),
        "key": _write_params(path / "key.bin", state.key),
        "queue": {"shape": list(state.queue.shape), "dtype": state.queue.dtype.str.lstrip("<>|=")},
        "extras": {},
        "meta": meta or {},
    }
    _le(state.queue).tofile(path / "queue.bin")
    for name, arr in sorted((extras or {}).items()):
        arr = np.asarray(arr)
        _le(arr).tofile(path / f"extra_{name}.bin")
        manifest["extras"][name] = {"shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|=")}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Return ``(state, round, extras, meta)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no checkpoint manifest in {path}") from None
    arch = EncoderConfig.from_dict(manifest["arch"])
    q = manifest["queue"]
    queue = np.fromfile(path / "queue.bin", dtype="<" + q["dtype"]).reshape(q["shape"]).astype(np.dtype(q["dtype"]))
    s = manifest["scalars"]
    state = MoCoState(
        _read_params(path / "query.bin", manifest["query"]),
        _read_params(path / "key.bin", manifest["key"]),
        queue,
        int(s["queue_ptr"]),
        float(s["m"]),
        float(s["tau"]),
        arch,
    )
    extras = {}
    for name, e in manifest["extras"].items():
        extras[name] = np.fromfile(path / f"extra_{name}.bin", dtype="<" + e["dtype"]).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
    return state, int(manifest["round"]), extras, manifest.get("meta", {})


def list_checkpoints(run_dir):
    """Checkpoint directories of a run, sorted by round."""
    return sorted(p for p in Path(run_dir).glob("ckpt_round_*") if (p / "manifest.json").exists())
