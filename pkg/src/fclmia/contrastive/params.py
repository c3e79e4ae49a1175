import hashlib

import numpy as np


class ParamVector:
    """Ordered name -> array mapping with elementwise linear algebra.

    Arithmetic requires identical names and shapes on both operands and
    always returns a new vector.
    """

    __slots__ = ("_data",)

    def __init__(self, data=None):
        self._data = {}
        for name, value in (data or {}).items():
            arr = np.array(value, copy=True)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} has non-finite entries")
            self._data[name] = arr

    @classmethod
    def _wrap(cls, data):
        out = cls.__new__(cls)
        out._data = data
        return out

    def __getitem__(self, name):
        return self._data[name]

    def __setitem__(self, name, value):
        self._data[name] = value

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def values(self):
        return self._data.values()

    def _check(self, other):
        if list(self._data) != list(other._data):
            raise ValueError("parameter names differ")
        for name, a in self._data.items():
            if a.shape != other._data[name].shape:
                raise ValueError(f"shape mismatch for {name!r}: {a.shape} vs {other._data[name].shape}")

    def __add__(self, other):
        self._check(other)
        return self._wrap({k: v + other._data[k] for k, v in self._data.items()})

    def __sub__(self, other):
        self._check(other)
        return self._wrap({k: v - other._data[k] for k, v in self._data.items()})

    def __mul__(self, scalar):
        return self._wrap({k: v * v.dtype.type(scalar) for k, v in self._data.items()})

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def axpy(self, alpha, other):
        """``self + alpha * other`` without materialising the scaled copy twice."""
        self._check(other)
        return self._wrap({k: v + v.dtype.type(alpha) * other._data[k] for k, v in self._data.items()})

    def copy(self):
        return self._wrap({k: v.copy() for k, v in self._data.items()})

    def astype(self, dtype):
        return self._wrap({k: v.astype(dtype) for k, v in self._data.items()})

    def zeros_like(self):
        return self._wrap({k: np.zeros_like(v) for k, v in self._data.items()})

    def flat(self):
        return np.concatenate([v.ravel() for v in self._data.values()])

    def shapes(self):
        return {k: v.shape for k, v in self._data.items()}

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self._data.values())

    def allclose(self, other, rtol=0.0, atol=0.0):
        self._check(other)
        return all(np.allclose(v, other._data[k], rtol=rtol, atol=atol) for k, v in self._data.items())

    def checksum(self):
        h = hashlib.sha256()
        for name, v in self._data.items():
            h.update(name.encode())
            h.update(str(v.dtype).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def __repr__(self):
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamVector({inner})"
