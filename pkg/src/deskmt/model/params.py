"""Named parameter arrays with a flat-vector view and checkpoint I/O.

Checkpoints are a raw little-endian float64 blob plus a sidecar text
manifest ("name shape offset" per line) so they stay readable without
this package.
"""

import numpy as np


class ModelParams:
    def __init__(self, arrays):
        self.arrays = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in parameter {name!r}")
            self.arrays[name] = arr

    def names(self):
        return list(self.arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        if name not in self.arrays:
            raise KeyError(name)
        if np.shape(value) != self.arrays[name].shape:
            raise ValueError(f"shape mismatch assigning {name!r}")
        self.arrays[name][...] = value

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.names() == other.names()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    @property
    def size(self):
        return sum(a.size for a in self.arrays.values())

    def flatten(self):
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def unflatten(self, vec):
        """New ModelParams with these shapes filled from vec."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of size {self.size}, got {vec.shape}")
        out = {}
        offset = 0
        for name, arr in self.arrays.items():
            out[name] = vec[offset:offset + arr.size].reshape(arr.shape).copy()
            offset += arr.size
        return ModelParams(out)

    def set_flat(self, vec):
        """Overwrite array contents in place from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of size {self.size}, got {vec.shape}")
        offset = 0
        for arr in self.arrays.values():
            arr[...] = vec[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def copy(self):
        return ModelParams({k: a.copy() for k, a in self.arrays.items()})

    def zeros_like(self):
        return ModelParams({k: np.zeros_like(a) for k, a in self.arrays.items()})

    def save(self, path):
        path = str(path)
        with open(path, "wb") as fh, open(path + ".manifest", "w", encoding="utf-8") as mf:
            offset = 0
            for name, arr in self.arrays.items():
                blob = arr.astype("<f8").tobytes()
                fh.write(blob)
                shape = "x".join(str(d) for d in arr.shape) or "scalar"
                mf.write(f"{name} {shape} {offset}\n")
                offset += len(blob)

    @classmethod
    def load(cls, path):
        path = str(path)
        with open(path, "rb") as fh:
            blob = fh.read()
        arrays = {}
        with open(path + ".manifest", encoding="utf-8") as mf:
            for line in mf:
                name, shape_s, offset_s = line.split()
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
                count = int(np.prod(shape)) if shape else 1
                offset = int(offset_s)
                arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
                arrays[name] = arr.reshape(shape).astype(np.float64)
        return cls(arrays)


def average_checkpoints(params_list):
    """Elementwise mean over checkpoints of identical structure."""
    if not params_list:
        raise ValueError("no checkpoints to average")
    first = params_list[0]
    names = first.names()
    for p in params_list[1:]:
        if p.names() != names:
            raise ValueError("checkpoint name mismatch")
        for k in names:
            if p[k].shape != first[k].shape:
                raise ValueError(f"shape mismatch for {k!r}")
    out = {}
    for k in names:
        stack = [p[k] for p in params_list]
        # a converged constant trace averages to itself bit-for-bit
        if all(np.array_equal(a, stack[0]) for a in stack[1:]):
            out[k] = stack[0].copy()
        else:
            out[k] = np.mean(stack, axis=0)
    return ModelParams(out)
