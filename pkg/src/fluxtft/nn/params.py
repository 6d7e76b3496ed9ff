"""Named parameter storage, Adam updates and binary serialisation."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"FXPS"
_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class ParamStore:
    """Ordered collection of parameters with same-shape gradient slots and
    Adam moment state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def accumulate(self, name: str, grad) -> None:
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if np.isfinite(norm) and norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {v.shape}")
            self.params[k][...] = v

    # -- serialisation ----------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [_MAGIC, struct.pack("<II", _VERSION, len(self.params))]
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        for arr in self.params.values():
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if data[:4] != _MAGIC:
            raise ValueError("not a parameter file (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        pos = 12
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            table.append((name, shape))
        store = cls()
        for name, shape in table:
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            store.add(name, arr.astype(np.float64))
        return store

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "params.bin").write_bytes(self.to_bytes())
        manifest = {
            "format": "fluxtft-params",
            "version": _VERSION,
            "byte_order": "little",
            "dtype": "float64",
            "parameters": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }
        (directory / "params.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "ParamStore":
        return cls.from_bytes((Path(directory) / "params.bin").read_bytes())


def adam_step(store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> ParamStore:
    """Bias-corrected Adam update applied in place."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p)
            store._v[name] = np.zeros_like(p)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
