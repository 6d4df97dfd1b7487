"""Named parameter storage, Adam, and the binary checkpoint container."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .exceptions import ArtifactMismatchError, ConfigurationError
from .tensor_core import Tensor

CHECKPOINT_MAGIC = b"FGCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered registry of trainable tensors plus non-trainable buffers.

    Buffers hold state such as batch-norm running statistics; they are saved
    with the checkpoint but never touched by the optimiser.
    """

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ConfigurationError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> OrderedDict[str, np.ndarray]:
        """Copy of every parameter and buffer, in registration order."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, t in self.params.items():
            out[name] = t.data.copy()
        for name, b in self.buffers.items():
            out[name] = b.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ArtifactMismatchError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.data.shape:
                raise ArtifactMismatchError(f"{name}: shape {value.shape} != {t.data.shape}")
            t.data[...] = value
        for name, b in self.buffers.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != b.shape:
                raise ArtifactMismatchError(f"{name}: shape {value.shape} != {b.shape}")
            b[...] = value


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store}
        self.v = {name: np.zeros_like(p.data) for name, p in store}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_checkpoint(path: str | Path, store: ParamStore, config: dict) -> None:
    """Write header, manifest, then little-endian float32 arrays in manifest order."""
    state = store.state()
    manifest = []
    offset = 0
    for name, arr in state.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "config": config, "manifest": manifest},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, state)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ArtifactMismatchError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ArtifactMismatchError(f"{path}: unsupported format version {header.get('format_version')}")
    state = OrderedDict()
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = pos + entry["offset"]
        arr = np.frombuffer(raw[start:start + 4 * count], dtype="<f4").astype(np.float64)
        state[entry["name"]] = arr.reshape(entry["shape"])
    return header, state
