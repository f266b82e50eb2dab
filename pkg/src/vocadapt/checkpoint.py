"""Binary checkpoint container for model weights and optimizer state.

Layout (little-endian):

    magic    "AVCK"
    u32      format version (1)
    str      model kind            (u32 length + utf-8)
    str      config hash           (u32 length + utf-8)
    u64      training step
    u32      parameter count
    per parameter:
        str  name
        u32  rank, then u32 dims
        f32  data (row-major)
    u8       optimizer-state flag
    if set, per optimizer group (ordered by name):
        str  group name
        f64  lr, beta1, beta2, eps
        u64  step
        u32  entry count, then per entry: str name, u32 rank, u32 dims,
             f32 first-moment data, f32 second-moment data

Strings and arrays are written exactly as stored, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .optim import AdamState

_MAGIC = b"AVCK"
_VERSION = 1


@dataclass
class OptimBlob:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def from_state(cls, state: AdamState) -> "OptimBlob":
        return cls(state.lr, state.beta1, state.beta2, state.eps, state.step,
                   {k: a.astype("<f4") for k, a in state.m.items()},
                   {k: a.astype("<f4") for k, a in state.v.items()})

    def to_state(self, params: dict[str, Tensor]) -> AdamState:
        state = AdamState(params, self.lr, self.beta1, self.beta2, self.eps)
        state.step = self.step
        for k in params:
            if k not in self.m:
                raise ValueError(f"optimizer blob missing moments for {k!r}")
            state.m[k] = self.m[k].astype(params[k].data.dtype)
            state.v[k] = self.v[k].astype(params[k].data.dtype)
        return state


@dataclass
class CheckpointBundle:
    kind: str
    config_hash: str
    step: int
    params: dict[str, np.ndarray]
    optim: dict[str, OptimBlob] = field(default_factory=dict)

    def tensors(self, prefix: str, dtype=np.float32) -> dict[str, Tensor]:
        """Trainable tensors for one namespace (e.g. 'gen.' or 'disc.')."""
        out = {}
        for name, arr in self.params.items():
            if name.startswith(prefix):
                out[name[len(prefix):]] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)
        return out


def config_hash(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def _write_array(f, arr: np.ndarray) -> None:
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(f) -> np.ndarray:
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    return np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).copy()


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        _write_str(f, bundle.kind)
        _write_str(f, bundle.config_hash)
        f.write(struct.pack("<Q", bundle.step))
        f.write(struct.pack("<I", len(bundle.params)))
        for name, arr in bundle.params.items():
            _write_str(f, name)
            _write_array(f, arr)
        f.write(struct.pack("<B", 1 if bundle.optim else 0))
        if bundle.optim:
            f.write(struct.pack("<I", len(bundle.optim)))
            for group in sorted(bundle.optim):
                blob = bundle.optim[group]
                _write_str(f, group)
                f.write(struct.pack("<dddd", blob.lr, blob.beta1, blob.beta2, blob.eps))
                f.write(struct.pack("<Q", blob.step))
                f.write(struct.pack("<I", len(blob.m)))
                for name in blob.m:
                    _write_str(f, name)
                    _write_array(f, blob.m[name])
                    f.write(np.ascontiguousarray(blob.v[name], dtype="<f4").tobytes())


def load_checkpoint(path, expected_config_hash: str | None = None) -> CheckpointBundle:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a vocadapt checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        kind = _read_str(f)
        chash = _read_str(f)
        (step,) = struct.unpack("<Q", f.read(8))
        (n_params,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(n_params):
            name = _read_str(f)
            params[name] = _read_array(f)
        (has_optim,) = struct.unpack("<B", f.read(1))
        optim = {}
        if has_optim:
            (n_groups,) = struct.unpack("<I", f.read(4))
            for _ in range(n_groups):
                group = _read_str(f)
                lr, b1, b2, eps = struct.unpack("<dddd", f.read(32))
                (gstep,) = struct.unpack("<Q", f.read(8))
                (n_entries,) = struct.unpack("<I", f.read(4))
                m, v = {}, {}
                for _ in range(n_entries):
                    name = _read_str(f)
                    arr = _read_array(f)
                    m[name] = arr
                    v[name] = np.frombuffer(f.read(4 * arr.size), dtype="<f4").reshape(arr.shape).copy()
                optim[group] = OptimBlob(lr, b1, b2, eps, gstep, m, v)
    if expected_config_hash is not None and chash != expected_config_hash:
        warnings.warn(f"{path}: checkpoint config hash {chash} != expected {expected_config_hash}",
                      stacklevel=2)
    return CheckpointBundle(kind, chash, step, params, optim)
