"""Parameter storage, Adam, the learning-rate schedule and the checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ContractError, Tensor

CKPT_MAGIC = b"PDLCKPT1"


class FormatError(ValueError):
    """A binary file does not follow the expected layout."""

    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (at byte {offset})")
        self.offset = offset


class ParamStore:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._p: dict[str, Tensor] = {}
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __len__(self) -> int:
        return len(self._p)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._p))

    def keys(self) -> list[str]:
        return sorted(self._p)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._p[k]) for k in self.keys()]

    def values(self) -> list[Tensor]:
        return [self._p[k] for k in self.keys()]

    def zero_grad(self) -> None:
        for t in self._p.values():
            t.grad = None

    def subset(self, prefix: str) -> "ParamStore":
        """View sharing the tensors whose names start with ``prefix``."""
        out = ParamStore()
        out._p = {k: v for k, v in self._p.items() if k.startswith(prefix)}
        return out

    def merge(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore()
        out._p = {**self._p}
        for k, v in other._p.items():
            if k in out._p:
                raise KeyError(f"duplicate parameter {k!r}")
            out._p[k] = v
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self._p[k].data.copy() for k in self.keys()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, v in arrays.items():
            if k not in self._p:
                if strict:
                    raise KeyError(f"unknown parameter {k!r}")
                continue
            if self._p[k].shape != v.shape:
                raise ContractError(f"parameter {k!r}: shape {v.shape} != {self._p[k].shape}")
            self._p[k].data = np.array(v, dtype=np.float64)

    def snapshot(self) -> "ParamStore":
        """Frozen copy, safe to share across inference workers."""
        out = ParamStore()
        out._p = {k: Tensor(v.data.copy()) for k, v in self._p.items()}
        for t in out._p.values():
            t.data.flags.writeable = False
        return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, **kw) -> "AdamState":
        st = cls(**kw)
        for k, t in params.items():
            st.m[k] = np.zeros_like(t.data)
            st.v[k] = np.zeros_like(t.data)
        return st


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update. Gradients are left in place."""
    for k, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {k!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, t in params.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(t.data)
            state.v[k] = np.zeros_like(t.data)
        g = t.grad
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(step: int, base_lr: float, warmup_steps: int = 500, decay_rate: float = 0.98,
          decay_every: int = 1000) -> float:
    """Linear warm-up to ``base_lr`` followed by stepwise exponential decay."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * decay_rate ** ((step - warmup_steps) // decay_every)


# -- binary checkpoint ---------------------------------------------------------

def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as ``PDLCKPT1`` records sorted by name."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<Q", len(arrays))
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        buf += struct.pack("<Q", len(key)) + key
        buf += struct.pack("<Q", a.ndim)
        buf += struct.pack(f"<{a.ndim}Q", *a.shape)
        buf += a.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:8]!r}", 0)
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint", pos)
        out = raw[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<Q", take(8))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack("<Q", take(8))
        name = take(klen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise FormatError("trailing bytes after last record", pos)
    return out


def save_checkpoint(path: str | Path, params: ParamStore, state: AdamState | None = None) -> None:
    write_arrays(path, params.arrays())
    if state is not None:
        write_arrays(str(path) + ".opt", adam_arrays(state))


def load_checkpoint(path: str | Path, params: ParamStore, strict: bool = True) -> AdamState | None:
    params.load_arrays(read_arrays(path), strict=strict)
    opt = Path(str(path) + ".opt")
    return adam_from_arrays(read_arrays(opt)) if opt.exists() else None


def adam_arrays(state: AdamState) -> dict[str, np.ndarray]:
    out = {
        "adam.step": np.array(float(state.step)),
        "adam.beta1": np.array(state.beta1),
        "adam.beta2": np.array(state.beta2),
        "adam.eps": np.array(state.eps),
    }
    out.update({f"m.{k}": v for k, v in state.m.items()})
    out.update({f"v.{k}": v for k, v in state.v.items()})
    return out


def adam_from_arrays(arrays: dict[str, np.ndarray]) -> AdamState:
    st = AdamState(step=int(arrays["adam.step"]), beta1=float(arrays["adam.beta1"]),
                   beta2=float(arrays["adam.beta2"]), eps=float(arrays["adam.eps"]))
    for k, v in arrays.items():
        if k.startswith("m."):
            st.m[k[2:]] = v.copy()
        elif k.startswith("v."):
            st.v[k[2:]] = v.copy()
    return st
