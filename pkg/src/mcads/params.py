"""Named parameters, He-uniform init, Adam, and the .mct checkpoint format.

Every trainable array in a model lives in a ParameterStore under a dotted
name (e.g. "decoder.d4.rlab.rb1.conv3.w"). The store owns the RNG used at
init time, so identical seeds and construction order give bit-identical
models. BN running statistics are non-trainable entries in the same store,
which is how they reach checkpoints.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor, guard_finite


def he_uniform(shape, fan_in: int, rng: np.random.Generator,
               dtype=np.float32) -> np.ndarray:
    if fan_in <= 0:
        raise ValueError(f"he_uniform: fan_in must be positive, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def he_uniform_init(shape, fan_in: int, rng_seed: int) -> Tensor:
    """He-uniform sample on [-sqrt(6/fan_in), +sqrt(6/fan_in)], seeded."""
    rng = np.random.default_rng(rng_seed)
    return Tensor(he_uniform(shape, fan_in, rng))


class Parameter(Tensor):
    """A named tensor with Adam state. Non-trainable parameters (BN running
    stats) are carried for checkpointing but never receive gradients."""

    __slots__ = ("name", "trainable", "m", "v", "step")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.m = None  # first/second Adam moments, allocated on first step
        self.v = None
        self.step = 0

    def __repr__(self):
        kind = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.shape}{kind})"


class ParameterStore:
    """Ordered registry of model parameters, keyed by dotted name."""

    def __init__(self, seed: int, dtype=np.float32):
        self._params: dict[str, Parameter] = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def create(self, name: str, shape, init, trainable: bool = True,
               fan_in: int | None = None) -> Parameter:
        """Register one parameter. `init` is "he" (needs fan_in), "zeros",
        "ones", or an explicit array."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if isinstance(init, str):
            if init == "he":
                data = he_uniform(shape, fan_in, self.rng, self.dtype)
            elif init == "zeros":
                data = np.zeros(shape, dtype=self.dtype)
            elif init == "ones":
                data = np.ones(shape, dtype=self.dtype)
            else:
                raise ValueError(f"unknown init {init!r}")
        else:
            data = np.asarray(init, dtype=self.dtype)
            if data.shape != shape:
                raise ValueError(f"init shape {data.shape} != declared {shape}")
        p = Parameter(name, data, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def parameters(self):
        return list(self._params.values())

    def trainable_parameters(self):
        return [p for p in self._params.values() if p.trainable]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self, prefix: str = "", trainable_only: bool = True) -> int:
        total = 0
        for name, p in self._params.items():
            if not name.startswith(prefix):
                continue
            if trainable_only and not p.trainable:
                continue
            total += p.size
        return total

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Install checkpoint arrays; any name/shape disagreement is listed."""
        problems = []
        for name in state:
            if name not in self._params:
                problems.append(f"unexpected tensor {name!r}")
        for name, p in self._params.items():
            if name not in state:
                problems.append(f"missing tensor {name!r}")
            elif tuple(state[name].shape) != p.shape:
                problems.append(
                    f"shape mismatch for {name!r}: checkpoint "
                    f"{tuple(state[name].shape)} vs model {p.shape}")
        if problems:
            raise CheckpointMismatch("\n".join(problems))
        for name, p in self._params.items():
            p.data = state[name].astype(self.dtype, copy=True)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over trainable parameters with grads.

    Raises if any trainable parameter is missing its gradient: every
    parameter is supposed to be reached by the loss.
    """
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise ValueError(f"adam_step: missing gradient for {p.name!r}")
        g = p.grad
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        update = lr * mhat / (np.sqrt(vhat) + eps)
        guard_finite("adam_step", update)
        p.data = p.data - update


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"MCT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointMismatch(ValueError):
    """Checkpoint and model disagree on parameter names or shapes."""


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors: magic 'MCT1', u32 count, then per tensor a u16
    name length + UTF-8 name, u8 rank, u32 extents, u8 dtype code (0=f32,
    1=f64) and the row-major little-endian payload."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _CODES_BY_KIND.get(arr.dtype.newbyteorder("="))
            if code is None:
                raise ValueError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<B", code))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {blob[:4]!r}")
    off = 4
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        (code,) = struct.unpack_from("<B", blob, off)
        off += 1
        if code not in _DTYPE_CODES:
            raise ValueError(f"checkpoint {path}: unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(blob[off:off + n_bytes], dtype=dtype).reshape(shape)
        off += n_bytes
        tensors[name] = arr.copy()
    if off != len(blob):
        raise ValueError(f"checkpoint {path}: {len(blob) - off} trailing bytes")
    return tensors
