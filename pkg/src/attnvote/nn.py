"""Parameters, modules, the shared MLP block and the Adam optimizer."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

SeedLike = Union[None, int, np.random.Generator]


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(0 if seed is None else seed)


class Parameter(Tensor):
    """A trainable leaf tensor. Its gradient lives in ``.grad`` (same shape)."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or T.get_default_dtype()), requires_grad=True)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Module:
    """Minimal container: attributes holding Parameters or Modules are discovered by name."""

    training: bool = True

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield prefix + name, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]


class Linear(Module):
    """Per-point affine map ``x @ W + b`` acting on the last axis."""

    def __init__(self, cin: int, cout: int, bias: bool = True, rng: SeedLike = None):
        super().__init__()
        rng = make_rng(rng)
        bound = 1.0 / np.sqrt(cin)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(cin, cout)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=(cout,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1,) * (x.ndim - 1) + self.bias.shape)
        return y


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        dtype = T.get_default_dtype()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


@dataclass
class SharedMlpSpec:
    """Layer widths of a shared MLP plus per-layer batch-norm / activation switches."""

    widths: List[int]
    bn: List[bool] = field(default_factory=list)
    act: List[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.widths or min(self.widths) < 1:
            raise ValueError("a shared MLP needs at least one layer of width >= 1")
        n = len(self.widths)
        self.bn = list(self.bn) if self.bn else [True] * n
        self.act = list(self.act) if self.act else [True] * n
        if len(self.bn) != n or len(self.act) != n:
            raise ValueError("per-layer flags must match the number of layers")

    @classmethod
    def plain(cls, widths: Sequence[int], last_bn: bool = True, last_act: bool = True):
        n = len(widths)
        return cls(list(widths), [True] * (n - 1) + [last_bn], [True] * (n - 1) + [last_act])


class SharedMLP(Module):
    """Point-wise MLP: each layer is a 1x1 convolution, optional BN and ReLU.

    Weights are shared by every point, so the block is permutation-equivariant
    over all leading axes. The affine bias is dropped when BN follows.
    """

    def __init__(self, cin: int, spec: Union[SharedMlpSpec, Sequence[int]], rng: SeedLike = None):
        super().__init__()
        if not isinstance(spec, SharedMlpSpec):
            spec = SharedMlpSpec(list(spec))
        rng = make_rng(rng)
        self.spec = spec
        self.cin = cin
        self.layers = []
        self.norms = []
        c = cin
        for width, bn in zip(spec.widths, spec.bn):
            self.layers.append(Linear(c, width, bias=not bn, rng=rng))
            self.norms.append(BatchNorm(width) if bn else None)
            c = width
        self.cout = c

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cin:
            raise ValueError(f"shared MLP expects {self.cin} channels, got {x.shape[-1]}")
        for layer, norm, act in zip(self.layers, self.norms, self.spec.act):
            x = layer(x)
            if norm is not None:
                x = norm(x)
            if act:
                x = T.relu(x)
        return x

    def zero_output(self) -> None:
        """Make the block emit zeros (for residual branches that start as identity)."""
        last, norm = self.layers[-1], self.norms[-1]
        if norm is not None:
            norm.gamma.data[...] = 0
            norm.beta.data[...] = 0
        else:
            last.weight.data[...] = 0
            if last.bias is not None:
                last.bias.data[...] = 0


def shared_mlp(x: Tensor, mlp: SharedMLP, mode: str = "train") -> Tensor:
    mlp.train(mode == "train")
    return mlp(x)


class Adam:
    """Adam with bias correction; the learning rate is held constant."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise RuntimeError("adam step before gradients were populated")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# -- parameter store --------------------------------------------------------

MAGIC = b"PATD"
STORE_VERSION = 1


def save_store(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    """Write named tensors as a flat little-endian binary file.

    Layout: ``PATD``, u32 version, then records until end of file: u32
    name length, utf-8 name, u32 rank, u32 extents, u8 scalar width (4/8),
    raw scalars.
    """
    out = bytearray(MAGIC)
    out += struct.pack("<I", STORE_VERSION)
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        shape = arr.shape or (1,)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<I{len(shape)}I", len(shape), *shape)
        out += struct.pack("<B", arr.dtype.itemsize)
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_store(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter store (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != STORE_VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    off = 8
    result = {}
    while off < len(buf):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        (width,) = struct.unpack_from("<B", buf, off)
        off += 1
        dtype = np.dtype("<f4" if width == 4 else "<f8")
        nbytes = int(np.prod(shape)) * width
        result[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes
    return result
