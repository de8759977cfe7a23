"""Network building blocks on top of the autodiff tensor core."""

from __future__ import annotations

import numpy as np

from . import conv as C
from .tensor import Tensor, cat


class Module:
    """Minimal parameter container.

    Submodules and parameters are discovered by walking instance attributes
    in insertion order, which keeps parameter traversal deterministic.
    """

    def parameters(self) -> list[Tensor]:
        out = []
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append(item)
        return out

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != parameter shape {p.shape}")
            p.data = np.ascontiguousarray(arr)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    """y = x @ W + b, acting on the trailing feature axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            self.weight = Tensor(np.zeros((d_in, d_out), dtype=np.float32), requires_grad=True)
        else:
            self.weight = _normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
        y = flat @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(lead + (self.weight.shape[1],)) if x.ndim != 2 else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, affine: bool = True):
        self.eps = eps
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True) if affine else None
        self.shift = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        y = centered * ((var + self.eps) ** -0.5)
        if self.gain is not None:
            y = y * self.gain + self.shift
        return y


class MLP(Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden_mult: int = 4,
                 d_out: int | None = None):
        hidden = dim * hidden_mult
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).silu())


class MultiHeadSelfAttention(Module):
    """Standard softmax attention over flattened token sequences (B, N, C)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        B, N, Cdim = x.shape
        h, d = self.heads, self.head_dim
        qkv = self.qkv(x)  # (B, N, 3C)
        qkv = qkv.reshape(B, N, 3, h, d).transpose((2, 0, 3, 1, 4))  # (3, B, h, N, d)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(d))
        attn = attn.softmax(axis=-1)
        out = attn @ v  # (B, h, N, d)
        out = out.transpose((0, 2, 1, 3)).reshape(B, N, Cdim)
        return self.proj(out)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, pad_mode: str = "zero",
                 bias: bool = True, zero_init: bool = False):
        fan_in = c_in * kernel * kernel
        shape = (c_out, c_in, kernel, kernel)
        if zero_init:
            self.weight = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        else:
            self.weight = _normal(rng, shape, 1.0 / np.sqrt(fan_in))
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode

    def forward(self, x: Tensor) -> Tensor:
        return C.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, pad_mode: str = "zero", bias: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = _normal(rng, (c_in, c_out, kernel, kernel), 1.0 / np.sqrt(fan_in))
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode

    def forward(self, x: Tensor) -> Tensor:
        return C.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                  self.pad_mode)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, pad_mode: str = "zero",
                 bias: bool = True, zero_init: bool = False):
        fan_in = c_in * kernel
        shape = (c_out, c_in, kernel)
        if zero_init:
            self.weight = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        else:
            self.weight = _normal(rng, shape, 1.0 / np.sqrt(fan_in))
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode

    def forward(self, x: Tensor) -> Tensor:
        return C.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class ConvTranspose1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, pad_mode: str = "zero", bias: bool = True):
        fan_in = c_in * kernel
        self.weight = _normal(rng, (c_in, c_out, kernel), 1.0 / np.sqrt(fan_in))
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode

    def forward(self, x: Tensor) -> Tensor:
        return C.conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding,
                                  self.pad_mode)


__all__ = [
    "Module", "Linear", "LayerNorm", "MLP", "MultiHeadSelfAttention",
    "Conv1d", "Conv2d", "ConvTranspose1d", "ConvTranspose2d", "cat",
]
