"""Parameter containers and network building blocks.

Modules register parameters and child modules on attribute assignment, so
``named_parameters`` can recover a dotted, model-unique name for every
learnable array.  All weights are float32; initialization is truncated
normal (std 0.02, cut at two standard deviations) for weights and zeros
for biases, drawn from an explicit numpy Generator so runs reproduce
bit-for-bit from a seed.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

from .ops import conv2d
from .tensor import Tensor, as_tensor, matmul, softmax

__all__ = [
    "Parameter",
    "Module",
    "ModuleList",
    "Linear",
    "Conv2d",
    "ChannelLayerNorm",
    "LayerNorm",
    "ConvNeXtBlock",
    "Mlp",
    "trunc_normal",
    "windowed_attention",
    "WindowAttention",
]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) draws truncated to two standard deviations.

    Sampled by inverse CDF on a restricted uniform range, which keeps the
    draw count independent of rejection luck and therefore reproducible.
    """
    lo = _sp.ndtr(-2.0)
    hi = _sp.ndtr(2.0)
    u = rng.uniform(lo, hi, size=shape)
    return (_sp.ndtri(u) * std).astype(np.float32)


class Parameter:
    """A learnable tensor with a name and optimizer scratch space."""

    __slots__ = ("tensor", "name", "optimizer_state")

    def __init__(self, data, name: str = ""):
        self.tensor = data if isinstance(data, Tensor) else Tensor(data)
        self.tensor.requires_grad = True
        self.name = name
        self.optimizer_state: dict = {}

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if value.shape != self.tensor.data.shape:
            raise ValueError(
                f"parameter {self.name or '<unnamed>'}: shape {value.shape} "
                f"does not match {self.tensor.data.shape}"
            )
        self.tensor.data = np.ascontiguousarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Module:
    """Base class with recursive parameter discovery."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for key, param in self._params.items():
            name = f"{prefix}{key}"
            param.name = name
            yield name, param
        for key, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:4]} unexpected={extra[:4]}")
        for name, param in own.items():
            param.data = np.asarray(state[name], dtype=np.float32)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """y = x @ W + b with W of shape (in_features, out_features).

    Weights are drawn at fan-in scale (std 1/sqrt(in_features)) so a stack
    of layers neither blows up nor attenuates its inputs; layers embedded
    in normalized residual branches can pass an explicit smaller std
    through ``trunc_normal`` themselves if they want the transformer
    convention instead.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        std = 1.0 / float(np.sqrt(in_features))
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), std=std))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x) -> Tensor:
        y = matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = y + self.bias.tensor
        return y


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = Parameter(trunc_normal(rng, shape, std=1.0 / float(np.sqrt(fan_in))))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x) -> Tensor:
        return conv2d(
            x,
            self.weight.tensor,
            None if self.bias is None else self.bias.tensor,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )


def _normalize(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, shape, eps: float) -> Tensor:
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gamma.reshape(shape) + beta.reshape(shape)


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.eps = eps
        self.channels = channels

    def forward(self, x) -> Tensor:
        return _normalize(x, 1, self.gamma.tensor, self.beta.tensor, (1, self.channels, 1, 1), self.eps)


class LayerNorm(Module):
    """LayerNorm over the trailing axis of a token tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.eps = eps
        self.channels = channels

    def forward(self, x) -> Tensor:
        return _normalize(x, -1, self.gamma.tensor, self.beta.tensor, (self.channels,), self.eps)


class ConvNeXtBlock(Module):
    """Depthwise 7x7 -> channel norm -> pointwise x4 -> GELU -> pointwise, residual."""

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 4):
        super().__init__()
        self.dw = Conv2d(channels, channels, 7, rng, padding=3, groups=channels)
        self.norm = ChannelLayerNorm(channels)
        self.pw1 = Conv2d(channels, channels * expansion, 1, rng)
        self.pw2 = Conv2d(channels * expansion, channels, 1, rng)

    def forward(self, x) -> Tensor:
        h = self.dw(x)
        h = self.norm(h)
        h = self.pw1(h).gelu()
        h = self.pw2(h)
        return x + h


class Mlp(Module):
    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def forward(self, x) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


def windowed_attention(x, window: int, shift: int, heads: int, qkv_w, qkv_b, proj_w, proj_b) -> Tensor:
    """Multi-head self-attention inside square windows of an NCHW tensor.

    A nonzero ``shift`` rolls the feature map cyclically before windowing
    and rolls back afterwards, so alternating blocks see offset window
    boundaries.  Attention is softmax(QK^T / sqrt(d)) V per window with a
    shared qkv projection (C -> 3C) and output projection (C -> C).
    """
    x = as_tensor(x)
    qkv_w = as_tensor(qkv_w)
    qkv_b = as_tensor(qkv_b)
    proj_w = as_tensor(proj_w)
    proj_b = as_tensor(proj_b)
    if x.ndim != 4:
        raise ValueError(f"windowed_attention input must be NCHW, got ndim={x.ndim}")
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"spatial size ({h}x{w}) not divisible by window {window}")
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    if not 0 <= shift < window:
        raise ValueError(f"shift {shift} must lie in [0, window)")
    head_dim = c // heads
    nh, nw = h // window, w // window
    n_windows = b * nh * nw
    tokens_per = window * window

    if shift:
        x = x.roll2d(-shift, -shift)
    tokens = (
        x.reshape(b, c, nh, window, nw, window)
        .transpose(0, 2, 4, 3, 5, 1)
        .reshape(n_windows, tokens_per, c)
    )
    qkv = matmul(tokens, qkv_w) + qkv_b
    qkv = qkv.reshape(n_windows, tokens_per, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(head_dim))
    attn = softmax(logits, axis=-1)
    out = matmul(attn, v)
    out = out.transpose(0, 2, 1, 3).reshape(n_windows, tokens_per, c)
    out = matmul(out, proj_w) + proj_b
    out = (
        out.reshape(b, nh, nw, window, window, c)
        .transpose(0, 5, 1, 3, 2, 4)
        .reshape(b, c, h, w)
    )
    if shift:
        out = out.roll2d(shift, shift)
    return out


class WindowAttention(Module):
    def __init__(self, channels: int, window: int, shift: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.qkv_w = Parameter(trunc_normal(rng, (channels, 3 * channels)))
        self.qkv_b = Parameter(np.zeros(3 * channels, dtype=np.float32))
        self.proj_w = Parameter(trunc_normal(rng, (channels, channels)))
        self.proj_b = Parameter(np.zeros(channels, dtype=np.float32))
        self.window = window
        self.shift = shift
        self.heads = heads

    def forward(self, x) -> Tensor:
        return windowed_attention(
            x,
            self.window,
            self.shift,
            self.heads,
            self.qkv_w.tensor,
            self.qkv_b.tensor,
            self.proj_w.tensor,
            self.proj_b.tensor,
        )
