"""Parameter containers and the layers the two LID models are built from."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from ..errors import ShapeError
from . import functional as F
from .core import Tensor, concat, relu


class Parameter(Tensor):
    """A named tensor owned by a module; non-trainable ones act as buffers."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.array(data, copy=True), requires_grad=trainable)
        self.trainable = trainable


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    training: bool = True

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def zero_grad(self):
        for p in self.parameters(trainable_only=False):
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        return self

    def astype(self, dtype):
        for p in self.parameters(trainable_only=False):
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(kaiming_uniform(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, *, rng, dtype=np.float32):
        kh, kw = F._pair(kernel)
        self.stride = F._pair(stride)
        self.padding = (kh // 2, kw // 2) if padding is None else F._pair(padding)
        fan_in = c_in * kh * kw
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kh, kw), fan_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Parameter(np.ones(channels, dtype=dtype), trainable=False)
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
            training=self.training, momentum=self.momentum,
        )


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN-ReLU plus a shortcut.

    The shortcut is the identity when the block keeps both the channel count
    and the resolution; otherwise it is a strided 1x1 convolution.
    """

    def __init__(self, c_in, c_out, stride=(1, 1), *, rng, dtype=np.float32):
        stride = F._pair(stride)
        self.conv1 = Conv2d(c_in, c_out, 3, stride, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        if c_in != c_out or stride != (1, 1):
            self.shortcut = Conv2d(c_in, c_out, 1, stride, padding=0, rng=rng, dtype=dtype)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        h = relu(self.bn2(self.conv2(h)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return h + skip


class GRU(Module):
    """One GRU direction; ``reverse=True`` runs each sequence back to front."""

    def __init__(self, d_in: int, hidden: int, *, rng, reverse: bool = False, dtype=np.float32):
        k = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.reverse = reverse
        self.w_ih = Parameter(rng.uniform(-k, k, (d_in, 3 * hidden)).astype(dtype))
        self.w_hh = Parameter(rng.uniform(-k, k, (hidden, 3 * hidden)).astype(dtype))
        self.b_ih = Parameter(rng.uniform(-k, k, 3 * hidden).astype(dtype))
        self.b_hh = Parameter(rng.uniform(-k, k, 3 * hidden).astype(dtype))

    def forward(self, x: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        if not self.reverse:
            return F.gru(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
        if lengths is None:
            lengths = [x.shape[1]] * x.shape[0]
        xr = F.reverse_padded(x, lengths)
        return F.reverse_padded(F.gru(xr, self.w_ih, self.w_hh, self.b_ih, self.b_hh), lengths)


class BiGRU(Module):
    """Forward and backward GRUs concatenated to (N, T, 2H)."""

    def __init__(self, d_in: int, hidden: int, *, rng, dtype=np.float32):
        self.fwd = GRU(d_in, hidden, rng=rng, dtype=dtype)
        self.bwd = GRU(d_in, hidden, rng=rng, reverse=True, dtype=dtype)
        self.hidden = hidden

    def forward(self, x: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        return concat([self.fwd(x, lengths), self.bwd(x, lengths)], axis=-1)

    def final_state(self, out: Tensor, lengths: Sequence[int]) -> Tensor:
        """Concatenate the forward state at the last valid frame with the backward state at frame 0."""
        h = self.hidden
        last_fwd = F.gather_last(out, lengths)[:, :h]
        first_bwd = out[:, 0, h:]
        return concat([last_fwd, first_bwd], axis=-1)


class LSTM(Module):
    def __init__(self, d_in: int, hidden: int, *, rng, dtype=np.float32):
        k = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.w_ih = Parameter(rng.uniform(-k, k, (d_in, 4 * hidden)).astype(dtype))
        self.w_hh = Parameter(rng.uniform(-k, k, (hidden, 4 * hidden)).astype(dtype))
        self.b_ih = Parameter(rng.uniform(-k, k, 4 * hidden).astype(dtype))
        self.b_hh = Parameter(rng.uniform(-k, k, 4 * hidden).astype(dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.lstm(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


# functional spellings of the layers, used by the gradient-check harness


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    return block(x)


def gru_layer(x: Tensor, layer: GRU | BiGRU, lengths=None) -> Tensor:
    return layer(x, lengths)


def lstm_layer(x: Tensor, layer: LSTM) -> Tensor:
    return layer(x)
