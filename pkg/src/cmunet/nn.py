"""Module system: parameter registry, common layers, initialization."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from . import functional as F
from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Base class. Parameters and submodules are discovered through
    attribute order, which makes registry walks (and checkpoints)
    deterministic."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix=""):
        """Yield (qualified_name, Parameter); shared parameters appear once."""
        seen = set()
        for name, param in self._named_parameters_impl(prefix):
            if id(param) in seen:
                continue
            seen.add(id(param))
            param.name = name
            yield name, param

    def _named_parameters_impl(self, prefix):
        for name, value in self.__dict__.items():
            if isinstance(value, Parameter):
                yield (f"{prefix}{name}", value)
        for name, child in self._children():
            yield from child._named_parameters_impl(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Non-trainable state (e.g. batch-norm running stats)."""
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and not isinstance(value, Parameter):
                yield (f"{prefix}{name}", value)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def to_dtype(self, dtype):
        """Convert all parameters and buffers in place (float32/float64)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, buf in self.named_buffers():
            buf.data = buf.data.astype(dtype)
        return self

    def count_parameters(self):
        return sum(p.data.size for p in self.parameters())


class ModuleList:
    def __init__(self, modules=()):
        self._modules = list(modules)

    def append(self, m):
        self._modules.append(m)

    def __iter__(self):
        return iter(self._modules)

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[i]


def count_parameters(module):
    """Total element count over the module's parameter registry."""
    return module.count_parameters()


# -- initializers ------------------------------------------------------------

def he_normal(shape, fan_in, dtype, rng):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def uniform_fan_in(shape, fan_in, dtype, rng):
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- layers ------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, dtype=T.REAL32, rng=None):
        super().__init__()
        rng = rng or T.default_rng()
        self.weight = Parameter(uniform_fan_in((out_features, in_features), in_features, dtype, rng))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Fan-in-scaled uniform weight init: contracts activation variance per
    layer, which keeps the unnormalized gated decoder stacks from blowing
    up at initialization (batch norm re-centers the encoder regardless)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 groups=1, bias=True, dtype=T.REAL32, rng=None):
        super().__init__()
        rng = rng or T.default_rng()
        kh, kw = F._pair(kernel_size)
        if in_channels % groups:
            raise DimensionError("Conv2d: in_channels not divisible by groups")
        fan_in = (in_channels // groups) * kh * kw
        self.weight = Parameter(uniform_fan_in((out_channels, in_channels // groups, kh, kw),
                                               fan_in, dtype, rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5, axis=-1, dtype=T.REAL32):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.eps = eps
        self.axis = axis

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps, self.axis)


class BatchNorm2d(Module):
    """Standard batch norm over (B,H,W) per channel.

    Training mode normalizes with batch statistics and updates running
    estimates; eval mode uses the running estimates as constants.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=T.REAL32):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        if x.data.ndim != 4:
            raise DimensionError("BatchNorm2d expects [B,C,H,W]")
        gam = self.gamma.reshape(1, -1, 1, 1)
        bet = self.beta.reshape(1, -1, 1, 1)
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            inv = (var + self.eps) ** -0.5
            out = centered * inv * gam + bet
            m = self.momentum
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            unbias = n / max(n - 1, 1)
            self.running_mean.data = ((1 - m) * self.running_mean.data
                                      + m * mu.data.reshape(-1)).astype(x.data.dtype)
            self.running_var.data = ((1 - m) * self.running_var.data
                                     + m * unbias * var.data.reshape(-1)).astype(x.data.dtype)
            return out
        mu = self.running_mean.data.reshape(1, -1, 1, 1)
        inv = 1.0 / np.sqrt(self.running_var.data.reshape(1, -1, 1, 1) + self.eps)
        return (x - Tensor(mu)) * Tensor(inv) * gam + bet


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.items = ModuleList(modules)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x


def check_unique_parameter_names(module):
    """Registry invariant: qualified parameter names are unique."""
    names = [n for n, _ in module.named_parameters()]
    if len(names) != len(set(names)):
        raise ContractError("duplicate parameter names in registry")
    return names
