"""Minimal module system: parameter registry, buffers, train/infer mode."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform on ``[-b, b]`` with ``b = sqrt(6 / fan_in)``."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def linear_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Unit-gain variant, ``b = sqrt(3 / fan_in)``, for projections with no
    rectifier after them (variance-preserving instead of doubling)."""
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


INITIALIZERS = {"he": he_uniform, "linear": linear_uniform}


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class. Sub-modules, parameters and buffers register on assignment.

    Registration order is assignment order, so parameter names and their
    ordering are deterministic for a given constructor.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    # -- traversal ------------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            sub = f"{prefix}.{name}" if prefix else name
            yield from mod.named_modules(sub)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mname, mod in self.named_modules(prefix):
            for pname, p in mod._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules(prefix):
            for bname, b in mod._buffers.items():
                yield (f"{mname}.{bname}" if mname else bname), b

    # -- state ----------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for mname, mod in self.named_modules():
            for pname, p in mod._params.items():
                key = f"{mname}.{pname}" if mname else pname
                arr = np.asarray(state[key])
                if arr.shape != p.shape:
                    raise ValueError(f"{key}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            for bname, b in list(mod._buffers.items()):
                key = f"{mname}.{bname}" if mname else bname
                mod.register_buffer(bname, np.array(state[key], dtype=b.dtype))

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Conv2d(Module):
    """Standard or grouped convolution, HeUniform weights (unless ``init="linear"``), zero bias."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 bias: bool = True, dilation: int = 1, stride: int = 1, groups: int = 1,
                 init: str = "he"):
        super().__init__()
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.dilation, self.stride, self.groups = dilation, stride, groups
        fan_in = (in_ch // groups) * k * k
        self.weight = Parameter(INITIALIZERS[init](rng, (out_ch, in_ch // groups, k, k), fan_in))
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"{type(self).__name__}: expected {self.in_ch} input channels, got shape {x.shape}")
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          dilation=self.dilation, groups=self.groups)


class DepthwiseSeparableConv(Module):
    """Depthwise ``k x k`` conv then pointwise ``1 x 1`` conv.

    Trainable count: ``C*k^2 + C*Cout`` plus ``Cout`` with ``pw_bias`` and
    ``C`` with ``dw_bias``.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, k: int = 3,
                 dilation: int = 1, pw_bias: bool = True, dw_bias: bool = False):
        super().__init__()
        self.in_ch, self.out_ch, self.dilation = in_ch, out_ch, dilation
        self.dw = Parameter(he_uniform(rng, (in_ch, 1, k, k), k * k))
        self.dw_b = Parameter(np.zeros(in_ch, np.float32)) if dw_bias else None
        self.pw = Parameter(he_uniform(rng, (out_ch, in_ch, 1, 1), in_ch))
        self.pw_b = Parameter(np.zeros(out_ch, np.float32)) if pw_bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"DepthwiseSeparableConv: expected {self.in_ch} input channels, got shape {x.shape}")
        return ops.depthwise_separable_conv(x, self.dw, self.pw, self.pw_b, self.dw_b, dilation=self.dilation)


class BatchNorm2d(Module):
    def __init__(self, ch: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(ch, np.float32))
        self.beta = Parameter(np.zeros(ch, np.float32))
        self.register_buffer("running_mean", np.zeros(ch, np.float32))
        self.register_buffer("running_var", np.ones(ch, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Dense(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "he"):
        super().__init__()
        self.weight = Parameter(INITIALIZERS[init](rng, (in_f, out_f), in_f))
        self.bias = Parameter(np.zeros(out_f, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)

