"""
Parameter containers and the small layer set the MT-CP blocks are built from.

Modules discover their parameters, buffers and children from instance
attributes in assignment order, so ``named_parameters()`` is deterministic and
doubles as the checkpoint layout.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from mtcp_errors import CheckpointError
from mtcp_tensor import Tensor, batchnorm2d, conv2d, layer_norm, matmul


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        found: List[Tuple[str, Parameter]] = []
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                found.append((full, child))
            else:
                found.extend(child.named_parameters(f"{full}."))  # type: ignore[union-attr]
        return found

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        found: List[Tuple[str, np.ndarray]] = [(f"{prefix}{k}", v) for k, v in getattr(self, "_buffers", {}).items()]
        for name, child in self._children():
            if isinstance(child, Module):
                found.extend(child.named_buffers(f"{prefix}{name}."))
        return found

    def modules(self) -> List["Module"]:
        found: List[Module] = [self]
        for _, child in self._children():
            if isinstance(child, Module):
                found.extend(child.modules())
        return found

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, param in self.named_parameters():
            if state[name].shape != param.data.shape:
                raise CheckpointError(f"{name}: stored shape {state[name].shape} != model shape {param.data.shape}")
            param.data[...] = state[name]
        for name, buf in self.named_buffers():
            buf[...] = state[f"buffer:{name}"]


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        zero_init: bool = False,
    ):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(np.zeros(shape) if zero_init else he_normal(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(-1, 1, 1)
        return out


class Linear(Module):
    """Affine map over the last axis (weights stored in×out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        shape = (in_features, out_features)
        self.weight = Parameter(np.zeros(shape) if zero_init else rng.standard_normal(shape) / np.sqrt(in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self._buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x, self.gamma, self.beta, self._buffers["running_mean"], self._buffers["running_var"], self.training
        )


class LayerNorm(Module):
    def __init__(self, features: int):
        self.gamma = Parameter(np.ones(features))
        self.beta = Parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)
