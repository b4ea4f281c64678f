"""Parameter storage and the layer stacks used by the DHA and PPO networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from dhal.errors import ContractError, DimensionError
from dhal.nn import tensor as T
from dhal.nn.rng import RngStream
from dhal.nn.tensor import Tensor

HIDDEN_ACTIVATIONS = {"elu": T.elu, "relu": T.relu, "tanh": T.tanh}
OUTPUT_ACTIVATIONS = {
    "none": lambda x: x,
    "softplus_offset": T.softplus_offset,
    "sigmoid": T.sigmoid,
}


class ParamStore:
    """Named parameters; each parameter tensor owns its gradient slot."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Tensor(value, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def subset(self, *prefixes: str) -> list[Tensor]:
        return [p for n, p in self._params.items() if any(n.startswith(pre) for pre in prefixes)]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise DimensionError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            p = self._params[name]
            if tuple(value.shape) != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {tuple(value.shape)} != model shape {p.shape}")
            p.data = np.asarray(value, dtype=p.data.dtype).copy()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, p in self._params.items():
            out.add(n, p.data.copy())
        return out


def _uniform_init(rng: RngStream, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple  # input width followed by every layer's output width
    hidden_activation: str = "elu"
    output_activation: str = "none"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractError("an MLP needs an input width and at least one layer")
        if any(int(w) <= 0 for w in self.widths):
            raise ContractError(f"MLP widths must be positive, got {self.widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output_activation!r}")


def init_mlp(spec: MlpSpec, params: ParamStore, prefix: str, rng: RngStream, zero_last: bool = False) -> None:
    n_layers = len(spec.widths) - 1
    for i, (w_in, w_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        layer_rng = rng.split(prefix, i)
        if zero_last and i == n_layers - 1:
            params.add(f"{prefix}.{i}.weight", np.zeros((w_in, w_out)))
            params.add(f"{prefix}.{i}.bias", np.zeros(w_out))
        else:
            params.add(f"{prefix}.{i}.weight", _uniform_init(layer_rng, w_in, (w_in, w_out)))
            params.add(f"{prefix}.{i}.bias", _uniform_init(layer_rng.split("b"), w_in, (w_out,)))


def mlp_forward(spec: MlpSpec, params: ParamStore, x, prefix: str, return_hidden: bool = False):
    """Apply the stack; rows of a batched input are mapped independently."""
    x = T.tensor(x)
    if x.shape[-1] != spec.widths[0]:
        raise DimensionError(f"MLP {prefix!r} expects input width {spec.widths[0]}, got input shape {x.shape}")
    act = HIDDEN_ACTIVATIONS[spec.hidden_activation]
    n_layers = len(spec.widths) - 1
    hidden = None
    for i in range(n_layers):
        x = T.linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if i < n_layers - 1:
            x = act(x)
            hidden = x
    out = OUTPUT_ACTIVATIONS[spec.output_activation](x)
    return (out, hidden) if return_hidden else out


@dataclass(frozen=True)
class Conv1dSpec:
    channels: tuple  # input channels followed by each layer's output channels
    kernels: tuple
    strides: tuple

    def __post_init__(self):
        if not (len(self.channels) - 1 == len(self.kernels) == len(self.strides)):
            raise ContractError("conv spec needs one kernel and stride per layer")
        if any(int(v) <= 0 for v in (*self.channels, *self.kernels, *self.strides)):
            raise ContractError("conv channels, kernels and strides must be positive")

    def output_length(self, length: int) -> int:
        for k, s in zip(self.kernels, self.strides):
            if length < k:
                raise DimensionError(f"time length {length} is shorter than kernel {k}")
            length = T.conv1d_output_length(length, k, s)
        return length


def init_conv1d(spec: Conv1dSpec, params: ParamStore, prefix: str, rng: RngStream) -> None:
    for i, (c_in, c_out, k) in enumerate(zip(spec.channels[:-1], spec.channels[1:], spec.kernels)):
        layer_rng = rng.split(prefix, i)
        fan_in = c_in * k
        params.add(f"{prefix}.{i}.weight", _uniform_init(layer_rng, fan_in, (c_out, c_in, k)))
        params.add(f"{prefix}.{i}.bias", _uniform_init(layer_rng.split("b"), fan_in, (c_out,)))


def conv1d_forward(spec: Conv1dSpec, params: ParamStore, x, prefix: str, activation: str = "elu") -> Tensor:
    """Run the conv stack on (batch, channels, time); a 2-D (channels, time) input is treated as batch 1.

    The activation is applied after every layer except the last.
    """
    x = T.tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.shape[1] != spec.channels[0]:
        raise DimensionError(f"conv stack {prefix!r} expects {spec.channels[0]} channels, got input shape {x.shape}")
    spec.output_length(x.shape[2])
    act = HIDDEN_ACTIVATIONS[activation]
    n = len(spec.kernels)
    for i in range(n):
        x = T.conv1d(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"], spec.strides[i])
        if i < n - 1:
            x = act(x)
    return x[0] if squeeze else x
