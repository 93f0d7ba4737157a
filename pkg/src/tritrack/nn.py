"""A very small module/parameter registry on top of the ndops tape."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .ndops import Tensor, parameter


class Module:
    """Base class tracking parameters and submodules by attribute assignment.

    Parameter iteration order is attribute insertion order, which makes
    checkpoint manifests deterministic for a given architecture.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters by qualified name (shapes must match)."""
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing tensors in state: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != model {p.data.shape}"
                )
            p.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def cast(self, dtype) -> None:
        """Cast parameters in place (float32 inference mode)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)


def he_conv(rng: np.random.Generator, co: int, ci: int, kh: int, kw: int) -> Tensor:
    """He fan-in initialized convolution weight."""
    std = np.sqrt(2.0 / (ci * kh * kw))
    return parameter(rng.standard_normal((co, ci, kh, kw)) * std)


def he_linear(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    std = np.sqrt(2.0 / in_dim)
    return parameter(rng.standard_normal((out_dim, in_dim)) * std)


def zeros_param(*shape: int) -> Tensor:
    return parameter(np.zeros(shape))


def const_param(value: float, *shape: int) -> Tensor:
    return parameter(np.full(shape, float(value)))
