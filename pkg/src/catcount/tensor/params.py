"""Named parameter collections and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import Tensor, get_dtype


class ModelParams:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, entries: list[tuple[str, Tensor]] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, tensor in entries or []:
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def size(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def merged(self, other: ModelParams, prefix: str = "") -> ModelParams:
        """A new collection sharing tensors from both (``other`` names get ``prefix``)."""
        out = ModelParams(list(self))
        for name, t in other:
            out.add(prefix + name, t)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = [n for n in self._entries if n not in arrays]
            extra = [n for n in arrays if n not in self._entries]
            if missing or extra:
                raise KeyError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, t in self:
            if name not in arrays:
                continue
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(get_dtype(), copy=True)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate: float, **hyper) -> AdamState:
        state = cls(learning_rate=learning_rate, **hyper)
        for name, t in params:
            state.first_moment[name] = np.zeros_like(t.data)
            state.second_moment[name] = np.zeros_like(t.data)
        return state


def adam_step(params: ModelParams, state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    for name, t in params:
        if t.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    dtype = get_dtype()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    lr = dtype(state.learning_rate)
    for name, t in params:
        g = t.grad.astype(dtype, copy=False)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = dtype(b1) * m + dtype(1 - b1) * g
        v = dtype(b2) * v + dtype(1 - b2) * g * g
        m_hat = m / dtype(c1)
        v_hat = v / dtype(c2)
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + dtype(state.epsilon))
        state.first_moment[name] = m
        state.second_moment[name] = v
        t.grad = None


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def conv_layer(
    params: ModelParams,
    rng: np.random.Generator,
    name: str,
    c_in: int,
    c_out: int,
    k: int,
    gain: float = 1.0,
) -> None:
    """Register He-initialised ``name.weight`` / ``name.bias`` for a k x k conv."""
    w = he_normal(rng, (c_out, c_in, k, k), c_in * k * k) * gain
    params.add(f"{name}.weight", Tensor(w))
    params.add(f"{name}.bias", Tensor(np.zeros(c_out)))
