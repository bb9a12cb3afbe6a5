"""Parameter containers with deterministic naming."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from flowood.tensor import Tensor


class Module:
    """Base class holding parameters (grad-tracked Tensors), buffers and submodules.

    Attribute insertion order fixes parameter naming, so two modules built
    with the same arguments enumerate identical names.
    """

    training = False

    def __init__(self) -> None:
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value) -> None:
        if "_buffers" not in self.__dict__:
            self._buffers = {}
        self._buffers[name] = np.array(value, dtype=np.float64)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, mod in self.named_modules():
            for key, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield f"{prefix}{key}", value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for key, value in mod.__dict__.get("_buffers", {}).items():
                yield f"{prefix}{key}", value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[f"{name}"] = buf.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (mod, key) for name, mod, key in self._buffer_slots()}
        missing = (set(params) | set(buffers)) - set(state)
        if strict and missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != np.shape(value):
                    raise ValueError(f"shape mismatch for {name}: {p.shape} vs {np.shape(value)}")
                p.data = np.array(value, dtype=np.float64)
            elif name in buffers:
                mod, key = buffers[name]
                mod._buffers[key] = np.array(value, dtype=np.float64)
            elif strict:
                raise KeyError(f"unexpected state entry {name!r}")

    def _buffer_slots(self):
        for prefix, mod in self.named_modules():
            for key in mod.__dict__.get("_buffers", {}):
                yield f"{prefix}{key}", mod, key


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)
