"""Parameter containers, initialization, Adam and checkpoints."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .io import read_tensor, write_tensor
from .tensor import Tensor, get_default_dtype


class ParameterSet:
    """Named trainable tensors with a fixed layout."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        for key, value in (entries or {}).items():
            self.add(key, value)

    def add(self, key: str, value) -> Tensor:
        if key in self._entries:
            raise KeyError(f"duplicate parameter id {key!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = key
        self._entries[key] = t
        return t

    def __getitem__(self, key: str) -> Tensor:
        return self._entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def layout(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._entries.items()}

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        for key, arr in values.items():
            t = self._entries[key]
            if arr.shape != t.shape:
                raise ValueError(f"{key}: shape {arr.shape} differs from layout {t.shape}")
            t.data = np.asarray(arr, dtype=t.dtype, order="C")

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in self._entries.items()}

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def subset(self, prefix: str) -> "ParameterSet":
        """View (shared tensors) over ids starting with ``prefix``."""
        out = ParameterSet()
        out._entries = {k: v for k, v in self._entries.items() if k.startswith(prefix)}
        return out

    def merged(self, other: "ParameterSet") -> "ParameterSet":
        out = ParameterSet()
        out._entries = {**self._entries, **other._entries}
        return out


def init_parameters(spec: Mapping[str, tuple[int, ...]], seed: int, dtype=None) -> ParameterSet:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases.

    Rank-1 entries are biases; fan_in of a weight is the product of all
    axes except the first.
    """
    if not spec:
        raise ValueError("empty parameter layout")
    dtype = dtype or get_default_dtype()
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for key in sorted(spec):
        shape = tuple(int(n) for n in spec[key])
        if not shape or any(n <= 0 for n in shape):
            raise ValueError(f"{key}: zero-extent shape {shape}")
        if len(shape) == 1:
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params.add(key, Tensor(arr.astype(dtype)))
    return params


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with coupled (L2) weight decay.

    Pure: returns new parameter arrays and a new state, inputs untouched.
    """
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for key, theta in params.items():
        if key not in grads:
            raise KeyError(f"missing gradient for {key!r}")
        g = np.asarray(grads[key])
        if g.shape != theta.shape:
            raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {theta.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"{key}: non-finite gradient")
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = b1 * state.m.get(key, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(key, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[key] = (theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)
        new_m[key] = m
        new_v[key] = v
    new_state = AdamState(state.lr, b1, b2, state.eps, state.weight_decay, t, new_m, new_v)
    return new_params, new_state


class Adam:
    """Stateful wrapper applying :func:`adam_step` to a ParameterSet in place."""

    def __init__(self, params: ParameterSet, lr: float, weight_decay: float = 0.0, **kw):
        self.params = params
        self.state = AdamState(lr=lr, weight_decay=weight_decay, **kw)

    def step(self) -> None:
        new, self.state = adam_step(self.params.values(), self.params.grads(), self.state)
        self.params.assign(new)

    def zero_grad(self) -> None:
        self.params.zero_grad()


def save_checkpoint(params: ParameterSet, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    manifest = []
    for key, t in params.items():
        write_tensor(directory / "params" / f"{key}.pseg", t.data)
        manifest.append({"id": key, "shape": list(t.shape), "dtype": str(t.dtype)})
    with open(directory / "manifest.json", "w") as fh:
        json.dump({"parameters": manifest}, fh, indent=1)


def load_checkpoint(directory: str | os.PathLike) -> ParameterSet:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    params = ParameterSet()
    for entry in manifest["parameters"]:
        arr = read_tensor(directory / "params" / f"{entry['id']}.pseg")
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{entry['id']}: stored shape {arr.shape} != manifest {entry['shape']}")
        params.add(entry["id"], Tensor(arr))
    return params
