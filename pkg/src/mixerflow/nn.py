"""Module container, dense layers, normalisation and the residual conditioner."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Parameter, Tensor


class Module:
    """Parameter/buffer registry with dotted names and a train/eval switch.

    Parameters and child modules are discovered from instance attributes in
    assignment order; lists of modules are indexed (``flows.0.coupling``).
    Buffers are non-learnable arrays that still belong in a checkpoint.
    """

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self.children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self.named_modules(prefix):
            for key, val in mod._buffers.items():
                yield (f"{name}.{key}" if name else key), val

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ContractError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Dense(Module):
    """``y = x @ W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float64, zero_init: bool = False):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ContractError(f"dense widths must be positive, got {n_in}->{n_out}")
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(n_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class FeatureNorm(Module):
    """Batch normalisation over the last axis with running statistics."""

    def __init__(self, width: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(width), dtype=dtype)
        self.bias = Parameter(np.zeros(width), dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(width, dtype=dtype))
        self.register_buffer("running_var", np.ones(width, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class ResidualConditioner(Module):
    """Residual MLP predicting coupling parameters.

    in_proj -> [dense -> norm -> GELU -> dense] + skip -> norm -> GELU -> out.
    The output layer starts at zero so the conditioner emits exactly zero.
    """

    def __init__(self, n_in: int, n_out: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float64, use_norm: bool = True, approximate_gelu: bool = False):
        super().__init__()
        if hidden < 1:
            raise ContractError("hidden width must be >= 1")
        self.n_in, self.n_out = n_in, n_out
        self.in_proj = Dense(n_in, hidden, rng, dtype)
        self.dense_a = Dense(hidden, hidden, rng, dtype)
        self.dense_b = Dense(hidden, hidden, rng, dtype)
        self.norm_a = FeatureNorm(hidden, dtype) if use_norm else None
        self.norm_b = FeatureNorm(hidden, dtype) if use_norm else None
        self.out = Dense(hidden, n_out, rng, dtype, zero_init=True)
        self.approximate_gelu = approximate_gelu

    def __call__(self, x: Tensor) -> Tensor:
        act = lambda v: T.gelu(v, self.approximate_gelu)  # noqa: E731
        h = self.in_proj(x)
        r = self.dense_a(h)
        if self.norm_a is not None:
            r = self.norm_a(r)
        r = self.dense_b(act(r))
        h = h + r
        if self.norm_b is not None:
            h = self.norm_b(h)
        return self.out(act(h))
