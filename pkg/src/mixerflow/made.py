"""Masked autoregressive networks and the MAF layer built on them."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .flows import Bijection
from .layers import _scale_terms
from .nn import Dense, Module
from .tensor import Tensor


def assign_degrees(d_in: int, hidden_widths: Sequence[int], rng: np.random.Generator,
                   mode: str = "random") -> list[np.ndarray]:
    """Degrees for inputs (1..d_in) and each hidden layer (values in 1..d_in-1)."""
    if d_in < 2:
        raise ContractError("MADE needs at least 2 inputs")
    degrees = [np.arange(1, d_in + 1)]
    for width in hidden_widths:
        if width < 1:
            raise ContractError("hidden width must be >= 1")
        if mode == "random":
            degrees.append(rng.integers(1, d_in, size=width))
        elif mode == "sequential":
            degrees.append(np.arange(width) % (d_in - 1) + 1)
        else:
            raise ContractError(f"unknown degree mode {mode!r}")
    return degrees


def build_masks(degrees: list[np.ndarray], d_out: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Masks laid out ``[in, out]`` to match :class:`Dense` weights.

    Hidden connections need ``m_out >= m_in``; the output layer needs
    ``m_out > m_in`` with output degrees ``1..d_out``.
    """
    hidden = [(d_out_[None, :] >= d_in_[:, None]).astype(float)
              for d_in_, d_out_ in zip(degrees[:-1], degrees[1:])]
    out_deg = np.arange(1, d_out + 1)
    output = (out_deg[None, :] > degrees[-1][:, None]).astype(float)
    return hidden, output


class MadeNetwork(Module):
    """Autoregressive net mapping ``x`` to ``(s_raw, t)`` with output ``i`` seeing only ``x_<i``."""

    def __init__(self, d_in: int, hidden_widths: Sequence[int], rng: np.random.Generator,
                 dtype=np.float64, degree_mode: str = "random", approximate_gelu: bool = False):
        super().__init__()
        hidden_widths = list(hidden_widths)
        if not hidden_widths:
            raise ContractError("MADE needs at least one hidden layer")
        self.d_in = d_in
        self.degrees = assign_degrees(d_in, hidden_widths, rng, degree_mode)
        hidden_masks, out_mask = build_masks(self.degrees, d_in)
        widths = [d_in] + hidden_widths
        self.hidden = [Dense(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.s_head = Dense(widths[-1], d_in, rng, dtype, zero_init=True)
        self.t_head = Dense(widths[-1], d_in, rng, dtype, zero_init=True)
        self.hidden_masks = [m.astype(dtype) for m in hidden_masks]
        self.output_mask = out_mask.astype(dtype)
        self.approximate_gelu = approximate_gelu

    @staticmethod
    def _masked(layer: Dense, mask: np.ndarray, x: Tensor) -> Tensor:
        return T.linear(x, layer.weight * Tensor(mask), layer.bias)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = x
        for layer, mask in zip(self.hidden, self.hidden_masks):
            h = T.gelu(self._masked(layer, mask, h), self.approximate_gelu)
        return (self._masked(self.s_head, self.output_mask, h),
                self._masked(self.t_head, self.output_mask, h))


def made_build_masks(d_in: int, hidden_widths: Sequence[int], seed: int,
                     dtype=np.float64, degree_mode: str = "random") -> MadeNetwork:
    rng = np.random.Generator(np.random.PCG64(seed))
    return MadeNetwork(d_in, hidden_widths, rng, dtype, degree_mode)


class MafLayer(Bijection):
    """``y_i = x_i * exp(s_i(x_<i)) + t_i(x_<i)`` along the last axis.

    Density evaluation is one parallel pass; inversion runs the ``k``-step
    recursion, one MADE evaluation per coordinate.
    """

    def __init__(self, width: int, hidden_widths: Sequence[int], rng: np.random.Generator,
                 dtype=np.float64, scale_law: str = "exp", degree_mode: str = "random",
                 approximate_gelu: bool = False):
        super().__init__()
        self.width = width
        self.scale_law = scale_law
        self.made = MadeNetwork(width, hidden_widths, rng, dtype, degree_mode, approximate_gelu)

    def forward(self, x):
        if x.shape[-1] != self.width:
            raise ContractError(f"row width {x.shape[-1]} != MAF width {self.width}")
        s_raw, t = self.made(x)
        log_s = _scale_terms(s_raw, self.scale_law)
        y = x * T.exp(log_s) + t
        return y, log_s.reshape(x.shape[0], -1).sum(axis=1)

    def inverse(self, z):
        y = z.data
        x = np.zeros_like(y)
        with T.no_grad():
            for i in range(self.width):
                s_raw, t = self.made(Tensor(x))
                log_s = _scale_terms(s_raw, self.scale_law).data
                x[..., i] = (y[..., i] - t.data[..., i]) * np.exp(-log_s[..., i])
        return Tensor(x)
