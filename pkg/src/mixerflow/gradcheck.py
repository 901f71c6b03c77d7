"""Analytic-vs-central-difference gradient comparison."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, InitializationError
from .layers import ActNorm
from .nn import Module
from .tensor import Tensor, no_grad


@dataclass
class GradientReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst_parameter: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def default_loss(model, batch: np.ndarray) -> Tensor:
    """Mean negative log-likelihood in nats."""
    return -model.log_likelihood(Tensor(batch)).mean()


def check_gradients(model: Module, input_batch: np.ndarray, step: float = 1e-5,
                    tolerance: float = 1e-4, n_samples: int = 200, seed: int = 0,
                    loss_fn: Callable | None = None, abs_floor: float = 1e-5) -> GradientReport:
    """Compare ``backward`` gradients with ``(f(p+h) - f(p-h)) / 2h``.

    Checks every parameter element, or a seeded sample of ``n_samples``
    elements when there are more. The relative error of one element is
    ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps elements whose
    true gradient is ~0 from turning round-off into huge ratios.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ContractError(f"step {step} outside [1e-6, 1e-4]")
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    if any(p.dtype != np.float64 for p in params):
        raise ContractError("gradient checks need double precision")
    for name, m in model.named_modules():
        if isinstance(m, ActNorm) and not m.initialized:
            raise InitializationError(f"{name} is not initialised; initialise before checking")
    loss_fn = loss_fn or default_loss
    saved = {k: v.copy() for k, v in model.named_buffers()}

    def restore():
        for k, v in model.named_buffers():
            v[...] = saved[k]

    def f() -> float:
        with no_grad():
            val = float(loss_fn(model, input_batch).data)
        restore()
        return val

    loss = loss_fn(model, input_batch)
    T.backward(loss, params)
    restore()

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.Generator(np.random.PCG64(seed))
    flat_ids = np.arange(total) if total <= n_samples else np.sort(
        rng.choice(total, size=n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, worst_name = 0.0, ""
    for fid in flat_ids:
        pi = int(np.searchsorted(offsets, fid, side="right") - 1)
        p, j = params[pi], int(fid - offsets[pi])
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = f()
        flat[j] = orig - step
        down = f()
        flat[j] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(p.grad.reshape(-1)[j])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
        if rel > worst:
            worst, worst_name = rel, f"{names[pi]}[{j}]"
    return GradientReport(worst, len(flat_ids), tolerance, worst_name)
