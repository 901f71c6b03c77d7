"""Bijections, chains, the standard-normal base and exact log-likelihoods.

Direction convention: ``forward`` maps data x to latent z and returns the
per-sample log|det dz/dx|; ``inverse`` maps z back to x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg
from . import tensor as T
from .errors import ContractError, NumericError
from .nn import Module
from .tensor import Tensor, no_grad

LOG_2PI = math.log(2.0 * math.pi)


class Bijection(Module):
    """Invertible map over tensors shaped ``[batch, ...]``."""

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, z: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.forward(x)


def zero_logdet(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape[0], dtype=x.dtype))


class Identity(Bijection):
    def forward(self, x):
        return x, zero_logdet(x)

    def inverse(self, z):
        return z


class ElementwiseScale(Bijection):
    """Fixed ``z = scale * x`` with ``scale`` broadcast over one sample."""

    def __init__(self, scale):
        super().__init__()
        self.register_buffer("scale", np.asarray(scale, dtype=np.float64))

    def forward(self, x):
        s = self._buffers["scale"].astype(x.dtype)
        per_sample = np.broadcast_to(np.log(np.abs(s)), x.shape[1:]).sum()
        ld = Tensor(np.full(x.shape[0], per_sample, dtype=x.dtype))
        return x * Tensor(s), ld

    def inverse(self, z):
        return z * Tensor(1.0 / self._buffers["scale"].astype(z.dtype))


class Permute(Bijection):
    """Fixed permutation of the flattened per-sample coordinates."""

    def __init__(self, perm: np.ndarray):
        super().__init__()
        perm = np.asarray(perm, dtype=np.intp)
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ContractError("not a permutation")
        self.register_buffer("perm", perm)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return T.take(flat, self._buffers["perm"], axis=1).reshape(x.shape), zero_logdet(x)

    def inverse(self, z):
        flat = z.reshape(z.shape[0], -1)
        inv = np.argsort(self._buffers["perm"])
        return T.take(flat, inv, axis=1).reshape(z.shape)


class FlowChain(Bijection):
    """Members applied in order on ``forward``, reversed on ``inverse``."""

    def __init__(self, members: Sequence[Bijection], names: Sequence[str] | None = None):
        super().__init__()
        self.members = list(members)
        self.labels = list(names) if names is not None else [
            f"{i}:{type(m).__name__}" for i, m in enumerate(self.members)]

    def forward(self, x):
        total = zero_logdet(x)
        for label, m in zip(self.labels, self.members):
            try:
                x, ld = m.forward(x)
            except NumericError as err:
                raise err.located(label) from err
            total = total + ld
        return x, total

    def inverse(self, z):
        for label, m in zip(reversed(self.labels), reversed(self.members)):
            try:
                z = m.inverse(z)
            except NumericError as err:
                raise err.located(label) from err
        return z


@dataclass
class StandardNormal:
    dim: int

    def log_prob(self, z: Tensor) -> Tensor:
        flat = z.reshape(z.shape[0], -1)
        if flat.shape[1] != self.dim:
            raise ContractError(f"latent has {flat.shape[1]} dims, base expects {self.dim}")
        return T.scale(T.square(flat).sum(axis=1), -0.5) - 0.5 * self.dim * LOG_2PI

    def sample(self, n: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
        return rng.standard_normal((n, self.dim)).astype(dtype, copy=False)


def log_likelihood(flow: Bijection, base: StandardNormal, x: Tensor) -> Tensor:
    """Per-sample ``log p_X(x)`` in nats: ``log p_Z(f(x)) + log|det df/dx|``."""
    z, log_det = flow.forward(x)
    return base.log_prob(z) + log_det


def bits_per_dim(log_prob_nats, dim: int, dequant_levels: int = 256):
    """Bits per dimension of the discrete model behind a uniform dequantisation.

    ``log_prob_nats`` is the density of ``y = (x_int + u) / levels`` on the unit
    cube; the ``log2(levels)`` term converts it back to integer-pixel rates.
    """
    if dim <= 0:
        raise ContractError(f"dimension must be positive, got {dim}")
    lp = log_prob_nats.data if isinstance(log_prob_nats, Tensor) else np.asarray(log_prob_nats)
    return -lp / (dim * math.log(2.0)) + math.log2(dequant_levels)


def sample(flow: Bijection, base: StandardNormal, n: int, seed: int,
           sample_shape: Sequence[int] | None = None, dtype=np.float64) -> np.ndarray:
    """Draw ``n`` data-space samples; identical seeds give identical arrays."""
    rng = np.random.Generator(np.random.PCG64(seed))
    z = base.sample(n, rng, dtype)
    if sample_shape is not None:
        z = z.reshape((n, *sample_shape))
    with no_grad():
        try:
            x = flow.inverse(Tensor(z))
        except NumericError as err:
            raise NumericError(f"non-finite sample: {err}") from err
    return x.data


# -- verification ------------------------------------------------------------------

@dataclass
class BijectionReport:
    round_trip: float
    log_det_error: float
    round_trip_tol: float
    log_det_tol: float
    per_probe: list[tuple[float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.round_trip < self.round_trip_tol and self.log_det_error < self.log_det_tol


def fd_jacobian(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` (one sample, flattened) at ``x``.

    All ``2D`` perturbed copies go through ``fn`` as one batch.
    """
    d = x.size
    eye = np.eye(d).reshape((d, *x.shape)) * step
    batch = np.concatenate([x[None] + eye, x[None] - eye])
    out = fn(batch).reshape(2 * d, -1)
    return ((out[:d] - out[d:]) / (2 * step)).T


def verify_bijection(b: Bijection, probe_shape: Sequence[int], n_probes: int = 20,
                     round_trip_tol: float = 1e-8, log_det_tol: float = 1e-6,
                     seed: int = 0, step: float = 1e-5, probe_scale: float = 1.0) -> BijectionReport:
    """Round-trip and log-det checks on seeded probes (double precision)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    was_training = b.training
    b.eval()
    worst_rt = worst_ld = 0.0
    per_probe = []
    try:
        with no_grad():
            for _ in range(n_probes):
                x = rng.standard_normal(tuple(probe_shape)) * probe_scale
                z, ld = b.forward(Tensor(x[None]))
                back = b.inverse(z).data[0]
                rt = float(np.max(np.abs(back - x)))
                jac = fd_jacobian(lambda batch: b.forward(Tensor(batch))[0].data, x, step)
                _, oracle = linalg.slogdet(jac)
                lde = abs(float(ld.data[0]) - oracle)
                per_probe.append((rt, lde))
                worst_rt, worst_ld = max(worst_rt, rt), max(worst_ld, lde)
    finally:
        b.train(was_training)
    return BijectionReport(worst_rt, worst_ld, round_trip_tol, log_det_tol, per_probe)
