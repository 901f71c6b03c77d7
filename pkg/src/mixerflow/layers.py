"""Concrete flow layers operating on images and mixer-matrices.

A mixer-matrix holds one image as ``[n_p, c]``: row ``k`` is patch ``k`` in
raster order, flattened row-major over the patch pixels with the channel
varying fastest. Row-wise layers act on the last axis of ``[batch, n, k]``
and share their weights across all ``n`` rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from . import tensor as T
from .errors import ConditioningError, ContractError, GeometryError, InitializationError, NumericError
from .flows import Bijection, zero_logdet
from .nn import ResidualConditioner
from .tensor import Parameter, Tensor

LOG_TINY = math.log(1e-12)
MAX_LOG_SCALE = 80.0


@dataclass(frozen=True)
class PatchGeometry:
    h: int
    w: int
    channels: int
    p_h: int
    p_w: int

    def __post_init__(self):
        if min(self.h, self.w, self.channels, self.p_h, self.p_w) < 1:
            raise GeometryError(f"extents must be positive: {self}")
        if self.h % self.p_h or self.w % self.p_w:
            raise GeometryError(f"patch {self.p_h}x{self.p_w} does not tile {self.h}x{self.w}")

    @property
    def n_patches(self) -> int:
        return (self.h * self.w) // (self.p_h * self.p_w)

    @property
    def patch_width(self) -> int:
        return self.p_h * self.p_w * self.channels

    @property
    def dim(self) -> int:
        return self.h * self.w * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.h, self.w)

    def index_map(self) -> np.ndarray:
        """``mixer.flat[j] == image.flat[index_map()[j]]`` for a ``[ch, h, w]`` image."""
        ch, h, w, ph, pw = self.channels, self.h, self.w, self.p_h, self.p_w
        idx = np.arange(self.dim).reshape(ch, h // ph, ph, w // pw, pw)
        return idx.transpose(1, 3, 2, 4, 0).reshape(-1)


# -- mixer-matrix reshapes --------------------------------------------------------

@dataclass
class MixerMatrix:
    data: Tensor
    geometry: PatchGeometry
    patch_major: bool = False

    @property
    def shape(self):
        return self.data.shape


def patchify(image: Tensor, geom: PatchGeometry) -> MixerMatrix:
    if tuple(image.shape[1:]) != geom.image_shape:
        raise GeometryError(f"image {image.shape[1:]} does not match geometry {geom.image_shape}")
    flat = image.reshape(image.shape[0], -1)
    rows = T.take(flat, geom.index_map(), axis=1)
    return MixerMatrix(rows.reshape(image.shape[0], geom.n_patches, geom.patch_width), geom)


def depatchify(m: MixerMatrix) -> Tensor:
    data = m.data.swapaxes(1, 2) if m.patch_major else m.data
    b = data.shape[0]
    inv = np.argsort(m.geometry.index_map())
    return T.take(data.reshape(b, -1), inv, axis=1).reshape(b, *m.geometry.image_shape)


def transpose_mixer(m: MixerMatrix) -> MixerMatrix:
    return MixerMatrix(m.data.swapaxes(1, 2), m.geometry, not m.patch_major)


class Patchify(Bijection):
    """Image ``[b, ch, h, w]`` to mixer-matrix ``[b, n_p, c]``; a pure permutation."""

    def __init__(self, geom: PatchGeometry):
        super().__init__()
        self.geom = geom

    def forward(self, x):
        return patchify(x, self.geom).data, zero_logdet(x)

    def inverse(self, z):
        return depatchify(MixerMatrix(z, self.geom))


class TransposeMixer(Bijection):
    def forward(self, x):
        return x.swapaxes(1, 2), zero_logdet(x)

    def inverse(self, z):
        return z.swapaxes(1, 2)


# -- linear block -------------------------------------------------------------------

class LinearBlock(Bijection):
    """Row map ``v -> P L U v`` with learnable unit-lower ``L`` and upper ``U``.

    ``U``'s diagonal is ``sign * exp(log_diag)`` with the sign frozen at
    construction, so the matrix stays invertible. Mode ``RLU`` uses the
    order-reversing permutation for ``P``; ``LU`` uses the identity.
    """

    def __init__(self, width: int, mode: str = "LU", dtype=np.float64):
        super().__init__()
        if mode not in ("LU", "RLU"):
            raise ContractError(f"linear mode must be LU or RLU, got {mode!r}")
        self.width = width
        self.mode = mode
        self.lower = Parameter(np.zeros((width, width)), dtype=dtype)
        self.upper = Parameter(np.zeros((width, width)), dtype=dtype)
        self.log_diag = Parameter(np.zeros(width), dtype=dtype)
        perm = np.arange(width)[::-1].copy() if mode == "RLU" else np.arange(width)
        self.register_buffer("perm", perm)
        self.register_buffer("sign", np.ones(width, dtype=dtype))
        self._lmask = np.tril(np.ones((width, width)), -1).astype(dtype)
        self._umask = np.triu(np.ones((width, width)), 1).astype(dtype)

    def _check_diag(self):
        if np.any(self.log_diag.data < LOG_TINY):
            raise ConditioningError("|diag(U)| below 1e-12")

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(P, L, U)`` as plain arrays."""
        k = self.width
        p = np.eye(k)[self._buffers["perm"]]
        l = self.lower.data * self._lmask + np.eye(k)
        u = self.upper.data * self._umask + np.diag(self._buffers["sign"] * np.exp(self.log_diag.data))
        return p, l, u

    def weight(self) -> np.ndarray:
        p, l, u = self.matrices()
        return p @ l @ u

    def forward(self, x):
        self._check_diag()
        k = self.width
        if x.shape[-1] != k:
            raise ContractError(f"row width {x.shape[-1]} != block width {k}")
        eye = Tensor(np.eye(k, dtype=x.dtype))
        diag = T.exp(self.log_diag) * Tensor(self._buffers["sign"].astype(x.dtype))
        u = self.upper * Tensor(self._umask) + eye * diag
        l = self.lower * Tensor(self._lmask) + eye
        # row vectors: (P L U v)^T = v^T U^T L^T P^T
        y = T.matmul(T.matmul(x, T.transpose(u, (1, 0))), T.transpose(l, (1, 0)))
        y = T.take(y, self._buffers["perm"], axis=-1)
        n_rows = int(np.prod(x.shape[1:-1])) if x.ndim > 2 else 1
        ld = T.scale(self.log_diag.sum(), n_rows) + zero_logdet(x)
        return y, ld

    def inverse(self, z):
        self._check_diag()
        _, l, u = self.matrices()
        shape = z.shape
        rows = z.data.reshape(-1, self.width)
        rows = rows[:, np.argsort(self._buffers["perm"])]
        a = linalg.solve_lower_unit(l, rows.T)
        v = linalg.solve_upper(u, a)
        return Tensor(v.T.reshape(shape).astype(z.dtype))


class Conv1x1(Bijection):
    """The same invertible ``ch x ch`` matrix applied at every pixel."""

    def __init__(self, channels: int, dtype=np.float64):
        super().__init__()
        self.block = LinearBlock(channels, "LU", dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.block.width:
            raise ContractError(f"expected [b, {self.block.width}, h, w], got {x.shape}")
        y, ld = self.block.forward(T.transpose(x, (0, 2, 3, 1)))
        return T.transpose(y, (0, 3, 1, 2)), ld

    def inverse(self, z):
        y = self.block.inverse(T.transpose(z, (0, 2, 3, 1)))
        return T.transpose(y, (0, 3, 1, 2))


# -- affine coupling -----------------------------------------------------------------

def _scale_terms(s_raw: Tensor, law: str) -> Tensor:
    """log S for the two supported scale laws."""
    if law == "exp":
        if s_raw.data.size and s_raw.data.max() > MAX_LOG_SCALE:
            raise NumericError("coupling scale overflow (s_raw > 80)")
        return s_raw
    if law == "bounded":
        return T.log_sigmoid(s_raw + 2.0)
    raise ContractError(f"unknown scale law {law!r}")


class AffineCoupling(Bijection):
    """``y_d = S * x_d + T`` on the first ``d = k // 2`` coordinates of each row.

    ``S, T`` come from the conditioner applied to the remaining ``k - d``
    coordinates, which pass through unchanged. ``flip`` swaps the roles of the
    two halves (used when no linear block sits in front to mix them).
    """

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=np.float64,
                 scale_law: str = "exp", use_norm: bool = True, approximate_gelu: bool = False,
                 flip: bool = False, conditioner=None):
        super().__init__()
        if width < 2:
            raise ContractError("coupling needs row width >= 2")
        if scale_law not in ("exp", "bounded"):
            raise ContractError(f"unknown scale law {scale_law!r}")
        self.width = width
        self.d = width // 2
        self.flip = flip
        self.scale_law = scale_law
        n_keep = width - self.d
        self.conditioner = conditioner if conditioner is not None else ResidualConditioner(
            n_keep, 2 * self.d, hidden, rng, dtype, use_norm, approximate_gelu)

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        d, k = self.d, self.width
        if self.flip:
            return x[..., k - d:], x[..., :k - d]
        return x[..., :d], x[..., d:]

    def _join(self, changed: Tensor, kept: Tensor) -> Tensor:
        return T.concatenate([kept, changed] if self.flip else [changed, kept], axis=-1)

    def _params(self, kept: Tensor) -> tuple[Tensor, Tensor]:
        out = self.conditioner(kept)
        return out[..., :self.d], out[..., self.d:]

    def forward(self, x):
        if x.shape[-1] != self.width:
            raise ContractError(f"row width {x.shape[-1]} != coupling width {self.width}")
        changed, kept = self._split(x)
        s_raw, t = self._params(kept)
        log_s = _scale_terms(s_raw, self.scale_law)
        y = changed * T.exp(log_s) + t
        ld = log_s.reshape(x.shape[0], -1).sum(axis=1)
        return self._join(y, kept), ld

    def inverse(self, z):
        changed, kept = self._split(z)
        s_raw, t = self._params(kept)
        log_s = _scale_terms(s_raw, self.scale_law)
        x = (changed - t) * T.exp(-log_s)
        return self._join(x, kept)


# -- actnorm ---------------------------------------------------------------------------

class ActNorm(Bijection):
    """Per-element affine ``y = exp(log_scale) * x + bias`` over one sample's grid.

    The first batch seen while ``data_init`` is set fixes scale and bias so
    that batch comes out with zero mean and unit variance per element.
    """

    def __init__(self, shape: tuple[int, ...], dtype=np.float64):
        super().__init__()
        self.shape = tuple(shape)
        self.log_scale = Parameter(np.zeros(self.shape), dtype=dtype)
        self.bias = Parameter(np.zeros(self.shape), dtype=dtype)
        self.register_buffer("initialized", np.zeros(1, dtype=np.int64))
        self.data_init = False

    @property
    def initialized(self) -> bool:
        return bool(self._buffers["initialized"][0])

    def force_identity(self) -> None:
        self.log_scale.data[...] = 0
        self.bias.data[...] = 0
        self._buffers["initialized"][0] = 1

    def initialize_from(self, x: np.ndarray) -> None:
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), 1e-6)
        self.log_scale.data[...] = -np.log(std)
        self.bias.data[...] = -mean / std
        self._buffers["initialized"][0] = 1

    def _check(self):
        if not self.initialized:
            raise InitializationError("ActNorm used before data-dependent initialisation")
        if np.any(self.log_scale.data < LOG_TINY):
            raise ConditioningError("ActNorm |scale| below 1e-12")

    def forward(self, x):
        if tuple(x.shape[1:]) != self.shape:
            raise ContractError(f"ActNorm over {self.shape} got {x.shape[1:]}")
        if not self.initialized and self.data_init:
            self.initialize_from(x.data)
        self._check()
        y = x * T.exp(self.log_scale) + self.bias
        return y, self.log_scale.sum() + zero_logdet(x)

    def inverse(self, z):
        self._check()
        return (z - self.bias) * T.exp(-self.log_scale)


def set_data_init(module, on: bool) -> None:
    for _, m in module.named_modules():
        if isinstance(m, ActNorm):
            m.data_init = on


# -- shift layer --------------------------------------------------------------------------

class ShiftLayer(Bijection):
    """Applies ``inner`` to patches re-extracted from a shifted inner window.

    Acts on main-geometry mixer-matrices ``[b, n_p, c]``. The window covers
    rows ``s_h : h - p_h + s_h`` and columns ``s_w : w - p_w + s_w``; pixels
    outside it (the frame) are copied through untouched.
    """

    def __init__(self, geom: PatchGeometry, shift: tuple[int, int], inner: Bijection):
        super().__init__()
        s_h, s_w = shift
        if not (0 <= s_h < geom.p_h and 0 <= s_w < geom.p_w) or (s_h, s_w) == (0, 0):
            raise GeometryError(f"shift {shift} must satisfy 0 <= s < patch and be nonzero")
        if geom.h - geom.p_h < geom.p_h or geom.w - geom.p_w < geom.p_w:
            raise GeometryError(f"image {geom.h}x{geom.w} too small for a shifted window")
        self.geom = geom
        self.shift = (s_h, s_w)
        self.inner_geom = PatchGeometry(geom.h - geom.p_h, geom.w - geom.p_w, geom.channels,
                                        geom.p_h, geom.p_w)
        self.inner = inner
        gather, frame = self._index_maps()
        order = np.concatenate([gather, frame])
        self.register_buffer("gather", gather)
        self.register_buffer("frame", frame)
        self.register_buffer("scatter", np.argsort(order))

    def _index_maps(self) -> tuple[np.ndarray, np.ndarray]:
        g, ig = self.geom, self.inner_geom
        s_h, s_w = self.shift
        pos_in_mixer = np.argsort(g.index_map())        # image flat -> main mixer flat
        ch, r, q = np.unravel_index(ig.index_map(), ig.image_shape)
        img_flat = np.ravel_multi_index((ch, r + s_h, q + s_w), g.image_shape)
        gather = pos_in_mixer[img_flat]
        frame = np.setdiff1d(np.arange(g.dim), gather)
        return gather, frame

    def _apply(self, x: Tensor, fn):
        b = x.shape[0]
        flat = x.reshape(b, -1)
        window = T.take(flat, self._buffers["gather"], axis=1)
        window = window.reshape(b, self.inner_geom.n_patches, self.inner_geom.patch_width)
        out, ld = fn(window)
        frame = T.take(flat, self._buffers["frame"], axis=1)
        joined = T.concatenate([out.reshape(b, -1), frame], axis=1)
        return T.take(joined, self._buffers["scatter"], axis=1).reshape(x.shape), ld

    def forward(self, x):
        return self._apply(x, self.inner.forward)

    def inverse(self, z):
        return self._apply(z, lambda w: (self.inner.inverse(w), None))[0]
