"""The MixerFlow stack: configuration, mixer layers, full model and hybrid head."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, GeometryError, NumericError
from .flows import Bijection, StandardNormal, bits_per_dim, zero_logdet
from .layers import (ActNorm, AffineCoupling, Conv1x1, LinearBlock, MixerMatrix, PatchGeometry,
                     ShiftLayer, depatchify, patchify, set_data_init)
from .made import MafLayer
from .nn import Dense, Module
from .optim import Adam
from .tensor import Tensor, no_grad


@dataclass
class MixerFlowConfig:
    h: int = 32
    w: int = 32
    channels: int = 3
    p_h: int = 4
    p_w: int = 4
    n_layers: int = 30
    flows_per_stage: int = 4
    hidden_dim: int = 128
    patch_hidden_dim: int = 0          # 0: same as hidden_dim
    shift_every: int = 4
    shift_h: int = 1
    shift_w: int = 1
    linear_mode: str = "LU"
    coupling_kind: str = "mlp_affine"
    scale_law: str = "exp"
    enable_linear_blocks: bool = True
    enable_shift_layers: bool = True
    enable_couplings: bool = True
    use_norm: bool = True
    approximate_gelu: bool = False
    made_degrees: str = "random"
    dequant_levels: int = 256
    precision: str = "double"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def geometry(self) -> PatchGeometry:
        return PatchGeometry(self.h, self.w, self.channels, self.p_h, self.p_w)

    @property
    def dim(self) -> int:
        return self.h * self.w * self.channels

    def validate(self) -> None:
        try:
            geom = self.geometry
        except GeometryError as err:
            raise ConfigError(str(err)) from err
        if self.n_layers < 1 or self.flows_per_stage < 1:
            raise ConfigError("n_layers and flows_per_stage must be >= 1")
        if self.hidden_dim < 1 or self.patch_hidden_dim < 0:
            raise ConfigError("hidden dimensions must be >= 1")
        if self.linear_mode not in ("LU", "RLU"):
            raise ConfigError(f"linear_mode must be LU or RLU, got {self.linear_mode!r}")
        if self.coupling_kind not in ("mlp_affine", "maf"):
            raise ConfigError(f"coupling_kind must be mlp_affine or maf, got {self.coupling_kind!r}")
        if self.scale_law not in ("exp", "bounded"):
            raise ConfigError(f"scale_law must be exp or bounded, got {self.scale_law!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, got {self.precision!r}")
        if self.dequant_levels < 2:
            raise ConfigError("dequant_levels must be >= 2")
        if self.enable_shift_layers and self.shift_every >= 1 and self.n_layers >= self.shift_every:
            s = (self.shift_h, self.shift_w)
            if not (0 <= s[0] < geom.p_h and 0 <= s[1] < geom.p_w) or s == (0, 0):
                raise ConfigError(f"shift {s} incompatible with patch {geom.p_h}x{geom.p_w}")
            if geom.h < 2 * geom.p_h or geom.w < 2 * geom.p_w:
                raise ConfigError("image too small for shift layers")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MixerFlowConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def _located(label: str, fn, *args):
    try:
        return fn(*args)
    except NumericError as err:
        raise err.located(label) from err


class FlowStep(Bijection):
    """LinearBlock -> coupling (affine or MAF) -> ActNorm on rows of width ``width``."""

    def __init__(self, width: int, n_rows: int, cfg: MixerFlowConfig, hidden: int,
                 rng: np.random.Generator, flip: bool, dtype):
        super().__init__()
        self.linear = LinearBlock(width, cfg.linear_mode, dtype) if cfg.enable_linear_blocks else None
        self.coupling = None
        if cfg.enable_couplings and width >= 2:
            if cfg.coupling_kind == "maf":
                self.coupling = MafLayer(width, [hidden], rng, dtype, cfg.scale_law,
                                         cfg.made_degrees, cfg.approximate_gelu)
            else:
                self.coupling = AffineCoupling(width, hidden, rng, dtype, cfg.scale_law,
                                               cfg.use_norm, cfg.approximate_gelu, flip=flip)
        self.actnorm = ActNorm((n_rows, width), dtype)

    def members(self) -> list[tuple[str, Bijection]]:
        return [(k, m) for k, m in (("linear", self.linear), ("coupling", self.coupling),
                                    ("actnorm", self.actnorm)) if m is not None]

    def forward(self, x):
        total = zero_logdet(x)
        for label, m in self.members():
            x, ld = _located(label, m.forward, x)
            total = total + ld
        return x, total

    def inverse(self, z):
        for label, m in reversed(self.members()):
            z = _located(label, m.inverse, z)
        return z


class MixerLayer(Bijection):
    """Channel-mixing steps on rows, transpose, ActNorm, patch-mixing steps, transpose back."""

    def __init__(self, n_patches: int, patch_width: int, cfg: MixerFlowConfig,
                 rng: np.random.Generator, dtype):
        super().__init__()
        n, c = n_patches, patch_width
        patch_hidden = cfg.patch_hidden_dim or cfg.hidden_dim
        flip = lambda i: (not cfg.enable_linear_blocks) and i % 2 == 1  # noqa: E731
        self.channel_steps = [FlowStep(c, n, cfg, cfg.hidden_dim, rng, flip(i), dtype)
                              for i in range(cfg.flows_per_stage)]
        self.mid_norm = ActNorm((c, n), dtype)
        self.patch_steps = [FlowStep(n, c, cfg, patch_hidden, rng, flip(i), dtype)
                            for i in range(cfg.flows_per_stage)]

    def forward(self, x):
        total = zero_logdet(x)
        for i, step in enumerate(self.channel_steps):
            x, ld = _located(f"channel_steps.{i}", step.forward, x)
            total = total + ld
        x = x.swapaxes(1, 2)
        x, ld = _located("mid_norm", self.mid_norm.forward, x)
        total = total + ld
        for i, step in enumerate(self.patch_steps):
            x, ld = _located(f"patch_steps.{i}", step.forward, x)
            total = total + ld
        return x.swapaxes(1, 2), total

    def inverse(self, z):
        z = z.swapaxes(1, 2)
        for i, step in reversed(list(enumerate(self.patch_steps))):
            z = _located(f"patch_steps.{i}", step.inverse, z)
        z = _located("mid_norm", self.mid_norm.inverse, z)
        z = z.swapaxes(1, 2)
        for i, step in reversed(list(enumerate(self.channel_steps))):
            z = _located(f"channel_steps.{i}", step.inverse, z)
        return z


class FlowModel(Bijection):
    """Image ``[b, ch, h, w]`` -> flattened latent ``[b, h*w*ch]``.

    Conv1x1, patchify, then ``n_layers`` mixer layers; every
    ``shift_every``-th layer (1-indexed) runs inside a :class:`ShiftLayer`.
    The latent is the final mixer-matrix flattened row-major.
    """

    def __init__(self, cfg: MixerFlowConfig):
        super().__init__()
        self.cfg = cfg
        self.geom = cfg.geometry
        dtype = T.dtype_of(cfg.precision)
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.conv = Conv1x1(cfg.channels, dtype)
        self.layers: list[Bijection] = []
        g = self.geom
        for i in range(1, cfg.n_layers + 1):
            shifted = cfg.enable_shift_layers and cfg.shift_every >= 1 and i % cfg.shift_every == 0
            if shifted:
                inner_geom = PatchGeometry(g.h - g.p_h, g.w - g.p_w, g.channels, g.p_h, g.p_w)
                inner = MixerLayer(inner_geom.n_patches, inner_geom.patch_width, cfg, rng, dtype)
                self.layers.append(ShiftLayer(g, (cfg.shift_h, cfg.shift_w), inner))
            else:
                self.layers.append(MixerLayer(g.n_patches, g.patch_width, cfg, rng, dtype))
        self.base = StandardNormal(cfg.dim)
        self.assign_names()

    def forward(self, x):
        if tuple(x.shape[1:]) != self.geom.image_shape:
            raise ContractError(f"expected images {self.geom.image_shape}, got {x.shape[1:]}")
        x, total = _located("conv", self.conv.forward, x)
        x = patchify(x, self.geom).data
        for i, layer in enumerate(self.layers):
            x, ld = _located(f"layers.{i}", layer.forward, x)
            total = total + ld
        return x.reshape(x.shape[0], -1), total

    def inverse(self, z):
        g = self.geom
        z = z.reshape(z.shape[0], g.n_patches, g.patch_width)
        for i in reversed(range(len(self.layers))):
            z = _located(f"layers.{i}", self.layers[i].inverse, z)
        z = depatchify(MixerMatrix(z, g))
        return _located("conv", self.conv.inverse, z)

    # -- conveniences ---------------------------------------------------------------
    def actnorms(self) -> list[ActNorm]:
        return [m for _, m in self.named_modules() if isinstance(m, ActNorm)]

    @property
    def initialized(self) -> bool:
        return all(a.initialized for a in self.actnorms())

    def initialize(self, x: np.ndarray) -> None:
        """Data-dependent ActNorm initialisation from one batch."""
        set_data_init(self, True)
        try:
            with no_grad():
                self.forward(Tensor(np.asarray(x, dtype=self.dtype)))
        finally:
            set_data_init(self, False)

    def force_actnorm_identity(self) -> None:
        for a in self.actnorms():
            a.force_identity()

    def log_likelihood(self, x: Tensor) -> Tensor:
        z, ld = self.forward(x)
        return self.base.log_prob(z) + ld

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def build_model(cfg: MixerFlowConfig) -> FlowModel:
    cfg.validate()
    return FlowModel(cfg)


def model_log_likelihood(model: FlowModel, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``(nats, bpd)`` for a dequantised batch, without recording a graph."""
    with no_grad():
        lp = model.log_likelihood(Tensor(np.asarray(batch, dtype=model.dtype))).data
    return lp, bits_per_dim(lp, model.cfg.dim, model.cfg.dequant_levels)


# -- hybrid head --------------------------------------------------------------------------

def latents(model: FlowModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(x), batch_size):
                z, _ = model.forward(Tensor(np.asarray(x[i:i + batch_size], dtype=model.dtype)))
                out.append(z.data)
    finally:
        model.train(was)
    return np.concatenate(out)


class HybridHead(Module):
    """Affine classifier on standardised flow latents."""

    def __init__(self, dim: int, n_classes: int, dtype=np.float64):
        super().__init__()
        self.n_classes = n_classes
        rng = np.random.Generator(np.random.PCG64(0))
        self.linear = Dense(dim, n_classes, rng, dtype, zero_init=True)
        self.register_buffer("mean", np.zeros(dim, dtype=dtype))
        self.register_buffer("std", np.ones(dim, dtype=dtype))

    def fit_standardizer(self, z: np.ndarray) -> None:
        self._buffers["mean"][...] = z.mean(axis=0)
        self._buffers["std"][...] = np.maximum(z.std(axis=0), 1e-6)

    def logits(self, z: np.ndarray) -> Tensor:
        zs = (z - self._buffers["mean"]) / self._buffers["std"]
        return self.linear(Tensor(zs.astype(self.linear.weight.dtype)))

    def loss(self, z: np.ndarray, labels: np.ndarray) -> Tensor:
        return T.cross_entropy(self.logits(z), labels)

    def accuracy(self, z: np.ndarray, labels: np.ndarray) -> float:
        with no_grad():
            pred = self.logits(z).data.argmax(axis=1)
        return float(np.mean(pred == labels))


@dataclass
class HeadMetrics:
    initial_loss: float
    train_loss: float
    train_accuracy: float
    val_loss: float | None = None
    val_accuracy: float | None = None


def hybrid_train_head(model: FlowModel, images: np.ndarray, labels: np.ndarray,
                      n_classes: int = 10, epochs: int = 3, lr: float = 1e-3,
                      batch_size: int = 128, seed: int = 0,
                      val: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[HybridHead, HeadMetrics]:
    """Train a linear head on frozen-flow latents by cross-entropy."""
    labels = np.asarray(labels)
    if len(labels) != len(images):
        raise ContractError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"labels outside [0, {n_classes})")
    before = model.checksum()
    z = latents(model, images)
    head = HybridHead(z.shape[1], n_classes, model.dtype)
    head.fit_standardizer(z)
    with no_grad():
        initial = float(head.loss(z, labels).data)
    opt = Adam(head.parameters(), lr=lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    for _ in range(epochs):
        order = rng.permutation(len(z))
        for i in range(0, len(z), batch_size):
            idx = order[i:i + batch_size]
            loss = head.loss(z[idx], labels[idx])
            T.backward(loss, head.parameters())
            opt.step()
    with no_grad():
        metrics = HeadMetrics(initial, float(head.loss(z, labels).data), head.accuracy(z, labels))
        if val is not None:
            zv = latents(model, val[0])
            metrics.val_loss = float(head.loss(zv, val[1]).data)
            metrics.val_accuracy = head.accuracy(zv, np.asarray(val[1]))
    if model.checksum() != before:
        raise RuntimeError("flow parameters changed while training the head")
    return head, metrics


def parameter_checksum(params: Iterable) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
