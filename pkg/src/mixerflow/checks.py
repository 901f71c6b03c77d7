"""Verification suites behind the ``check`` command.

Each check yields a :class:`CheckResult`; the CLI prints them as
``CHECK <name> PASS|FAIL <worst-value>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .data import (ImageBatch, ShuffleSpec, apply_shuffle, decode_cifar10, decode_idx_images,
                   decode_idx_labels, dequantize, encode_idx_images, encode_idx_labels,
                   inverse_shuffle)
from .flows import Bijection, verify_bijection
from .gradcheck import check_gradients
from .layers import (ActNorm, AffineCoupling, Conv1x1, LinearBlock, Patchify, PatchGeometry,
                     ShiftLayer, TransposeMixer)
from .made import MafLayer
from .model import FlowModel, MixerFlowConfig, MixerLayer, build_model
from .nn import FeatureNorm, Module
from .tensor import Tensor, no_grad

ROUND_TRIP_TOL = 1e-8
LOG_DET_TOL = 1e-6
PROBE_DIMS = (8, 16, 48)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float

    def line(self) -> str:
        return f"CHECK {self.name} {'PASS' if self.passed else 'FAIL'} {self.worst:.3e}"


def perturb(module: Module, scale: float, seed: int) -> Module:
    """Move every parameter (and norm statistic) off its initial value."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for _, m in module.named_modules():
        if isinstance(m, ActNorm) and not m.initialized:
            m.force_identity()
        if isinstance(m, FeatureNorm):
            m.buffer("running_mean")[...] = rng.normal(0, 0.1, m.buffer("running_mean").shape)
            m.buffer("running_var")[...] = rng.uniform(0.5, 1.5, m.buffer("running_var").shape)
    for p in module.parameters():
        p.data += scale * rng.standard_normal(p.shape).astype(p.dtype)
    return module


class LogDetOffset(Bijection):
    """Fault-injection wrapper: reports ``log_det + offset``."""

    def __init__(self, inner: Bijection, offset: float):
        super().__init__()
        self.inner = inner
        self.offset = offset

    def forward(self, x):
        z, ld = self.inner.forward(x)
        return z, ld + self.offset

    def inverse(self, z):
        return self.inner.inverse(z)


# -- layer zoo -------------------------------------------------------------------------------

_IMAGE_SHAPES = {8: (2, 2, 2), 16: (1, 4, 4), 48: (3, 4, 4)}
_ROW_SHAPES = {8: (2, 4), 16: (4, 4), 48: (4, 12)}
_PATCH = {8: (2, 1), 16: (2, 2), 48: (2, 2)}
_SHIFT = {8: ((1, 2, 4), (1, 2), (0, 1)), 16: ((1, 4, 4), (2, 2), (1, 1)),
          48: ((3, 4, 4), (2, 2), (1, 1))}


def _tiny_cfg(**kw) -> MixerFlowConfig:
    base = dict(h=4, w=4, channels=1, p_h=2, p_w=2, n_layers=2, flows_per_stage=1,
                hidden_dim=8, enable_shift_layers=False)
    base.update(kw)
    return MixerFlowConfig(**base)


def layer_zoo(dim: int, seed: int = 0) -> Iterator[tuple[str, Bijection, tuple[int, ...]]]:
    """Every layer type at total dimension ``dim``, randomly parameterised, with its probe shape."""
    rng = np.random.Generator(np.random.PCG64(seed))
    img = _IMAGE_SHAPES[dim]
    rows = _ROW_SHAPES[dim]
    n, k = rows
    ph, pw = _PATCH[dim]
    yield "conv1x1", perturb(Conv1x1(img[0]), 0.3, seed), img
    yield "patchify", Patchify(PatchGeometry(img[1], img[2], img[0], ph, pw)), img
    yield "transpose", TransposeMixer(), rows
    yield "linear_lu", perturb(LinearBlock(k, "LU"), 0.3, seed + 1), rows
    yield "linear_rlu", perturb(LinearBlock(k, "RLU"), 0.3, seed + 2), rows
    for law in ("exp", "bounded"):
        cp = AffineCoupling(k, 16, rng, scale_law=law)
        yield f"coupling_{law}", perturb(cp, 0.3, seed + 3), rows
    yield "actnorm", perturb(ActNorm(rows), 0.3, seed + 4), rows
    shape, patch, shift = _SHIFT[dim]
    geom = PatchGeometry(shape[1], shape[2], shape[0], *patch)
    inner_geom = PatchGeometry(geom.h - geom.p_h, geom.w - geom.p_w, geom.channels, *patch)
    cfg = _tiny_cfg(h=shape[1], w=shape[2], channels=shape[0], p_h=patch[0], p_w=patch[1])
    inner = MixerLayer(inner_geom.n_patches, inner_geom.patch_width, cfg, rng, np.float64)
    shifted = ShiftLayer(geom, shift, perturb(inner, 0.2, seed + 5))
    yield "shift_mixer", shifted, (geom.n_patches, geom.patch_width)
    yield "maf", perturb(MafLayer(k, [16], rng), 0.3, seed + 6), rows


def layer_checks(n_probes: int = 20, fault: float = 0.0, seed: int = 0) -> list[CheckResult]:
    out = []
    for dim in PROBE_DIMS:
        for name, layer, shape in layer_zoo(dim, seed):
            if fault:
                layer = LogDetOffset(layer, fault)
            rep = verify_bijection(layer, shape, n_probes, ROUND_TRIP_TOL, LOG_DET_TOL, seed=seed)
            ld_worse = rep.log_det_error / LOG_DET_TOL >= rep.round_trip / ROUND_TRIP_TOL
            value = rep.log_det_error if ld_worse else rep.round_trip
            out.append(CheckResult(f"layer.{name}.D{dim}", rep.passed, value))
    return out


# -- model-level checks ------------------------------------------------------------------------

def identity_at_init(cfg: MixerFlowConfig, seed: int = 0) -> tuple[float, float]:
    """``(max |forward(x) - patchify(x)|, max |log_det|)`` for a fresh model with ActNorm at identity."""
    model = build_model(cfg)
    model.force_actnorm_identity()
    model.eval()
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.random((4, *cfg.geometry.image_shape))
    with no_grad():
        z, ld = model.forward(Tensor(x))
    expected = x.reshape(4, -1)[:, cfg.geometry.index_map()]
    return float(np.max(np.abs(z.data - expected))), float(np.max(np.abs(ld.data)))


def actnorm_init_stats(seed: int = 0, shape=(6, 5), batch: int = 256) -> tuple[float, float]:
    """Worst ``|mean|`` and ``|var - 1|`` after initialising on a mean-5, std-2 batch."""
    rng = np.random.Generator(np.random.PCG64(seed))
    x = 5.0 + 2.0 * rng.standard_normal((batch, *shape))
    an = ActNorm(shape)
    an.data_init = True
    with no_grad():
        y, _ = an.forward(Tensor(x))
    an.data_init = False
    return float(np.max(np.abs(y.data.mean(axis=0)))), float(np.max(np.abs(y.data.var(axis=0) - 1)))


def tiny_2d_config(**kw) -> MixerFlowConfig:
    base = dict(h=1, w=2, channels=1, p_h=1, p_w=2, n_layers=4, flows_per_stage=2,
                hidden_dim=32, enable_shift_layers=False, seed=0)
    base.update(kw)
    return MixerFlowConfig(**base)


def quadrature_mass(model: FlowModel, lo: float = -8.0, hi: float = 8.0, step: float = 0.05) -> float:
    """Trapezoidal integral of ``p_X`` over ``[lo, hi]^2`` for a model on 1x2 images."""
    if model.cfg.dim != 2:
        raise ValueError("quadrature check needs a 2-dimensional model")
    n = int(round((hi - lo) / step)) + 1
    g = np.linspace(lo, hi, n)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1).reshape(-1, 1, 1, 2)
    model.eval()
    dens = []
    with no_grad():
        for i in range(0, len(pts), 8192):
            dens.append(np.exp(model.log_likelihood(Tensor(pts[i:i + 8192])).data))
    p = np.concatenate(dens).reshape(n, n)
    w = np.full(n, step)
    w[0] = w[-1] = step / 2
    return float(w @ p @ w)


def model_checks(seed: int = 0) -> list[CheckResult]:
    out = []
    for mode in ("LU",):
        err, ld = identity_at_init(_tiny_cfg(n_layers=4, flows_per_stage=2, enable_shift_layers=True,
                                             shift_every=2, linear_mode=mode), seed)
        out.append(CheckResult(f"model.identity_at_init.{mode}", err < 1e-10 and ld < 1e-10, max(err, ld)))
    m_err, v_err = actnorm_init_stats(seed)
    out.append(CheckResult("model.actnorm_init", m_err < 1e-5 and v_err < 1e-4, max(m_err, v_err)))
    for shape, patch in (((1, 4, 4), (2, 2)), ((3, 4, 4), (2, 2))):
        cfg = _tiny_cfg(h=shape[1], w=shape[2], channels=shape[0], p_h=patch[0], p_w=patch[1],
                        n_layers=2, shift_every=2, enable_shift_layers=True)
        model = perturb(build_model(cfg), 0.05, seed)
        rep = verify_bijection(model, shape, 5, ROUND_TRIP_TOL, LOG_DET_TOL, seed=seed)
        out.append(CheckResult(f"model.bijection.D{cfg.dim}", rep.passed,
                               max(rep.round_trip, rep.log_det_error)))
    model = build_model(tiny_2d_config(scale_law="bounded"))
    perturb(model, 0.05, seed)
    mass = quadrature_mass(model)
    out.append(CheckResult("model.normalization", abs(mass - 1) < 0.02, abs(mass - 1)))
    return out


def tiny_gradcheck_model(seed: int = 0) -> tuple[FlowModel, np.ndarray]:
    """Two mixer layers on 4x4x1 images, hidden 16, ActNorm initialised, parameters perturbed."""
    cfg = MixerFlowConfig(h=4, w=4, channels=1, p_h=2, p_w=2, n_layers=2, flows_per_stage=2,
                          hidden_dim=16, shift_every=2, seed=seed)
    model = build_model(cfg)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    x = rng.random((16, 1, 4, 4))
    model.initialize(x)
    perturb(model, 0.05, seed + 2)
    return model, x


def gradient_checks(seed: int = 0, n_samples: int = 200) -> list[CheckResult]:
    model, x = tiny_gradcheck_model(seed)
    rep = check_gradients(model, x, 1e-5, 1e-4, n_samples, seed)
    return [CheckResult("gradients.tiny_mixerflow", rep.passed, rep.max_rel_error)]


def data_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    imgs = rng.integers(0, 256, (100, 1, 8, 8), dtype=np.uint8)
    batch = ImageBatch(imgs)
    for kind in ("local", "global"):
        spec = ShuffleSpec.build(kind, (1, 8, 8), seed, (2, 2))
        back = inverse_shuffle(apply_shuffle(batch, spec), spec)
        bad = int(np.count_nonzero(back.pixels != imgs))
        out.append(CheckResult(f"data.shuffle_roundtrip.{kind}", bad == 0, float(bad)))
    raw = imgs[:5, 0]
    labels = rng.integers(0, 10, 5)
    dec = decode_idx_images(encode_idx_images(raw))
    dl = decode_idx_labels(encode_idx_labels(labels))
    bad = int(np.count_nonzero(dec[:, 0] != raw)) + int(np.count_nonzero(dl != labels))
    out.append(CheckResult("data.idx_roundtrip", bad == 0, float(bad)))
    rec = np.concatenate([labels[:, None], rng.integers(0, 256, (5, 3072))], axis=1).astype(np.uint8)
    cb = decode_cifar10(rec.tobytes())
    bad = int(np.count_nonzero(cb.pixels.reshape(5, -1) != rec[:, 1:]))
    out.append(CheckResult("data.cifar_decode", bad == 0, float(bad)))
    y = dequantize(batch, 256, seed).pixels
    lo = (imgs / 256.0)
    ok = bool(np.all(y >= lo) and np.all(y < lo + 1 / 256) and np.all(y < 1))
    out.append(CheckResult("data.dequantize_range", ok, float(np.max(y))))
    return out


SCOPES: dict[str, Callable[[], list[CheckResult]]] = {
    "layers": layer_checks,
    "model": model_checks,
    "gradients": gradient_checks,
    "data": data_checks,
}


def run_checks(scope: str = "all", fault: float = 0.0) -> list[CheckResult]:
    if scope == "all":
        results = []
        for name in SCOPES:
            results += layer_checks(fault=fault) if name == "layers" else SCOPES[name]()
        return results
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    return layer_checks(fault=fault) if scope == "layers" else SCOPES[scope]()
