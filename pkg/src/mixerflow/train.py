"""Maximum-likelihood training, evaluation and sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (ImageBatch, ShuffleSpec, apply_shuffle, dequantize, load_cifar10,
                   load_image_dir, load_mnist, minibatch_indices)
from .errors import ContractError, NumericError
from .flows import bits_per_dim, sample
from .model import FlowModel, build_model
from .optim import Adam, clip_grad_norm, cosine_lr
from .pnm import make_grid, write_pnm
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    train: ImageBatch
    val: ImageBatch


def load_dataset(run: RunConfig, data_dir: str | None = None) -> Dataset:
    d = data_dir or run.data_dir
    if run.dataset == "mnist":
        ds = Dataset(load_mnist(d, "train"), load_mnist(d, "val"))
    elif run.dataset == "cifar10":
        ds = Dataset(load_cifar10(d, "train"), load_cifar10(d, "val"))
    elif run.dataset == "imagedir":
        ds = Dataset(load_image_dir(d, run.resolution, "train"), load_image_dir(d, run.resolution, "val"))
    else:
        raise ContractError(f"unknown dataset {run.dataset!r}")
    return corrupt(ds, run)


def corrupt(ds: Dataset, run: RunConfig) -> Dataset:
    """Apply the configured pixel shuffle to both splits."""
    if run.shuffle == "none":
        return ds
    m = run.model
    spec = ShuffleSpec.build(run.shuffle, ds.train.image_shape, run.shuffle_seed, (m.p_h, m.p_w))
    return Dataset(apply_shuffle(ds.train, spec), apply_shuffle(ds.val, spec))


def check_geometry(model: FlowModel, batch: ImageBatch) -> None:
    if batch.image_shape != model.geom.image_shape:
        raise ContractError(f"data images {batch.image_shape} do not match model {model.geom.image_shape}")


def as_model_input(batch: ImageBatch, model: FlowModel, seed) -> np.ndarray:
    if batch.dequantized:
        return batch.pixels.astype(model.dtype, copy=False)
    return dequantize(batch, model.cfg.dequant_levels, seed, model.dtype).pixels


def evaluate_model(model: FlowModel, data: ImageBatch, seed: int = 1234,
                   batch_size: int = 256) -> tuple[float, float]:
    """Mean bpd and its standard error over ``data``, with fixed dequantisation noise."""
    check_geometry(model, data)
    was = model.training
    model.eval()
    bpds = []
    try:
        for i in range(0, len(data), batch_size):
            chunk = data.subset(slice(i, i + batch_size))
            x = as_model_input(chunk, model, (seed, i))
            with no_grad():
                lp = model.log_likelihood(Tensor(x)).data
            bpds.append(bits_per_dim(lp, model.cfg.dim, model.cfg.dequant_levels))
    finally:
        model.train(was)
    b = np.concatenate(bpds).astype(np.float64)
    stderr = float(b.std(ddof=1) / math.sqrt(len(b))) if len(b) > 1 else 0.0
    return float(b.mean()), stderr


@dataclass
class TrainResult:
    model: FlowModel
    optimizer: Adam
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    val_history: list[tuple[int, float, float]] = field(default_factory=list)
    out_dir: Path | None = None


def _fmt(v: float) -> str:
    return repr(float(v))


def train(run: RunConfig, data: Dataset | None = None) -> TrainResult:
    """Minimise mean NLL (nats) with Adam, cosine decay and global-norm clipping.

    The first minibatch initialises every ActNorm before the first update.
    Writes ``metrics.log``/``val.log`` and checkpoints under ``run.out_dir``.
    """
    run.validate()
    data = data if data is not None else load_dataset(run)
    model = build_model(run.model)
    check_geometry(model, data.train)
    params = model.parameters()
    opt = Adam(params, run.lr, run.beta1, run.beta2, run.eps)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text(), encoding="utf-8")
    metrics = open(out / "metrics.log", "w", encoding="utf-8")
    val_log = open(out / "val.log", "w", encoding="utf-8")
    result = TrainResult(model, opt, out_dir=out)
    dim, levels = run.model.dim, run.model.dequant_levels

    def snapshot(step: int, where: Path) -> None:
        save_checkpoint(Checkpoint(run, step, model, opt, result.history), where)

    def validate(step: int) -> None:
        mean, se = evaluate_model(model, data.val, run.eval_seed)
        result.val_history.append((step, mean, se))
        val_log.write(f"step={step} val_bpd={_fmt(mean)} stderr={_fmt(se)}\n")
        val_log.flush()
        log.info("step %d val bpd %.4f +- %.4f", step, mean, se)

    batches = minibatch_indices(len(data.train), run.batch_size, run.seed)
    first = next(batches)
    model.initialize(as_model_input(data.train.subset(first), model, (run.seed, 0)))
    idx = first
    acc_nll, acc_n = 0.0, 0
    step = 0
    try:
        for step in range(run.steps):
            if step > 0:
                idx = next(batches)
            x = as_model_input(data.train.subset(idx), model, (run.seed, step))
            model.train()
            nll = -model.log_likelihood(Tensor(x)).mean()
            T.backward(nll, params)
            clip_grad_norm(params, run.grad_clip)
            lr = cosine_lr(step, run.steps, run.lr, run.min_lr)
            opt.step(lr)
            acc_nll += float(nll.data)
            acc_n += 1
            if (step + 1) % run.log_every == 0 or step + 1 == run.steps:
                mean_nll = acc_nll / acc_n
                bpd = float(bits_per_dim(-mean_nll, dim, levels))
                result.history.append((step + 1, lr, mean_nll, bpd))
                metrics.write(f"step={step + 1} lr={_fmt(lr)} nll={_fmt(mean_nll)} bpd={_fmt(bpd)}\n")
                metrics.flush()
                acc_nll, acc_n = 0.0, 0
            if run.eval_every and (step + 1) % run.eval_every == 0 and step + 1 < run.steps:
                validate(step + 1)
            if run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
                snapshot(step + 1, out / "checkpoint")
    except NumericError as err:
        snapshot(step, out / "failed")
        metrics.close()
        val_log.close()
        raise NumericError(f"training diverged at step {step}: {err}", err.where) from err
    done = run.steps
    validate(done)
    metrics.close()
    val_log.close()
    snapshot(done, out / "checkpoint")
    return result


def evaluate(checkpoint_dir, data_dir: str | None = None, split: str = "val",
             seed: int | None = None, data: ImageBatch | None = None) -> tuple[float, float]:
    ck = load_checkpoint(checkpoint_dir)
    if data is None:
        ds = load_dataset(ck.run, data_dir)
        data = ds.train if split == "train" else ds.val
    return evaluate_model(ck.model, data, ck.run.eval_seed if seed is None else seed)


def quantize_samples(x: np.ndarray, levels: int = 256) -> np.ndarray:
    """Clamp to [0, 1) and map to integer pixel levels."""
    q = np.floor(np.clip(x, 0.0, 1.0) * levels)
    return np.clip(q, 0, levels - 1).astype(np.uint8)


def sample_images(model: FlowModel, n: int, seed: int) -> np.ndarray:
    model.eval()
    x = sample(model, model.base, n, seed, dtype=model.dtype)
    return quantize_samples(x, model.cfg.dequant_levels)


def sample_cmd(checkpoint_dir, n: int, seed: int, out_dir) -> list[Path]:
    """Write ``n`` samples as P5/P6 files plus ``grid`` image; returns the paths."""
    ck = load_checkpoint(checkpoint_dir)
    imgs = sample_images(ck.model, n, seed)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create {out}: {err}") from err
    ext = "pgm" if imgs.shape[1] == 1 else "ppm"
    paths = []
    for i, img in enumerate(imgs):
        p = out / f"sample_{i:04d}.{ext}"
        write_pnm(p, img)
        paths.append(p)
    grid = out / f"grid.{ext}"
    write_pnm(grid, make_grid(imgs))
    paths.append(grid)
    return paths


def read_metric_log(path) -> list[dict[str, float]]:
    """Parse ``key=value`` lines of ``metrics.log`` / ``val.log``."""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append({k: float(v) for k, v in (item.split("=", 1) for item in line.split())})
    return rows


def completed_run(run: RunConfig) -> Checkpoint | None:
    """The final checkpoint of an earlier run with exactly this config, if one exists."""
    out = Path(run.out_dir)
    cfg, ck = out / "config.txt", out / "checkpoint" / "manifest.txt"
    if not (cfg.exists() and ck.exists()) or cfg.read_text(encoding="utf-8") != run.to_text():
        return None
    loaded = load_checkpoint(out / "checkpoint")
    return loaded if loaded.step == run.steps else None


def train_or_reuse(run: RunConfig, data: Dataset | None = None) -> Checkpoint:
    """Train unless ``run.out_dir`` already holds a finished run of the same config."""
    done = completed_run(run)
    if done is not None:
        log.info("reusing finished run in %s", run.out_dir)
        return done
    train(run, data)
    return load_checkpoint(Path(run.out_dir) / "checkpoint")
