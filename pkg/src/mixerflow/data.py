"""Dataset decoding, dequantisation, batching and pixel-shuffle corruptions."""
from __future__ import annotations

import gzip
import queue
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, FormatError
from .layers import PatchGeometry
from .pnm import read_pnm

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3


@dataclass
class ImageBatch:
    """Images ``[b, ch, h, w]``: uint8 at ingest, floats in [0, 1) once dequantised."""

    pixels: np.ndarray
    labels: np.ndarray | None = None
    dequantized: bool = False

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ContractError(f"pixels must be [b, ch, h, w], got {self.pixels.shape}")
        if self.labels is not None and len(self.labels) != len(self.pixels):
            raise ContractError("labels and pixels differ in length")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def subset(self, idx) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[idx]
        return ImageBatch(self.pixels[idx], labels, self.dequantized)


# -- MNIST -------------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / name
        if p.exists():
            return p
    return None


def decode_idx_images(data: bytes, path=None) -> np.ndarray:
    if len(data) < 16:
        raise FormatError("IDX image header truncated", len(data), path)
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", 0, path)
    need = n * rows * cols
    if len(data) - 16 < need:
        raise FormatError(f"IDX images truncated: need {need} pixel bytes", len(data), path)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=16).reshape(n, 1, rows, cols)


def decode_idx_labels(data: bytes, path=None) -> np.ndarray:
    if len(data) < 8:
        raise FormatError("IDX label header truncated", len(data), path)
    magic, n = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}", 0, path)
    if len(data) - 8 < n:
        raise FormatError(f"IDX labels truncated: need {n} bytes", len(data), path)
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def encode_idx_images(images: np.ndarray) -> bytes:
    n, rows, cols = images.shape[0], images.shape[-2], images.shape[-1]
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.astype(np.uint8).tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, np.uint8).tobytes()


def load_mnist(directory, split: str = "train", val_seed: int = 0) -> ImageBatch:
    """Decode the IDX files in ``directory``.

    ``split`` is ``train``, ``val`` or ``test``. ``val``/``test`` read the
    ``t10k`` files when present; otherwise a seeded 10% of the training file.
    """
    d = Path(directory)
    train_img = _find(d, "train-images-idx3-ubyte")
    test_img = _find(d, "t10k-images-idx3-ubyte")

    def read(stem_img, stem_lbl):
        img_path = _find(d, stem_img)
        x = decode_idx_images(_read_bytes(img_path), str(img_path))
        lbl_path = _find(d, stem_lbl)
        y = decode_idx_labels(_read_bytes(lbl_path), str(lbl_path)) if lbl_path else None
        if y is not None and len(y) != len(x):
            raise FormatError(f"{len(y)} labels for {len(x)} images", None, str(lbl_path))
        return ImageBatch(x, y)

    if split == "train" or (split in ("val", "test") and test_img is None):
        if train_img is None:
            raise FileNotFoundError(f"no MNIST training images under {d}")
        full = read("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
        if test_img is not None:
            return full
        tr, va = split_indices(len(full), val_seed)
        return full.subset(tr if split == "train" else va)
    if split in ("val", "test"):
        return read("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    raise ContractError(f"unknown split {split!r}")


# -- CIFAR-10 ----------------------------------------------------------------------------

def decode_cifar10(data: bytes, path=None) -> ImageBatch:
    if len(data) % CIFAR_RECORD:
        raise FormatError(f"size {len(data)} is not a multiple of {CIFAR_RECORD}",
                          len(data) - len(data) % CIFAR_RECORD, path)
    recs = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside 0..9", int(bad[0]) * CIFAR_RECORD, path)
    return ImageBatch(recs[:, 1:].reshape(-1, 3, 32, 32).copy(), labels)


def load_cifar10(directory, split: str = "train") -> ImageBatch:
    d = Path(directory)
    if split == "train":
        files = sorted(d.glob("data_batch_*.bin"))
    elif split in ("val", "test"):
        files = [d / "test_batch.bin"]
    else:
        raise ContractError(f"unknown split {split!r}")
    files = [f for f in files if f.exists()]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches under {d}")
    parts = [decode_cifar10(f.read_bytes(), str(f)) for f in files]
    return ImageBatch(np.concatenate([p.pixels for p in parts]),
                      np.concatenate([p.labels for p in parts]))


# -- raw image directories -------------------------------------------------------------------

def area_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``i`` averages the source interval ``[i, i+1) * n_in / n_out`` (box filter)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / scale


def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Center-crop to a square, box-filter to ``size``, truncate to integers."""
    ch, h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = img[:, top:top + s, left:left + s].astype(np.float64)
    a = area_resize_matrix(s, size)
    out = np.einsum("ij,cjk,lk->cil", a, crop, a)
    return np.floor(out + 1e-9).clip(0, 255).astype(np.uint8)


def load_image_dir(directory, target_resolution: int, split: str | None = None,
                   val_seed: int = 0) -> ImageBatch:
    """Decode every ``*.pgm``/``*.ppm`` in ``directory`` (sorted by name)."""
    d = Path(directory)
    paths = sorted(p for p in d.iterdir() if p.is_file())
    if not paths:
        raise FileNotFoundError(f"no images under {d}")
    imgs = []
    for p in paths:
        if p.suffix.lower() not in (".pgm", ".ppm", ".pnm"):
            raise FormatError(f"unsupported image format {p.suffix!r}", None, str(p))
        imgs.append(center_crop_resize(read_pnm(p), target_resolution))
    if len({im.shape[0] for im in imgs}) > 1:
        raise FormatError("mixed grayscale and colour images", None, str(d))
    batch = ImageBatch(np.stack(imgs))
    if split is None:
        return batch
    tr, va = split_indices(len(batch), val_seed)
    return batch.subset(tr if split == "train" else va)


def split_indices(n: int, seed: int = 0, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 90/10 partition of ``range(n)``."""
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# -- dequantisation and batching ----------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def dequantize(batch: ImageBatch, levels: int = 256, seed=0, dtype=np.float64) -> ImageBatch:
    """``y = (x + u) / levels`` with ``u ~ U[0, 1)``; strictly inside ``[0, 1)``.

    ``seed`` may be an int or a sequence such as ``(run_seed, step)``.
    """
    if batch.dequantized:
        raise ContractError("batch is already dequantised")
    x = batch.pixels
    if x.min(initial=0) < 0 or x.max(initial=0) > levels - 1:
        raise ContractError(f"pixels outside [0, {levels - 1}]")
    u = _rng(seed).random(x.shape)
    y = ((x.astype(np.float64) + u) / levels).astype(dtype)
    y = np.minimum(y, np.nextafter(dtype(1), dtype(0)))
    return ImageBatch(y, batch.labels, True)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return _rng((seed, epoch)).permutation(n)


def minibatch_indices(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches; each epoch uses a fresh seeded order."""
    if n < 1:
        raise ContractError("empty dataset")
    epoch, buf = 0, np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, epoch_order(n, seed, epoch)])
            epoch += 1
        yield buf[:batch_size]
        buf = buf[batch_size:]


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Produce ``items`` on a worker thread; each item is delivered at most once."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def work():
        try:
            for item in items:
                if stop.is_set():
                    return
                q.put(item)
        finally:
            q.put(done)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            yield item
    finally:
        stop.set()


# -- shuffles -------------------------------------------------------------------------------------

@dataclass
class ShuffleSpec:
    """A fixed pixel permutation applied identically to every image.

    ``out.flat[i] = in.flat[permutation[i]]`` over the ``[ch, h, w]`` layout.
    """

    kind: str
    seed: int
    image_shape: tuple[int, int, int]
    geometry: PatchGeometry | None = None
    permutation: np.ndarray = field(default=None, repr=False)

    @classmethod
    def identity(cls, image_shape) -> "ShuffleSpec":
        return cls("identity", 0, tuple(image_shape), None, np.arange(int(np.prod(image_shape))))

    @classmethod
    def global_(cls, image_shape, seed: int) -> "ShuffleSpec":
        d = int(np.prod(image_shape))
        return cls("global", seed, tuple(image_shape), None, _rng(seed).permutation(d))

    @classmethod
    def local(cls, geometry: PatchGeometry, seed: int) -> "ShuffleSpec":
        """Shared within-patch slot permutation composed with a patch reordering."""
        rng = _rng(seed)
        slot_perm = rng.permutation(geometry.patch_width)
        patch_perm = rng.permutation(geometry.n_patches)
        idx = geometry.index_map().reshape(geometry.n_patches, geometry.patch_width)
        perm = np.empty(geometry.dim, dtype=np.int64)
        perm[idx] = idx[patch_perm][:, slot_perm]
        return cls("local", seed, geometry.image_shape, geometry, perm)

    @classmethod
    def build(cls, kind: str, image_shape, seed: int, patch: tuple[int, int] | None = None):
        if kind == "global":
            return cls.global_(image_shape, seed)
        if kind == "local":
            if patch is None:
                raise ContractError("local shuffling needs a patch size")
            ch, h, w = image_shape
            return cls.local(PatchGeometry(h, w, ch, *patch), seed)
        raise ContractError(f"unknown shuffle kind {kind!r}")


def apply_shuffle(batch: ImageBatch, spec: ShuffleSpec, inverse: bool = False) -> ImageBatch:
    if batch.image_shape != spec.image_shape:
        raise ContractError(f"shuffle built for {spec.image_shape}, batch is {batch.image_shape}")
    perm = np.argsort(spec.permutation) if inverse else spec.permutation
    flat = batch.pixels.reshape(len(batch), -1)
    return replace(batch, pixels=flat[:, perm].reshape(batch.pixels.shape))


def inverse_shuffle(batch: ImageBatch, spec: ShuffleSpec) -> ImageBatch:
    return apply_shuffle(batch, spec, inverse=True)
