"""Checkpoint directories: ``manifest.txt``, ``index.txt`` and ``blobs.bin``.

The manifest holds ``key = value`` lines (format version, step, the full run
config, optimizer scalars, metric history). The index lists one tensor per
line as ``name shape precision offset`` and the blob file holds the raw
little-endian bytes back to back, in index order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, format_value, parse_kv
from .errors import FormatError
from .model import FlowModel, build_model
from .optim import Adam

FORMAT_VERSION = 1
_PRECISIONS = {"double": "<f8", "single": "<f4", "int64": "<i8"}
_BY_DTYPE = {np.dtype("float64"): "double", np.dtype("float32"): "single", np.dtype("int64"): "int64"}


@dataclass
class Checkpoint:
    run: RunConfig
    step: int
    model: FlowModel
    optimizer: Adam | None = None
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def _history_text(history) -> str:
    return ";".join(f"{s}:{format_value(lr)}:{format_value(n)}:{format_value(b)}"
                    for s, lr, n, b in history)


def _parse_history(text: str):
    out = []
    for item in filter(None, text.split(";")):
        s, lr, n, b = item.split(":")
        out.append((int(s), float(lr), float(n), float(b)))
    return out


def _tensors(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param.{n}", p.data) for n, p in ck.model.named_parameters()]
    out += [(f"buffer.{n}", b) for n, b in ck.model.named_buffers()]
    if ck.optimizer is not None:
        names = [n for n, _ in ck.model.named_parameters()]
        out += [(f"adam_m.{n}", m) for n, m in zip(names, ck.optimizer.m)]
        out += [(f"adam_v.{n}", v) for n, v in zip(names, ck.optimizer.v)]
    return out


def save_checkpoint(ck: Checkpoint, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = [("format_version", FORMAT_VERSION), ("step", ck.step), ("seed", ck.run.seed)]
    manifest += [(f"config.{k}", v) for k, v in ck.run.to_items()]
    if ck.optimizer is not None:
        manifest += [("optimizer.step_count", ck.optimizer.step_count)]
    manifest += [("history", _history_text(ck.history))]
    index, blobs, offset = [], [], 0
    for name, arr in _tensors(ck):
        prec = _BY_DTYPE[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=_PRECISIONS[prec]).tobytes()
        shape = "x".join(map(str, arr.shape)) or "scalar"
        index.append(f"{name} {shape} {prec} {offset}\n")
        blobs.append(raw)
        offset += len(raw)
    (d / "manifest.txt").write_text("".join(f"{k} = {format_value(v)}\n" for k, v in manifest),
                                    encoding="utf-8")
    (d / "index.txt").write_text("".join(index), encoding="utf-8")
    (d / "blobs.bin").write_bytes(b"".join(blobs))
    return d


def load_checkpoint(directory: str | os.PathLike) -> Checkpoint:
    d = Path(directory)
    try:
        manifest = parse_kv((d / "manifest.txt").read_text(encoding="utf-8"), str(d / "manifest.txt"))
        index_lines = (d / "index.txt").read_text(encoding="utf-8").splitlines()
        blob = (d / "blobs.bin").read_bytes()
    except FileNotFoundError as err:
        raise FormatError(f"incomplete checkpoint: {err.filename}", None, str(d)) from err
    if int(manifest.get("format_version", -1)) != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('format_version')}", None, str(d))
    run = RunConfig.from_items({k[7:]: v for k, v in manifest.items() if k.startswith("config.")})
    model = build_model(run.model)
    opt = None
    if "optimizer.step_count" in manifest:
        opt = Adam(model.parameters(), run.lr, run.beta1, run.beta2, run.eps)
        opt.step_count = int(manifest["optimizer.step_count"])
    ck = Checkpoint(run, int(manifest["step"]), model, opt, _parse_history(manifest.get("history", "")))

    targets = dict(_tensors(ck))
    seen = set()
    for line in index_lines:
        name, shape, prec, off = line.split()
        if name not in targets:
            raise FormatError(f"checkpoint tensor {name} has no slot in the model", None, str(d))
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        dt = np.dtype(_PRECISIONS[prec])
        n = int(np.prod(dims)) * dt.itemsize
        start = int(off)
        if start + n > len(blob):
            raise FormatError(f"blob for {name} truncated", start, str(d / "blobs.bin"))
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=start).reshape(dims)
        dest = targets[name]
        if dest.shape != arr.shape or dest.dtype != arr.dtype.newbyteorder("="):
            raise FormatError(f"{name}: stored {arr.shape}/{prec}, model expects {dest.shape}/{dest.dtype}",
                              None, str(d))
        dest[...] = arr
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise FormatError(f"checkpoint lacks {sorted(missing)[:3]}...", None, str(d))
    return ck
