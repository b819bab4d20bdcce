"""Model, dataset and metrics files.

A model is a JSON manifest plus a flat blob of little-endian float32 tensors
stored row-major at the offsets the manifest declares. A dataset is a
directory with ``manifest.json`` and one float32 blob per split, images
channels-first with values in [0, 1].
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .convert import AnnModel
from .netcore import LayerSpec, SpikingNetwork, StructureError, SurrogateConfig

MODEL_FORMAT = "spikeadapt-model"
DATASET_FORMAT = "spikeadapt-dataset"
VERSION = 1
DTYPE = np.dtype("<f4")
TENSOR_FIELDS = ("weight", "bias", "gamma", "beta", "mean", "std")


class FormatError(ValueError):
    code = "format error"

    def __str__(self):
        return f"{self.code}: {super().__str__()}"


class UnsupportedVersionError(FormatError):
    code = "unsupported version"


class TruncatedBlobError(FormatError):
    code = "truncated blob"


class ShapeMismatchError(FormatError):
    code = "shape inconsistency"


def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_model(model: SpikingNetwork | AnnModel, path) -> Path:
    """Write ``path`` (manifest) and its sibling ``.bin`` blob."""
    path = Path(path)
    chunks, layers, offset = [], [], 0
    for layer in model.layers:
        entry = {"kind": layer.kind, "stride": layer.stride, "padding": layer.padding}
        if layer.kind in ("dense", "conv2d"):
            entry.update(v_th=layer.v_th, alpha=layer.alpha, alpha_init=layer.alpha_init, a_max=layer.a_max)
        tensors = {}
        for name in TENSOR_FIELDS:
            value = getattr(layer, name)
            if value is None:
                continue
            raw = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
            tensors[name] = {"offset": offset, "shape": list(np.shape(value))}
            chunks.append(raw)
            offset += len(raw)
        entry["tensors"] = tensors
        layers.append(entry)
    manifest = {
        "format": MODEL_FORMAT,
        "version": VERSION,
        "kind": "snn" if isinstance(model, SpikingNetwork) else "ann",
        "input_shape": list(model.input_shape),
        "blob": _blob_path(path).name,
        "blob_bytes": offset,
        "layers": layers,
    }
    if isinstance(model, SpikingNetwork):
        s = model.surrogate
        manifest["surrogate"] = {"shape": s.shape, "width": s.width}
        manifest["calibration"] = model.calibration
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(_blob_path(path), b"".join(chunks))
    _write_atomic(path, json.dumps(manifest, indent=1).encode())
    return path


def _read_manifest(path: Path, fmt: str) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != fmt:
        raise FormatError(f"{path} is not a {fmt} manifest")
    if "version" not in manifest:
        raise FormatError("manifest has no version field")
    if manifest["version"] != VERSION:
        raise UnsupportedVersionError(f"version {manifest['version']!r}, expected {VERSION}")
    return manifest


def load_model(path) -> SpikingNetwork | AnnModel:
    path = Path(path)
    manifest = _read_manifest(path, MODEL_FORMAT)
    blob = (path.parent / manifest["blob"]).read_bytes()
    if len(blob) < manifest["blob_bytes"]:
        raise TruncatedBlobError(f"blob has {len(blob)} bytes, manifest declares {manifest['blob_bytes']}")
    if len(blob) > manifest["blob_bytes"]:
        raise ShapeMismatchError(f"blob has {len(blob)} bytes, manifest declares {manifest['blob_bytes']}")
    layers = []
    for entry in manifest["layers"]:
        kwargs = {}
        for name, meta in entry["tensors"].items():
            shape = tuple(meta["shape"])
            nbytes = int(np.prod(shape)) * DTYPE.itemsize
            start = meta["offset"]
            if start < 0 or start + nbytes > len(blob):
                raise ShapeMismatchError(f"tensor {name} at {start}+{nbytes} exceeds blob")
            arr = np.frombuffer(blob, dtype=DTYPE, count=int(np.prod(shape)), offset=start)
            kwargs[name] = arr.reshape(shape).astype(np.float64)
        for key in ("v_th", "alpha", "alpha_init", "a_max"):
            if key in entry:
                kwargs[key] = entry[key]
        try:
            layers.append(LayerSpec(entry["kind"], stride=entry.get("stride", 1), padding=entry.get("padding", 0), **kwargs))
        except StructureError as exc:
            raise ShapeMismatchError(str(exc)) from exc
    try:
        if manifest["kind"] == "ann":
            return AnnModel(tuple(manifest["input_shape"]), layers)
        sur = manifest.get("surrogate") or {}
        return SpikingNetwork(
            tuple(manifest["input_shape"]),
            layers,
            SurrogateConfig(sur.get("shape", "triangular"), sur.get("width")),
            calibration=manifest.get("calibration"),
        )
    except StructureError as exc:
        raise ShapeMismatchError(str(exc)) from exc


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # (N, *shape) float64
    labels: np.ndarray | None
    n_classes: int
    annotations: list | None = None  # detection boxes per image: [class, x0, y0, x1, y1]

    def __len__(self):
        return len(self.images)

    def batches(self, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
        """Batches in index order, or in a seeded permutation; the last may be short."""
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], None if self.labels is None else self.labels[idx]

    def batch_indices(self, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        return [order[s : s + batch_size] for s in range(0, len(self), batch_size)]


def save_dataset(path, splits: dict[str, Dataset]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    manifest = {
        "format": DATASET_FORMAT,
        "version": VERSION,
        "shape": list(first.images.shape[1:]),
        "classes": first.n_classes,
        "splits": {},
    }
    for name, ds in splits.items():
        if list(ds.images.shape[1:]) != manifest["shape"]:
            raise ShapeMismatchError(f"split {name} has shape {ds.images.shape[1:]}")
        _write_atomic(path / f"{name}.bin", np.ascontiguousarray(ds.images, dtype=DTYPE).tobytes())
        manifest["splits"][name] = {
            "count": len(ds),
            "blob": f"{name}.bin",
            "labels": None if ds.labels is None else [int(v) for v in ds.labels],
            "annotations": ds.annotations,
        }
    _write_atomic(path / "manifest.json", json.dumps(manifest).encode())
    return path


def load_dataset(path, split: str = "test") -> Dataset:
    path = Path(path)
    manifest = _read_manifest(path / "manifest.json", DATASET_FORMAT)
    if split not in manifest["splits"]:
        raise FormatError(f"dataset has no split {split!r}")
    meta = manifest["splits"][split]
    shape = tuple(manifest["shape"])
    count = meta["count"]
    blob = (path / meta["blob"]).read_bytes()
    expect = count * int(np.prod(shape)) * DTYPE.itemsize
    if len(blob) < expect:
        raise TruncatedBlobError(f"split {split}: {len(blob)} bytes, expected {expect}")
    if len(blob) != expect:
        raise ShapeMismatchError(f"split {split}: {len(blob)} bytes, expected {expect}")
    images = np.frombuffer(blob, dtype=DTYPE).reshape((count,) + shape).astype(np.float64)
    labels = meta.get("labels")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (count,):
            raise ShapeMismatchError(f"split {split}: {labels.shape[0]} labels for {count} samples")
        if labels.size and (labels.min() < 0 or labels.max() >= manifest["classes"]):
            raise FormatError(f"split {split}: label out of range for {manifest['classes']} classes")
    return Dataset(images, labels, manifest["classes"], meta.get("annotations"))


# --------------------------------------------------------------------------
# metrics


METRIC_FIELDS = ("batch", "entropy", "accuracy", "firing_rates", "alphas", "synops", "wall_ms")


class MetricsWriter:
    """One record per adapted batch, as json-lines or csv."""

    def __init__(self, path, fmt: str = "jsonl"):
        if fmt not in ("jsonl", "csv"):
            raise ValueError("metrics format must be jsonl or csv")
        self.path = Path(path)
        self.fmt = fmt
        self.records: list[dict] = []

    def add(self, record: dict) -> None:
        if self.records and record["batch"] <= self.records[-1]["batch"]:
            raise ValueError("batch index must increase")
        self.records.append(record)

    def close(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.fmt == "jsonl":
            text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)
            _write_atomic(self.path, text.encode())
            return
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            keys = list(self.records[0]) if self.records else list(METRIC_FIELDS)
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
        os.replace(tmp, self.path)


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out = []
        for row in rows:
            out.append({k: json.loads(v) if v not in ("",) else None for k, v in row.items()})
        return out
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
