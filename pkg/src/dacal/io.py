"""DACT tensor files and experiment manifests.

Tensor layout (little-endian)::

    b"DACT" | version u32 = 1 | dtype u32 | ndim u32 | ndim x u64 dims | payload

dtype 0 is float32 (features, logits, probabilities); dtype 1 is int32, used
for label vectors.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CalibrationDataset, as_labels
from .errors import ConfigError, DataError, FormatError, TruncatedFileError

MAGIC = b"DACT"
VERSION = 1
HEADER = struct.Struct("<4sIII")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype.kind in "iu":
        arr = arr.astype("<i4", copy=False)
    else:
        raise DataError(f"cannot encode dtype {arr.dtype}")
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise DataError("refusing to write non-finite entries")
    code = DTYPE_CODES[arr.dtype]
    head = HEADER.pack(MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TruncatedFileError(f"{source}: shorter than the {HEADER.size}-byte header")
    magic, version, code, ndim = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    off = HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TruncatedFileError(f"{source}: truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dtype = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.uint64)) * dtype.itemsize
    if len(buf) < off + nbytes:
        raise TruncatedFileError(f"{source}: payload has {len(buf) - off} of {nbytes} bytes")
    if len(buf) > off + nbytes:
        raise FormatError(f"{source}: {len(buf) - off - nbytes} trailing bytes")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    arr = arr.reshape(shape).astype(dtype.newbyteorder("="))
    if code == 0 and not np.isfinite(arr).all():
        raise DataError(f"{source}: contains NaN or Inf")
    return arr


def load_tensor(path) -> np.ndarray:
    """Read a DACT file. Float tensors come back as float32, labels as int32."""
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


def save_tensor(array, path) -> None:
    path = Path(path)
    data = encode_tensor(array)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_checksum(array) -> str:
    return hashlib.sha256(encode_tensor(array)).hexdigest()


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------- manifest

@dataclass
class SplitRecord:
    name: str
    logits: Path
    features: dict[str, Path]
    labels: Path | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class Manifest:
    """Experiment description: splits, layer order, and kNN settings.

    JSON shape::

        {"num_classes": 10, "layers": ["l1", "l2"],
         "k_per_layer": {"l1": 50, "l2": 50}, "subsample_fraction": 1.0,
         "seed": 0, "methods": ["ts", "ts+dac"],
         "splits": {"train": {"logits": "train/logits.dact",
                              "labels": "train/labels.dact",
                              "features": {"l1": "train/l1.dact", ...},
                              "severity": 0, "kind": "train"}, ...}}

    Relative paths resolve against the manifest's directory.
    """

    num_classes: int
    layers: list[str]
    splits: dict[str, SplitRecord]
    k_per_layer: dict[str, int]
    subsample_fraction: float = 1.0
    seed: int = 0
    methods: list[str] = field(default_factory=list)
    path: Path | None = None

    def split(self, name: str) -> SplitRecord:
        try:
            return self.splits[name]
        except KeyError:
            raise ConfigError(
                f"{self.path}: no split named {name!r} (have {sorted(self.splits)})"
            ) from None

    def load_split(self, name: str) -> CalibrationDataset:
        rec = self.split(name)
        feats = {}
        for layer in self.layers:
            if layer not in rec.features:
                raise ConfigError(f"{self.path}: split {name!r} lacks layer {layer!r}")
            feats[layer] = _load_existing(rec.features[layer], name, layer)
        logits = _load_existing(rec.logits, name, "logits")
        labels = None
        if rec.labels is not None:
            labels = as_labels(_load_existing(rec.labels, name, "labels"), self.num_classes)
        return CalibrationDataset(
            split_name=name,
            logits=logits,
            layers=feats,
            num_classes=self.num_classes,
            labels=labels,
            meta=dict(rec.meta),
        )

    def to_json(self) -> dict:
        base = self.path.parent if self.path else None

        def rel(p):
            p = Path(p)
            if base is not None:
                try:
                    return str(p.relative_to(base))
                except ValueError:
                    pass
            return str(p)

        splits = {}
        for name, rec in self.splits.items():
            entry = {
                "logits": rel(rec.logits),
                "features": {k: rel(v) for k, v in rec.features.items()},
            }
            if rec.labels is not None:
                entry["labels"] = rel(rec.labels)
            entry.update(rec.meta)
            splits[name] = entry
        return {
            "num_classes": self.num_classes,
            "layers": list(self.layers),
            "k_per_layer": dict(self.k_per_layer),
            "subsample_fraction": self.subsample_fraction,
            "seed": self.seed,
            "methods": list(self.methods),
            "splits": splits,
        }

    def save(self, path) -> None:
        self.path = Path(path)
        dump_json(self.to_json(), self.path)


def _load_existing(path: Path, split: str, what: str) -> np.ndarray:
    if not Path(path).exists():
        raise ConfigError(f"split {split!r}: {what} file not found: {path}")
    return load_tensor(path)


_SPLIT_KEYS = {"logits", "labels", "features"}


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    base = path.parent
    try:
        num_classes = int(doc["num_classes"])
        layers = list(doc.get("layers", []))
        raw_splits = doc["splits"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: missing required field {exc}") from None
    if len(set(layers)) != len(layers):
        raise ConfigError(f"{path}: duplicate layer names in {layers}")

    splits = {}
    for name, entry in raw_splits.items():
        if "logits" not in entry:
            raise ConfigError(f"{path}: split {name!r} has no logits path")
        feats = {k: base / v for k, v in entry.get("features", {}).items()}
        missing = [layer for layer in layers if layer not in feats]
        if missing:
            raise ConfigError(f"{path}: split {name!r} lacks layer file(s) {missing}")
        splits[name] = SplitRecord(
            name=name,
            logits=base / entry["logits"],
            features={layer: feats[layer] for layer in layers},
            labels=base / entry["labels"] if entry.get("labels") else None,
            meta={k: v for k, v in entry.items() if k not in _SPLIT_KEYS},
        )

    k_raw = doc.get("k_per_layer", doc.get("k", 50))
    if isinstance(k_raw, dict):
        k_per_layer = {layer: int(k_raw[layer]) for layer in layers}
    else:
        k_per_layer = {layer: int(k_raw) for layer in layers}

    return Manifest(
        num_classes=num_classes,
        layers=layers,
        splits=splits,
        k_per_layer=k_per_layer,
        subsample_fraction=float(doc.get("subsample_fraction", 1.0)),
        seed=int(doc.get("seed", 0)),
        methods=list(doc.get("methods", [])),
        path=path,
    )
