"""Exact kth-nearest-neighbour density proxies over normalized embeddings.

A query that coincides with a reference row contributes distance 0 to the
order statistics: self-matches are *not* excluded. Fit DAC on a split that is
disjoint from the index's reference split.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import kth_distance_kernel
from .core import CalibrationDataset, check_layer_order, l2_normalize_rows
from .errors import ConfigError, ShapeError
from .io import array_checksum, dump_json, load_tensor, save_tensor

logger = logging.getLogger(__name__)

# documented defaults: CIFAR10 / CIFAR100 on the full train set, ImageNet on 1%
DEFAULT_K = {"cifar10": 50, "cifar100": 200, "imagenet": 10}
NORM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class KnnIndex:
    layer_name: str
    reference: np.ndarray
    k: int
    subsample_fraction: float = 1.0
    seed: int = 0
    source_checksum: str = ""

    @property
    def size(self) -> int:
        return self.reference.shape[0]

    @property
    def dim(self) -> int:
        return self.reference.shape[1]

    def checksum(self) -> str:
        return array_checksum(self.reference)

    def sidecar(self) -> dict:
        return {
            "layer_name": self.layer_name,
            "k": self.k,
            "subsample_fraction": self.subsample_fraction,
            "seed": self.seed,
            "source_checksum": self.source_checksum,
            "reference_checksum": self.checksum(),
        }

    def save(self, directory) -> Path:
        """Write ``<layer>.dact`` plus a ``<layer>.json`` sidecar."""
        directory = Path(directory)
        save_tensor(self.reference, directory / f"{self.layer_name}.dact")
        dump_json(self.sidecar(), directory / f"{self.layer_name}.json")
        return directory / f"{self.layer_name}.json"

    @classmethod
    def load(cls, directory, layer_name: str) -> "KnnIndex":
        import json

        directory = Path(directory)
        meta_path = directory / f"{layer_name}.json"
        if not meta_path.exists():
            raise ConfigError(f"no index for layer {layer_name!r} in {directory}")
        meta = json.loads(meta_path.read_text())
        ref = load_tensor(directory / f"{layer_name}.dact")
        index = cls(
            layer_name=meta["layer_name"],
            reference=ref,
            k=int(meta["k"]),
            subsample_fraction=float(meta["subsample_fraction"]),
            seed=int(meta["seed"]),
            source_checksum=meta.get("source_checksum", ""),
        )
        if meta.get("reference_checksum") and meta["reference_checksum"] != index.checksum():
            raise ConfigError(f"{meta_path}: reference checksum mismatch")
        return index


def subsample_rows(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted row indices of a seed-deterministic uniform subsample."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"subsample_fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(n)
    size = int(np.floor(n * fraction + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:size])


def build_index(
    features,
    layer_name: str,
    k: int,
    subsample_fraction: float = 1.0,
    seed: int = 0,
) -> KnnIndex:
    """Normalize (a subsample of) training features into a reference set.

    Raises
    ------
    ConfigError
        If ``k`` is not positive or the subsample holds fewer than ``k`` rows.
    """
    x = np.asarray(features, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError(f"build_index({layer_name}): features must be a nonempty 2-D array")
    if int(k) < 1:
        raise ConfigError(f"k must be positive, got {k}")
    rows = subsample_rows(x.shape[0], subsample_fraction, seed)
    ref = l2_normalize_rows(x[rows])
    nonzero = np.any(ref != 0.0, axis=1)
    if not nonzero.all():
        logger.warning("build_index(%s): dropping %d zero rows", layer_name, int((~nonzero).sum()))
        ref = ref[nonzero]
    if ref.shape[0] < k:
        raise ConfigError(
            f"build_index({layer_name}): {ref.shape[0]} reference rows after subsampling "
            f"(fraction={subsample_fraction}) but k={k}"
        )
    return KnnIndex(
        layer_name=layer_name,
        reference=np.ascontiguousarray(ref),
        k=int(k),
        subsample_fraction=float(subsample_fraction),
        seed=int(seed),
        source_checksum=array_checksum(x),
    )


def _ensure_normalized(queries: np.ndarray, layer_name: str) -> np.ndarray:
    q64 = queries.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", q64, q64))
    off = np.abs(norms - 1.0) > NORM_TOLERANCE
    if off.any():
        logger.warning(
            "kth_distance(%s): %d query row(s) not unit-norm; normalizing", layer_name, int(off.sum())
        )
        queries = queries.copy()
        queries[off] = l2_normalize_rows(queries[off])
    return queries


def kth_distance(index: KnnIndex, queries) -> np.ndarray:
    """Distance from each query row to its k-th nearest reference row."""
    q = np.asarray(queries, dtype=np.float32)
    if q.ndim != 2 or (q.shape[0] and q.shape[1] != index.dim):
        raise ShapeError(
            f"kth_distance({index.layer_name}): query shape {q.shape} vs reference dim {index.dim}"
        )
    q = _ensure_normalized(q, index.layer_name)
    return kth_distance_kernel(index.reference, q, index.k)


@dataclass(frozen=True)
class DensityMatrix:
    """``values[n, l]`` is the density proxy of sample ``n`` at layer ``l``."""

    values: np.ndarray
    layer_names: list[str]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != len(self.layer_names):
            raise ShapeError(f"DensityMatrix: values {v.shape} vs {len(self.layer_names)} layers")
        if (v < 0).any():
            raise ConfigError("DensityMatrix: negative entries")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, rows) -> "DensityMatrix":
        return DensityMatrix(self.values[np.asarray(rows)], list(self.layer_names))

    @classmethod
    def zeros(cls, n: int, layer_names) -> "DensityMatrix":
        return cls(np.zeros((n, len(layer_names))), list(layer_names))


def density_profile(dataset: CalibrationDataset, indices: list[KnnIndex]) -> DensityMatrix:
    """kth-NN distance of every sample at every indexed layer, in index order."""
    names = [ix.layer_name for ix in indices]
    missing = [n for n in names if n not in dataset.layers]
    if missing:
        raise ConfigError(f"density_profile: split {dataset.split_name!r} lacks layers {missing}")
    check_layer_order(names, [n for n in dataset.layer_names if n in names], "density_profile")
    cols = [kth_distance(ix, l2_normalize_rows(dataset.layers[ix.layer_name])) for ix in indices]
    values = np.stack(cols, axis=1) if cols else np.zeros((len(dataset), 0))
    return DensityMatrix(values, names)


def build_indices(
    train: CalibrationDataset,
    k_per_layer: dict[str, int],
    subsample_fraction: float = 1.0,
    seed: int = 0,
) -> list[KnnIndex]:
    return [
        build_index(train.layers[name], name, k_per_layer[name], subsample_fraction, seed)
        for name in train.layer_names
        if name in k_per_layer
    ]
