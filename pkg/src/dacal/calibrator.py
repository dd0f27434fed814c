"""Composition of DAC (inner) with a baseline calibrator (outer).

Method strings follow ``<base>[+dac]`` with ``base`` one of ``ts``, ``ets``,
``irm``, ``ir`` or ``none`` (plain softmax). DAC is always applied first.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from .core import CalibrationDataset, softmax_rows
from .dac import DacModel, apply_dac, fit_dac, rescale_logits
from .errors import ConfigError
from .knn import KnnIndex, build_indices, density_profile

logger = logging.getLogger(__name__)

BASES = ("ts", "ets", "irm", "ir", "none")


def parse_method(method: str) -> tuple[str, bool]:
    parts = method.strip().lower().split("+")
    if len(parts) == 1 and parts[0] in BASES:
        return parts[0], False
    if len(parts) == 2 and parts[0] in BASES and parts[1] == "dac":
        return parts[0], True
    raise ConfigError(f"bad method {method!r}: expected <base>[+dac] with base in {BASES}")


def fit_base(kind: str, logits: np.ndarray, labels: np.ndarray):
    if kind == "ts":
        return bl.fit_ts(logits, labels)
    if kind == "ets":
        return bl.fit_ets(logits, labels)
    if kind == "irm":
        return bl.fit_irm(softmax_rows(logits), labels)
    if kind == "ir":
        return bl.fit_ir(softmax_rows(logits), labels)
    return None


def apply_base(kind: str, model, logits: np.ndarray) -> np.ndarray:
    if kind == "ts":
        return bl.apply_ts(model, logits)
    if kind == "ets":
        return bl.apply_ets(model, logits)
    if kind == "irm":
        return bl.apply_irm(model, softmax_rows(logits))
    if kind == "ir":
        return bl.apply_ir(model, softmax_rows(logits))
    return softmax_rows(logits)


def base_to_json(kind: str, model) -> dict:
    if model is None:
        return {"kind": "none"}
    if kind == "irm":
        return {"kind": "irm", **model.to_json()}
    return model.to_json()


def base_from_json(doc: dict):
    kind = doc["kind"]
    if kind == "ts":
        return kind, bl.TempScaler(doc["temperature"])
    if kind == "ets":
        return kind, bl.EtsModel(doc["temperature"], tuple(doc["mix_weights"]))
    if kind == "irm":
        return kind, bl.IsotonicMap.from_json(doc)
    if kind == "ir":
        return kind, bl.OvaIsotonic(tuple(bl.IsotonicMap.from_json(m) for m in doc["maps"]))
    if kind == "none":
        return kind, None
    raise ConfigError(f"unknown calibrator kind {kind!r}")


@dataclass(frozen=True)
class CalibratorModel:
    """A fitted ``h(g(.))`` pipeline plus the kNN settings it was fitted with."""

    method: str
    base_kind: str
    base: object
    dac: DacModel | None = None
    subsample_fraction: float = 1.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def transform_logits(self, dataset: CalibrationDataset, indices: list[KnnIndex] | None) -> np.ndarray:
        if self.dac is None:
            return dataset.logits.astype(np.float64)
        if indices is None:
            raise ConfigError(f"method {self.method!r} needs kNN indices")
        return apply_dac(self.dac, dataset, indices)

    def predict_proba(self, dataset: CalibrationDataset, indices: list[KnnIndex] | None = None) -> np.ndarray:
        return apply_base(self.base_kind, self.base, self.transform_logits(dataset, indices))

    def to_json(self) -> dict:
        doc = {
            "method": self.method,
            "base": base_to_json(self.base_kind, self.base),
            "subsample_fraction": self.subsample_fraction,
            "seed": self.seed,
        }
        if self.dac is not None:
            doc["dac"] = self.dac.to_json()
            doc["dac_checksum"] = self.dac.checksum()
        doc.update(self.extra)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CalibratorModel":
        kind, base = base_from_json(doc["base"])
        dac = DacModel.from_json(doc["dac"]) if "dac" in doc else None
        if dac is not None and doc.get("dac_checksum") not in (None, dac.checksum()):
            raise ConfigError("model file: DAC checksum mismatch")
        parse_method(doc["method"])
        return cls(
            method=doc["method"],
            base_kind=kind,
            base=base,
            dac=dac,
            subsample_fraction=float(doc.get("subsample_fraction", 1.0)),
            seed=int(doc.get("seed", 0)),
        )


def compose(
    method: str,
    val: CalibrationDataset,
    train: CalibrationDataset | None = None,
    indices: list[KnnIndex] | None = None,
    k_per_layer: dict[str, int] | None = None,
    subsample_fraction: float = 1.0,
    seed: int = 0,
) -> tuple[CalibratorModel, list[KnnIndex] | None]:
    """Fit ``method`` on ``val``: DAC first, then the base on DAC's output.

    With ``+dac``, pass either prebuilt ``indices`` (from the train split) or
    the ``train`` split together with ``k_per_layer``.
    """
    base_kind, use_dac = parse_method(method)
    labels = val.require_labels()
    dac = None
    logits = val.logits.astype(np.float64)
    if use_dac:
        if indices is None:
            if train is None or k_per_layer is None:
                raise ConfigError("compose: +dac needs indices or (train, k_per_layer)")
            indices = build_indices(train, k_per_layer, subsample_fraction, seed)
        densities = density_profile(val, indices)
        dac, _ = fit_dac(
            val,
            densities,
            k_per_layer={ix.layer_name: ix.k for ix in indices},
            index_checksums={ix.layer_name: ix.checksum() for ix in indices},
        )
        by_name = {ix.layer_name: ix for ix in indices}
        indices = [by_name[n] for n in dac.layer_names]
        logits = rescale_logits(dac, val.logits, densities)
    base = fit_base(base_kind, logits, labels)
    model = CalibratorModel(
        method=method,
        base_kind=base_kind,
        base=base,
        dac=dac,
        subsample_fraction=subsample_fraction,
        seed=seed,
    )
    return model, indices
