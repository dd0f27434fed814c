"""Synthetic classifier outputs with known ground truth.

Generative model for one sample of class ``y``::

    r      ~ noise_levels with probabilities noise_probs    (per-sample noise level)
    x      = mean[y] + r * eps_x          eps_x ~ N(0, I_signal)
    nu     = r * eps_nu                   eps_nu ~ N(0, I_nuisance)
    u      = [x, nu] + severity * eta     eta ~ N(0, I)     (covariate shift)

The classifier's logits are the linear readout that is Bayes-optimal for a
single noise level of 1, multiplied by ``miscalibration_temperature``::

    logit_c = miscalibration_temperature * (mean[c] . x - |mean[c]|^2 / 2)

With ``noise_levels == (1.0,)`` and temperature 1 the logits are the exact
log-posterior (up to a per-row constant). Several noise levels make the
readout overconfident for noisy samples, which sit in sparse regions of
feature space. Shift adds noise everywhere, so DAC's density proxies see it.

Layer ``l < L`` features are ``u @ A_l + offset_l + small noise`` with a
fixed random projection ``A_l``; the last layer is the signal part ``x``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .core import CalibrationDataset
from .errors import ConfigError
from .io import Manifest, SplitRecord, dump_json, save_tensor

LAYER_NOISE = 0.05


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    feature_dims: tuple[int, ...] = (2, 4, 8)
    nuisance_dim: int = 8
    n_train: int = 5000
    n_val: int = 2000
    n_test: int = 5000
    n_ood: int = 5000
    separation: float = 5.0
    shift_severities: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
    miscalibration_temperature: float = 1.0
    noise_levels: tuple[float, ...] = (1.0,)
    noise_probs: tuple[float, ...] = (1.0,)
    layer_offset: float = 4.0
    seed: int = 0

    def __post_init__(self):
        sev = self.shift_severities
        if self.num_classes < 2:
            raise ConfigError("synth: need at least 2 classes")
        if not self.feature_dims or min(self.feature_dims) < 1 or self.nuisance_dim < 0:
            raise ConfigError("synth: feature dims must be positive")
        if not sev or sev[0] != 0 or any(b < a for a, b in zip(sev, sev[1:])):
            raise ConfigError(f"synth: severities must start at 0 and be non-decreasing, got {sev}")
        if len(self.noise_levels) != len(self.noise_probs) or min(self.noise_levels) <= 0:
            raise ConfigError("synth: noise_levels and noise_probs must pair up, levels > 0")
        if abs(sum(self.noise_probs) - 1.0) > 1e-9 or min(self.noise_probs) < 0:
            raise ConfigError("synth: noise_probs must be a probability vector")
        if min(self.n_train, self.n_val, self.n_test) < self.num_classes:
            raise ConfigError("synth: every split needs at least num_classes samples")
        if self.miscalibration_temperature <= 0 or self.separation <= 0:
            raise ConfigError("synth: temperature and separation must be positive")

    @property
    def signal_dim(self) -> int:
        return self.feature_dims[-1]

    @property
    def layer_names(self) -> list[str]:
        return [f"layer{i + 1}" for i in range(len(self.feature_dims))]

    def to_json(self) -> dict:
        return asdict(self)


def benchmark_config(seed: int = 0, **overrides) -> SynthConfig:
    """Shifted-data benchmark: 10 classes, 3 layers, overconfident logits."""
    base = dict(
        num_classes=10,
        feature_dims=(2, 4, 8),
        n_train=5000,
        n_val=2000,
        n_test=5000,
        miscalibration_temperature=3.0,
        noise_levels=(0.6, 1.0, 1.6),
        noise_probs=(0.3, 0.4, 0.3),
        seed=seed,
    )
    base.update(overrides)
    return SynthConfig(**base)


@dataclass
class _Params:
    means: np.ndarray
    ood_means: np.ndarray
    projections: list[np.ndarray]
    offsets: list[np.ndarray]


def _unit_rows(rng, n, d) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _params(cfg: SynthConfig) -> _Params:
    rng = np.random.default_rng([cfg.seed, 0])
    d, total = cfg.signal_dim, cfg.signal_dim + cfg.nuisance_dim
    means = cfg.separation * _unit_rows(rng, cfg.num_classes, d)
    ood_means = cfg.separation * _unit_rows(rng, cfg.num_classes, d)
    projections, offsets = [], []
    for m in cfg.feature_dims[:-1]:
        projections.append(rng.standard_normal((total, m)) / np.sqrt(total))
        offsets.append(cfg.layer_offset * np.ones(m) / np.sqrt(m))
    return _Params(means, ood_means, projections, offsets)


def readout(cfg: SynthConfig, means: np.ndarray, x: np.ndarray) -> np.ndarray:
    z = x @ means.T - 0.5 * np.sum(means * means, axis=1)
    return cfg.miscalibration_temperature * z


def _sample(cfg: SynthConfig, p: _Params, rng, n: int, severity: float, ood: bool = False):
    d = cfg.signal_dim
    means = p.ood_means if ood else p.means
    y = rng.integers(0, cfg.num_classes, n)
    r = rng.choice(np.asarray(cfg.noise_levels), size=n, p=np.asarray(cfg.noise_probs))
    x = means[y] + r[:, None] * rng.standard_normal((n, d))
    nu = r[:, None] * rng.standard_normal((n, cfg.nuisance_dim))
    u = np.hstack([x, nu])
    if severity > 0:
        u = u + severity * rng.standard_normal(u.shape)
    return u, y


def _features(cfg: SynthConfig, p: _Params, rng, u: np.ndarray) -> dict[str, np.ndarray]:
    feats = {}
    names = cfg.layer_names
    for name, a, off in zip(names, p.projections, p.offsets):
        h = u @ a + off + LAYER_NOISE * rng.standard_normal((u.shape[0], a.shape[1]))
        feats[name] = h.astype(np.float32)
    feats[names[-1]] = u[:, : cfg.signal_dim].astype(np.float32)
    return feats


def split_plan(cfg: SynthConfig) -> list[tuple[str, int, float, str]]:
    """``(name, size, severity, kind)`` for every generated split, in order."""
    plan = [
        ("train", cfg.n_train, 0.0, "train"),
        ("val", cfg.n_val, 0.0, "val"),
        ("test", cfg.n_test, 0.0, "test"),
    ]
    plan += [(f"severity_{i}", cfg.n_test, float(s), "shift") for i, s in enumerate(cfg.shift_severities)]
    if cfg.n_ood > 0:
        plan.append(("ood", cfg.n_ood, 0.0, "ood"))
    return plan


def generate(cfg: SynthConfig) -> dict[str, CalibrationDataset]:
    """All splits for ``cfg``; bitwise reproducible from ``cfg.seed``."""
    p = _params(cfg)
    out = {}
    for i, (name, n, severity, kind) in enumerate(split_plan(cfg), start=1):
        rng = np.random.default_rng([cfg.seed, i])
        ood = kind == "ood"
        u, y = _sample(cfg, p, rng, n, severity, ood=ood)
        feats = _features(cfg, p, rng, u)
        logits = readout(cfg, p.means, u[:, : cfg.signal_dim]).astype(np.float32)
        meta = {"kind": kind, "severity": severity}
        if kind == "shift":
            meta["severity_index"] = i - 4
        out[name] = CalibrationDataset(
            split_name=name,
            logits=logits,
            layers=feats,
            num_classes=cfg.num_classes,
            labels=None if ood else y,
            meta=meta,
        )
    return out


def bayes_posterior(cfg: SynthConfig, base_features) -> np.ndarray:
    """Exact class posterior under the unshifted in-domain mixture.

    ``base_features`` are rows of ``u = [x, nu]`` (signal then nuisance).
    """
    u = np.atleast_2d(np.asarray(base_features, dtype=np.float64))
    d = cfg.signal_dim
    if u.shape[1] != d + cfg.nuisance_dim:
        raise ConfigError(f"bayes_posterior: expected {d + cfg.nuisance_dim} columns, got {u.shape[1]}")
    means = _params(cfg).means
    x, nu = u[:, :d], u[:, d:]
    sq_x = np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=2)
    sq_nu = np.sum(nu * nu, axis=1)[:, None]
    total_dim = d + cfg.nuisance_dim
    terms = []
    for r, w in zip(cfg.noise_levels, cfg.noise_probs):
        if w == 0:
            continue
        terms.append(np.log(w) - total_dim * np.log(r) - (sq_x + sq_nu) / (2 * r * r))
    log_lik = logsumexp(np.stack(terms, axis=0), axis=0)
    return softmax(log_lik, axis=1)


def bayes_confidence(cfg: SynthConfig, base_features) -> np.ndarray:
    return bayes_posterior(cfg, base_features).max(axis=1)


def sample_base(cfg: SynthConfig, n: int, severity: float = 0.0, seed: int = 0):
    """Raw ``(u, y)`` draws, for checking calibrators against the Bayes oracle."""
    rng = np.random.default_rng([cfg.seed, 1000 + seed])
    return _sample(cfg, _params(cfg), rng, n, severity)


def write_experiment(cfg: SynthConfig, out_dir, k: int = 50, subsample_fraction: float = 1.0,
                     methods=("ts", "ts+dac")) -> Manifest:
    """Generate all splits and write tensor files plus ``manifest.json``."""
    out_dir = Path(out_dir)
    splits = generate(cfg)
    records = {}
    for name, ds in splits.items():
        base = out_dir / name
        save_tensor(ds.logits, base / "logits.dact")
        feats = {}
        for layer, arr in ds.layers.items():
            save_tensor(arr, base / f"{layer}.dact")
            feats[layer] = base / f"{layer}.dact"
        labels = None
        if ds.labels is not None:
            save_tensor(ds.labels.astype(np.int32), base / "labels.dact")
            labels = base / "labels.dact"
        records[name] = SplitRecord(name, base / "logits.dact", feats, labels, dict(ds.meta))
    manifest = Manifest(
        num_classes=cfg.num_classes,
        layers=cfg.layer_names,
        splits=records,
        k_per_layer={layer: k for layer in cfg.layer_names},
        subsample_fraction=subsample_fraction,
        seed=cfg.seed,
        methods=list(methods),
    )
    manifest.path = out_dir / "manifest.json"
    doc = manifest.to_json()
    doc["synth_config"] = cfg.to_json()

    dump_json(doc, manifest.path)
    return manifest
